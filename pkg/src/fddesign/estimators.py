"""Staged inverse-probability-weighted estimators for the front-door effect.

The three coefficient groups are fitted in causal order:

1. ``beta_tC`` by least squares on every record (``x_C, x_t`` always observed),
2. ``(beta_Mt, beta_MC)`` from records with ``x_M`` observed, weighted by
   ``1 / pi1``, with instruments ``(eps_t_hat, x_C)``,
3. ``(beta_rC, gamma, beta_rM)`` from complete records, weighted by
   ``1 / (pi1 pi2)``, with instruments ``(x_C, eps_t_hat, eps_M_hat)`` and
   regressors ``(x_C, eps_t_hat, x_M)``.

Summation policy: every reduction over records sums per-record terms with
:func:`math.fsum`, which is exactly rounded. Estimates are therefore
bit-identical under any reordering of the records.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .sem import BlockMatrix, CoarsenedDataset, ConstantPolicy, PropensityPolicy

CHUNK = 4096
MAX_CONDITION = 1e12


class RankDeficiencyError(np.linalg.LinAlgError):
    """A moment system is singular or too ill-conditioned to solve."""


class InsufficientDataError(ValueError):
    """No records at the stage a fit needs."""


def weighted_cross(w: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``sum_i w_i A_i B_i^T``, exactly rounded entry by entry.

    Per-record products are formed in blocks of ``CHUNK`` rows to bound memory.
    """
    w = np.asarray(w, dtype=float)
    A = np.asarray(A, dtype=float).reshape(len(w), -1)
    B = np.asarray(B, dtype=float).reshape(len(w), -1)
    p, q = A.shape[1], B.shape[1]
    acc = [[] for _ in range(p * q)]
    for s in range(0, len(w), CHUNK):
        prods = ((A[s:s + CHUNK] * w[s:s + CHUNK, None])[:, :, None] * B[s:s + CHUNK, None, :])
        cols = prods.reshape(-1, p * q).T.tolist()
        for k in range(p * q):
            acc[k].extend(cols[k])
    return np.array([math.fsum(a) for a in acc]).reshape(p, q)


def exact_mean(x: np.ndarray) -> np.ndarray:
    """Column means with :func:`math.fsum`."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return np.array([math.fsum(c) for c in x.T.tolist()]) / max(len(x), 1)


def exact_cov(x: np.ndarray) -> np.ndarray:
    """Population covariance (``ddof=0``) with order-independent sums."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    xc = x - exact_mean(x)
    return weighted_cross(np.ones(len(x)), xc, xc) / max(len(x), 1)


def solve_checked(lhs: np.ndarray, rhs: np.ndarray, what: str):
    """Solve ``lhs @ x = rhs`` via SVD; refuse when the condition exceeds 1e12.

    Returns the solution and the condition number.
    """
    U, s, Vt = np.linalg.svd(lhs)
    if s.size == 0 or s[-1] <= 0 or s[0] / s[-1] > MAX_CONDITION:
        cond = np.inf if s.size == 0 or s[-1] <= 0 else s[0] / s[-1]
        weakest = int(np.argmax(np.abs(Vt[-1]))) if s.size else 0
        raise RankDeficiencyError(
            f"{what}: system is rank deficient (condition {cond:.3g}); "
            f"dimension {weakest} is nearly collinear"
        )
    x = Vt.T @ ((U.T @ rhs) / s.reshape(-1, *([1] * (np.ndim(rhs) - 1))))
    return x, float(s[0] / s[-1])


@dataclass(frozen=True)
class TreatmentFit:
    beta_tC: np.ndarray
    eps_t: np.ndarray  # every record
    cond: float


@dataclass(frozen=True)
class MediatorFit:
    beta_Mt: np.ndarray
    beta_MC: np.ndarray
    eps_M: np.ndarray  # rows with stage >= 2
    weights: np.ndarray
    cond: float


@dataclass(frozen=True)
class ResponseFit:
    beta_rC: np.ndarray
    gamma: float
    beta_rM: np.ndarray
    eps_r_perp: np.ndarray  # FULL rows
    weights: np.ndarray
    cond: float


def fit_beta_tC(data: CoarsenedDataset) -> TreatmentFit:
    n, d_C = data.x_C.shape
    if n < d_C:
        raise RankDeficiencyError(f"beta_tC: {n} records cannot identify {d_C} confounder coefficients")
    w = np.ones(n)
    G = weighted_cross(w, data.x_C, data.x_C)
    b = weighted_cross(w, data.x_C, data.x_t)
    beta, cond = solve_checked(G, b, "beta_tC")
    beta = beta[:, 0]
    return TreatmentFit(beta, data.x_t - data.x_C @ beta, cond)


def stage_weights(data: CoarsenedDataset, policy: PropensityPolicy):
    """Inverse-probability weights on the ``x_M`` rows and the FULL rows."""
    has_M = data.has_M
    xC, xt = data.x_C[has_M], data.x_t[has_M]
    p1 = policy.pi1(xC, xt)
    w2 = 1.0 / p1
    full = data.full_within_M()
    p2 = policy.pi2(xC[full], xt[full], data.x_M[full])
    w3 = 1.0 / (p1[full] * p2)
    return w2, w3


def fit_beta_M(data: CoarsenedDataset, policy: PropensityPolicy, eps_t: np.ndarray,
               weights: Optional[np.ndarray] = None) -> MediatorFit:
    has_M = data.has_M
    if not has_M.any():
        raise InsufficientDataError("no records with x_M observed (stage >= 2)")
    w = stage_weights(data, policy)[0] if weights is None else weights
    xC, xt = data.x_C[has_M], data.x_t[has_M]
    Z1 = np.column_stack([eps_t[has_M], xC])
    Z2 = np.column_stack([xt, xC])
    lhs = weighted_cross(w, Z1, Z2)
    rhs = weighted_cross(w, Z1, data.x_M)
    theta, cond = solve_checked(lhs, rhs, "beta_M")
    beta_Mt, beta_MC = theta[0], theta[1:].T
    eps_M = data.x_M - np.outer(xt, beta_Mt) - xC @ beta_MC.T
    return MediatorFit(beta_Mt, beta_MC, eps_M, w, cond)


def fit_beta_r(data: CoarsenedDataset, policy: PropensityPolicy, eps_t: np.ndarray,
               eps_M: np.ndarray, weights: Optional[np.ndarray] = None) -> ResponseFit:
    full = data.is_full
    if not full.any():
        raise InsufficientDataError("no complete records (stage FULL)")
    w = stage_weights(data, policy)[1] if weights is None else weights
    d_C = data.x_C.shape[1]
    fM = data.full_within_M()
    xC, et = data.x_C[full], eps_t[full]
    Z1 = np.column_stack([xC, et, eps_M[fM]])
    Z2 = np.column_stack([xC, et, data.x_M[fM]])
    lhs = weighted_cross(w, Z1, Z2)
    rhs = weighted_cross(w, Z1, data.x_r)
    theta, cond = solve_checked(lhs, rhs, "beta_r")
    theta = theta[:, 0]
    beta_rC, gamma, beta_rM = theta[:d_C], float(theta[d_C]), theta[d_C + 1:]
    resid = data.x_r - Z2 @ theta
    return ResponseFit(beta_rC, gamma, beta_rM, resid, w, cond)


def moment_residuals(data: CoarsenedDataset, tfit: TreatmentFit, mfit: MediatorFit,
                     rfit: ResponseFit) -> dict:
    """Relative size of each estimating equation at the fitted coefficients."""
    has_M, full = data.has_M, data.is_full
    out = {}
    g = data.x_C * tfit.eps_t[:, None]
    out["tC"] = np.abs(g.sum(0)).max() / max(np.abs(g).sum(), 1e-300)
    Z1 = np.column_stack([tfit.eps_t[has_M], data.x_C[has_M]])
    g = (Z1 * mfit.weights[:, None])[:, :, None] * mfit.eps_M[:, None, :]
    out["M"] = np.abs(g.sum(0)).max() / max(np.abs(g).sum(), 1e-300)
    fM = data.full_within_M()
    Z1 = np.column_stack([data.x_C[full], tfit.eps_t[full], mfit.eps_M[fM]])
    g = Z1 * (rfit.weights * rfit.eps_r_perp)[:, None]
    out["r"] = np.abs(g.sum(0)).max() / max(np.abs(g).sum(), 1e-300)
    return out


@dataclass(frozen=True)
class NuisanceEstimates:
    """Plug-in structural coefficients and residual second moments."""

    beta_hat: BlockMatrix
    Sigma_C_hat: np.ndarray
    var_t_hat: float
    Sigma_M_hat: np.ndarray
    gamma_hat: float
    var_r_given_t_hat: float

    def to_dict(self) -> dict:
        return {
            "beta": self.beta_hat.to_dict(),
            "Sigma_C": np.asarray(self.Sigma_C_hat).tolist(),
            "var_t": float(self.var_t_hat),
            "Sigma_M": np.asarray(self.Sigma_M_hat).tolist(),
            "gamma": float(self.gamma_hat),
            "var_r_given_t": float(self.var_r_given_t_hat),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceEstimates":
        b = d["beta"]
        return cls(
            beta_hat=BlockMatrix(b["tC"], b["MC"], b["Mt"], b["rC"], b["rM"]),
            Sigma_C_hat=np.array(d["Sigma_C"], dtype=float),
            var_t_hat=float(d["var_t"]),
            Sigma_M_hat=np.array(d["Sigma_M"], dtype=float),
            gamma_hat=float(d["gamma"]),
            var_r_given_t_hat=float(d["var_r_given_t"]),
        )

    @classmethod
    def from_model(cls, blocks: BlockMatrix, errors) -> "NuisanceEstimates":
        """Population values, for planning directly from a known model."""
        return cls(blocks, errors.Sigma_C, errors.var_t, errors.Sigma_M,
                   errors.gamma0, errors.var_r_given_t)


def _hajek(w: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return weighted_cross(w, A, B) / math.fsum(w)


def estimate_nuisance(data: CoarsenedDataset, tfit: TreatmentFit, mfit: MediatorFit,
                      rfit: ResponseFit) -> NuisanceEstimates:
    """Residual second moments (weighted by the stage IPW weights, Hajek-normalised).

    The model has zero means, so second moments are uncentred.
    """
    n = data.n
    blocks = BlockMatrix(tfit.beta_tC, mfit.beta_MC, mfit.beta_Mt, rfit.beta_rC, rfit.beta_rM)
    Sigma_C = weighted_cross(np.ones(n), data.x_C, data.x_C) / n
    var_t = math.fsum(tfit.eps_t**2) / n
    Sigma_M = _hajek(mfit.weights, mfit.eps_M, mfit.eps_M)
    Sigma_M = 0.5 * (Sigma_M + Sigma_M.T)
    var_r = float(_hajek(rfit.weights, rfit.eps_r_perp, rfit.eps_r_perp)[0, 0])
    return NuisanceEstimates(blocks, Sigma_C, var_t, Sigma_M, rfit.gamma, var_r)


@dataclass(frozen=True)
class StagedFit:
    treatment: TreatmentFit
    mediator: MediatorFit
    response: ResponseFit
    nuisance: NuisanceEstimates


def fit_all(data: CoarsenedDataset, policy: PropensityPolicy) -> StagedFit:
    tfit = fit_beta_tC(data)
    w2, w3 = stage_weights(data, policy)
    mfit = fit_beta_M(data, policy, tfit.eps_t, weights=w2)
    rfit = fit_beta_r(data, policy, tfit.eps_t, mfit.eps_M, weights=w3)
    return StagedFit(tfit, mfit, rfit, estimate_nuisance(data, tfit, mfit, rfit))


def influence_components(data: CoarsenedDataset, fit: StagedFit):
    """Per-record plug-in influence values for ``beta_Mt`` and ``beta_rM``.

    Both are ``n x d_M``; records missing the relevant stage contribute zero.
    """
    nu = fit.nuisance
    n, d_M = data.n, data.dims.d_M
    has_M = data.has_M
    fM = data.full_within_M()
    phi_Mt = np.zeros((n, d_M))
    eps_t = fit.treatment.eps_t
    phi_Mt[has_M] = (fit.mediator.weights * eps_t[has_M] / nu.var_t_hat)[:, None] * fit.mediator.eps_M
    phi_rM = np.zeros((n, d_M))
    SinvM = np.linalg.solve(nu.Sigma_M_hat, fit.mediator.eps_M[fM].T).T
    phi_rM[data.is_full] = (fit.response.weights * fit.response.eps_r_perp)[:, None] * SinvM
    return phi_Mt, phi_rM


@dataclass(frozen=True)
class EffectEstimate:
    xi_hat: float
    beta_Mt_hat: np.ndarray
    beta_rM_hat: np.ndarray
    se: float
    ci: tuple
    level: float
    n_used: dict
    weight_diagnostics: dict
    condition_numbers: dict
    nuisance: NuisanceEstimates = field(repr=False)
    if_correlation: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "xi_hat": self.xi_hat,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "beta_Mt_hat": self.beta_Mt_hat.tolist(),
            "beta_rM_hat": self.beta_rM_hat.tolist(),
            "beta_tC_hat": self.nuisance.beta_hat.beta_tC.tolist(),
            "beta_MC_hat": self.nuisance.beta_hat.beta_MC.tolist(),
            "beta_rC_hat": self.nuisance.beta_hat.beta_rC.tolist(),
            "gamma_hat": self.nuisance.gamma_hat,
            "n_used": self.n_used,
            "weight_diagnostics": self.weight_diagnostics,
            "condition_numbers": self.condition_numbers,
            "if_correlation": self.if_correlation,
        }


def _weight_summary(w: np.ndarray) -> dict:
    if w.size == 0:
        return {"max": None, "mean": None}
    return {"max": float(w.max()), "mean": float(exact_mean(w)[0])}


def estimate_effect(data: CoarsenedDataset, policy: Optional[PropensityPolicy] = None,
                    level: float = 0.95) -> EffectEstimate:
    """Product estimator ``beta_rM_hat . beta_Mt_hat`` with a delta-method CI."""
    policy = ConstantPolicy(1.0, 1.0) if policy is None else policy
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    fit = fit_all(data, policy)
    b_Mt, b_rM = fit.mediator.beta_Mt, fit.response.beta_rM
    xi = float(np.dot(b_rM, b_Mt))
    phi_Mt, phi_rM = influence_components(data, fit)
    V_Mt = exact_cov(phi_Mt)
    V_rM = exact_cov(phi_rM)
    n = data.n
    var = (b_rM @ V_Mt @ b_rM + b_Mt @ V_rM @ b_Mt) / n
    se = float(np.sqrt(max(var, 0.0)))
    z = float(stats.norm.ppf(0.5 + level / 2))
    s1, s2 = phi_Mt @ b_rM, phi_rM @ b_Mt
    C = exact_cov(np.column_stack([s1, s2]))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = float(C[0, 1] / np.sqrt(C[0, 0] * C[1, 1])) if n > 2 else float("nan")
    return EffectEstimate(
        xi_hat=xi, beta_Mt_hat=b_Mt, beta_rM_hat=b_rM, se=se,
        ci=(xi - z * se, xi + z * se), level=level,
        n_used=data.counts(),
        weight_diagnostics={"stage2": _weight_summary(fit.mediator.weights),
                            "full": _weight_summary(fit.response.weights)},
        condition_numbers={"tC": fit.treatment.cond, "M": fit.mediator.cond, "r": fit.response.cond},
        nuisance=fit.nuisance, if_correlation=corr,
    )
