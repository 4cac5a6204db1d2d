"""Budget-constrained optimal propensities for staged front-door sampling.

Per unit, the asymptotic variance of the optimized estimator splits into a
first-stage leverage ``g1`` (information about ``beta_Mt`` carried by ``x_Ct``)
and a second-stage leverage ``g2`` (information about ``beta_rM``):

    Var = E[g1 / pi1 + g2 / (pi1 pi2)],
    cost = c0 + E[pi1 c1 + pi1 pi2 c2].

For a Lagrange multiplier ``lam`` the minimiser is available pointwise in
closed form; ``lam`` is then fixed by bisection on the (monotone) expected
cost. Population expectations are averages over a weighted point pool.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .estimators import NuisanceEstimates, RankDeficiencyError, fit_all
from .sem import (
    PROPENSITY_FLOOR,
    CoarsenedDataset,
    ConstantPolicy,
    CostSpec,
    FrontDoorModel,
    PropensityPolicy,
    _digest,
)

DEFAULT_POOL_SIZE = 256


class InfeasibleBudgetError(ValueError):
    """Budget at or below the base cost ``c0``."""


class InsufficientPoolError(ValueError):
    """Empty residual pool or point pool."""


class BudgetSlackWarning(UserWarning):
    """The budget cannot be spent exactly; the returned design under-spends."""


def leverage_g1(x_Ct, nuisance: NuisanceEstimates) -> np.ndarray:
    """``beta_rM Sigma_M beta_rM^T * eps_t**2 / var_t**2`` at stacked ``(x_C, x_t)`` rows."""
    x_Ct = np.atleast_2d(np.asarray(x_Ct, dtype=float))
    b = nuisance.beta_hat
    eps_t = x_Ct[:, -1] - x_Ct[:, :-1] @ b.beta_tC
    k = float(b.beta_rM @ nuisance.Sigma_M_hat @ b.beta_rM)
    return k * eps_t**2 / nuisance.var_t_hat**2


def _sigma_inv_beta(nuisance: NuisanceEstimates) -> np.ndarray:
    S = np.asarray(nuisance.Sigma_M_hat, dtype=float)
    s = np.linalg.svd(S, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > 1e12:
        raise RankDeficiencyError("Sigma_M estimate is singular; g2 is undefined")
    return np.linalg.solve(S, nuisance.beta_hat.beta_Mt)


def leverage_g2(x_CtM, nuisance: NuisanceEstimates, var_r_given_t=None) -> np.ndarray:
    """``Var(eps_r | eps_t) * (eps_M^T Sigma_M^{-1} beta_Mt)**2`` at stacked ``(x_C, x_t, x_M)`` rows.

    ``var_r_given_t`` may be a callable of ``eps_t``; the default is the
    constant plug-in from ``nuisance``.
    """
    x = np.atleast_2d(np.asarray(x_CtM, dtype=float))
    b = nuisance.beta_hat
    d_C, d_M = b.beta_tC.shape[0], b.beta_Mt.shape[0]
    x_C, x_t, x_M = x[:, :d_C], x[:, d_C], x[:, d_C + 1:d_C + 1 + d_M]
    eps_M = x_M - np.outer(x_t, b.beta_Mt) - x_C @ b.beta_MC.T
    proj = eps_M @ _sigma_inv_beta(nuisance)
    if var_r_given_t is None:
        vr = nuisance.var_r_given_t_hat
    else:
        vr = np.asarray(var_r_given_t(x_t - x_C @ b.beta_tC), dtype=float)
    return vr * proj**2


# ---------------------------------------------------------------------------
# leverage models: evaluate g1, g2, costs and conditional means at any point


class LeverageModel:
    """Leverages and costs built from nuisance estimates and a residual pool.

    Conditional means given ``x_Ct`` are averages over a fixed subsample of
    the mediator residual pool, shared by all evaluation points.
    """

    def __init__(self, nuisance: NuisanceEstimates, costs: CostSpec, eps_M_pool,
                 pool_size: int = DEFAULT_POOL_SIZE, seed=0, g2_method: str = "pool",
                 var_r_given_t=None, subsample=None):
        eps_M_pool = np.atleast_2d(np.asarray(eps_M_pool, dtype=float))
        if eps_M_pool.shape[0] == 0:
            raise InsufficientPoolError("mediator residual pool is empty")
        if g2_method not in ("pool", "closed"):
            raise ValueError("g2_method must be 'pool' or 'closed'")
        self.nuisance = nuisance
        self.costs = costs
        self.g2_method = g2_method
        self.var_r_given_t = var_r_given_t
        if subsample is None:
            k = min(int(pool_size), eps_M_pool.shape[0])
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(eps_M_pool.shape[0], size=k, replace=False))
            subsample = eps_M_pool[idx]
        self.subsample = np.ascontiguousarray(subsample, dtype=float)
        b = nuisance.beta_hat
        self._d_C = b.beta_tC.shape[0]
        self._k1 = float(b.beta_rM @ nuisance.Sigma_M_hat @ b.beta_rM)
        self._sib = _sigma_inv_beta(nuisance)
        self._pool_g2 = float(np.mean((self.subsample @ self._sib) ** 2))
        self._closed_g2 = float(b.beta_Mt @ self._sib)

    # residuals
    def eps_t(self, x_C, x_t):
        return np.asarray(x_t, dtype=float) - np.asarray(x_C, dtype=float) @ self.nuisance.beta_hat.beta_tC

    def _vr(self, x_C, x_t):
        if self.var_r_given_t is None:
            return self.nuisance.var_r_given_t_hat
        return np.asarray(self.var_r_given_t(self.eps_t(x_C, x_t)), dtype=float)

    def g1(self, x_C, x_t):
        return self._k1 * self.eps_t(x_C, x_t) ** 2 / self.nuisance.var_t_hat**2

    def g1_backdoor(self, x_C, x_t):
        """First-stage leverage for estimating ``beta_Mt`` alone (trace of ``Var(eps_M)``)."""
        tr = float(np.trace(self.nuisance.Sigma_M_hat))
        return tr * self.eps_t(x_C, x_t) ** 2 / self.nuisance.var_t_hat**2

    def g2(self, x_C, x_t, x_M):
        b = self.nuisance.beta_hat
        eps_M = np.asarray(x_M) - np.outer(x_t, b.beta_Mt) - np.asarray(x_C) @ b.beta_MC.T
        return self._vr(x_C, x_t) * (eps_M @ self._sib) ** 2

    def c1(self, x_C, x_t):
        return self.costs.c1(np.column_stack([x_C, x_t]))

    def c2(self, x_C, x_t, x_M):
        return self.costs.c2(np.column_stack([x_C, x_t, x_M]))

    def cond_g2(self, x_C, x_t, method: Optional[str] = None):
        """``E[g2 | x_Ct]``; free of ``x_Ct`` apart from the variance hook."""
        method = self.g2_method if method is None else method
        base = self._pool_g2 if method == "pool" else self._closed_g2
        n = np.shape(x_t)[0]
        return np.broadcast_to(self._vr(x_C, x_t) * base, (n,)).astype(float)

    def cond_c2(self, x_C, x_t):
        """``E[c2 | x_Ct]`` over synthetic mediators ``beta_Mt x_t + beta_MC x_C + eps``."""
        c2 = self.costs.c2
        n = np.shape(x_t)[0]
        if c2.is_constant:
            return np.full(n, float(c2.a))
        b = self.nuisance.beta_hat
        x_C = np.asarray(x_C, dtype=float)
        x_t = np.asarray(x_t, dtype=float)
        mean_M = np.ascontiguousarray(np.outer(x_t, b.beta_Mt) + x_C @ b.beta_MC.T)
        base_sq = np.ascontiguousarray(np.einsum("ij,ij->i", x_C, x_C) + x_t**2)
        return c2.a * kernels.cond_norm_mean(base_sq, mean_M, self.subsample)

    def to_dict(self) -> dict:
        return {
            "kind": "nuisance",
            "nuisance": self.nuisance.to_dict(),
            "costs": self.costs.to_dict(),
            "g2_method": self.g2_method,
            "subsample": self.subsample.tolist(),
            "pool_digest": hashlib.sha256(self.subsample.tobytes()).hexdigest(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeverageModel":
        from .io import costs_from_dict

        sub = np.array(d["subsample"], dtype=float)
        if hashlib.sha256(sub.tobytes()).hexdigest() != d.get("pool_digest", ""):
            raise ValueError("pool digest does not match the stored residual subsample")
        return cls(NuisanceEstimates.from_dict(d["nuisance"]), costs_from_dict(d["costs"]),
                   sub, g2_method=d.get("g2_method", "pool"), subsample=sub)


@dataclass(frozen=True)
class ConstantLeverage:
    """Point-free leverages and costs, for closed-form fixtures."""

    g1_value: float
    g2_value: float
    c1_value: float
    c2_value: float
    g1_bd_value: Optional[float] = None

    def _full(self, x_t, v):
        return np.full(np.shape(x_t)[0], float(v))

    def g1(self, x_C, x_t):
        return self._full(x_t, self.g1_value)

    def g1_backdoor(self, x_C, x_t):
        v = self.g1_value if self.g1_bd_value is None else self.g1_bd_value
        return self._full(x_t, v)

    def g2(self, x_C, x_t, x_M):
        return self._full(x_t, self.g2_value)

    def c1(self, x_C, x_t):
        return self._full(x_t, self.c1_value)

    def c2(self, x_C, x_t, x_M):
        return self._full(x_t, self.c2_value)

    def cond_g2(self, x_C, x_t, method=None):
        return self._full(x_t, self.g2_value)

    def cond_c2(self, x_C, x_t):
        return self._full(x_t, self.c2_value)

    def to_dict(self):
        return {"kind": "constant", "g1": self.g1_value, "g2": self.g2_value,
                "c1": self.c1_value, "c2": self.c2_value, "g1_bd": self.g1_bd_value}


def leverage_from_dict(d: dict):
    if d["kind"] == "constant":
        return ConstantLeverage(d["g1"], d["g2"], d["c1"], d["c2"], d.get("g1_bd"))
    return LeverageModel.from_dict(d)


# ---------------------------------------------------------------------------
# context: a weighted point pool with leverages precomputed


@dataclass(frozen=True)
class LeverageContext:
    """Weighted point pool over which population expectations are averaged.

    ``model`` evaluates leverages away from the pool; it is ``None`` when the
    arrays were overridden directly, in which case policies can only be
    evaluated on the pool itself.
    """

    c0: float
    g1: np.ndarray
    g2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    eg2: np.ndarray
    ec2: np.ndarray
    g1_bd: np.ndarray
    weights: np.ndarray
    model: object = None
    points: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.g1.shape[0]
        if n == 0:
            raise InsufficientPoolError("point pool is empty")
        for name in ("g2", "c1", "c2", "eg2", "ec2", "g1_bd", "weights"):
            arr = np.ascontiguousarray(np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)))
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "g1", np.ascontiguousarray(self.g1, dtype=float))

    @property
    def n(self) -> int:
        return self.g1.shape[0]

    def mean(self, values) -> float:
        return float(np.sum(self.weights * values) / np.sum(self.weights))

    @property
    def cost_full(self) -> float:
        return self.c0 + self.mean(self.c1 + self.c2)

    def override(self, **arrays) -> "LeverageContext":
        """Replace leverage/cost arrays; detaches the off-pool model."""
        return replace(self, model=None, **arrays)

    def propensities(self, lam: float, floor: float = PROPENSITY_FLOOR):
        return kernels.closed_form(self.g1, self.g2, self.c1, self.c2, self.eg2, self.ec2,
                                   float(lam), floor)

    def totals(self, lam: float, floor: float = PROPENSITY_FLOOR):
        return kernels.totals(self.g1, self.g2, self.c1, self.c2, self.eg2, self.ec2,
                              self.weights, float(lam), floor)

    def cost_at(self, lam: float) -> float:
        sw, sc, _, _ = self.totals(lam)
        return self.c0 + sc / sw

    def variance_of(self, p1, p2):
        """Weighted mean and standard error of ``g1/p1 + g2/(p1 p2)``."""
        v = self.g1 / p1 + self.g2 / (p1 * p2)
        w = self.weights / self.weights.sum()
        m = float(np.sum(w * v))
        n_eff = 1.0 / float(np.sum(w**2))
        sd = math.sqrt(max(float(np.sum(w * (v - m) ** 2)), 0.0))
        return m, sd / math.sqrt(n_eff)

    def cost_of(self, p1, p2) -> float:
        return self.c0 + self.mean(p1 * self.c1 + p1 * p2 * self.c2)


def build_context(model, c0: float, x_C, x_t, x_M, weights=None) -> LeverageContext:
    x_C = np.asarray(x_C, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    x_M = np.asarray(x_M, dtype=float)
    n = x_t.shape[0]
    if n == 0:
        raise InsufficientPoolError("point pool is empty")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return LeverageContext(
        c0=float(c0),
        g1=model.g1(x_C, x_t), g2=model.g2(x_C, x_t, x_M),
        c1=model.c1(x_C, x_t), c2=model.c2(x_C, x_t, x_M),
        eg2=model.cond_g2(x_C, x_t), ec2=model.cond_c2(x_C, x_t),
        g1_bd=model.g1_backdoor(x_C, x_t), weights=weights,
        model=model, points=(x_C, x_t, x_M),
    )


def context_from_dataset(data: CoarsenedDataset, policy: PropensityPolicy, costs: CostSpec,
                         pool_size: int = DEFAULT_POOL_SIZE, seed=0, fit=None,
                         g2_method: str = "pool", var_r_given_t=None) -> LeverageContext:
    """Pilot-data context: records with ``x_M`` observed, reweighted by ``1 / pi1``.

    The pilot policy's selection is undone by the weights; the residual pool
    is the set of fitted mediator residuals.
    """
    fit = fit_all(data, policy) if fit is None else fit
    model = LeverageModel(fit.nuisance, costs, fit.mediator.eps_M, pool_size=pool_size,
                          seed=seed, g2_method=g2_method, var_r_given_t=var_r_given_t)
    has_M = data.has_M
    return build_context(model, costs.c0, data.x_C[has_M], data.x_t[has_M], data.x_M,
                         weights=fit.mediator.weights)


def context_from_model(fdm: FrontDoorModel, mc_n: int = 20_000, seed=0,
                       pool_size: int = DEFAULT_POOL_SIZE, g2_method: str = "pool") -> LeverageContext:
    """Simulation-mode context with population nuisance values and fresh draws."""
    ss = np.random.SeedSequence(seed)
    s_pool, s_eps, s_sub = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    nuisance = NuisanceEstimates.from_model(fdm.blocks, fdm.errors)
    eps_M = fdm.errors.M.sample(np.random.default_rng(s_eps), max(pool_size, 1))
    model = LeverageModel(nuisance, fdm.costs, eps_M, pool_size=pool_size, seed=s_sub,
                          g2_method=g2_method)
    full = fdm.sample(mc_n, s_pool)
    return build_context(model, fdm.costs.c0, full.x_C, full.x_t, full.x_M)


def constant_context(g1: float, g2: float, c1: float, c2: float, c0: float,
                     g1_bd: Optional[float] = None, n: int = 1) -> LeverageContext:
    """Pool of ``n`` identical points with constant leverages and costs."""
    model = ConstantLeverage(g1, g2, c1, c2, g1_bd)
    z = np.zeros(n)
    return build_context(model, c0, z[:, None], z, z[:, None])


# ---------------------------------------------------------------------------
# conditional means, variance, policies


def conditional_g2_mean(x_Ct, ctx: LeverageContext, method: Optional[str] = None) -> np.ndarray:
    if ctx.model is None:
        raise InsufficientPoolError("context has no leverage model for off-pool evaluation")
    x = np.atleast_2d(np.asarray(x_Ct, dtype=float))
    return ctx.model.cond_g2(x[:, :-1], x[:, -1], method)


def conditional_c2_mean(x_Ct, ctx: LeverageContext) -> np.ndarray:
    if ctx.model is None:
        raise InsufficientPoolError("context has no leverage model for off-pool evaluation")
    x = np.atleast_2d(np.asarray(x_Ct, dtype=float))
    return ctx.model.cond_c2(x[:, :-1], x[:, -1])


class ClosedFormPolicy(PropensityPolicy):
    """Optimal propensities for a fixed multiplier ``lam``.

    With ``single_stage`` set, ``pi1`` is the back-door rule built from
    ``g1_backdoor`` and ``pi2`` is identically one.
    """

    def __init__(self, lam: float, model=None, floor: float = PROPENSITY_FLOOR,
                 single_stage: bool = False, pool_values=None):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        self.lam = float(lam)
        self.model = model
        self.floor = floor
        self.single_stage = single_stage
        self._pool_values = pool_values

    def _need_model(self):
        if self.model is None:
            raise InsufficientPoolError("policy was built from raw pool arrays; only on_pool() is available")

    def _inputs(self, x_C, x_t, x_M=None):
        m = self.model
        n = np.shape(x_t)[0]
        zero = np.zeros(n)
        if self.single_stage:
            return m.g1_backdoor(x_C, x_t), zero, m.c1(x_C, x_t), zero, zero, zero
        g2 = zero if x_M is None else m.g2(x_C, x_t, x_M)
        c2 = zero if x_M is None else m.c2(x_C, x_t, x_M)
        return m.g1(x_C, x_t), g2, m.c1(x_C, x_t), c2, m.cond_g2(x_C, x_t), m.cond_c2(x_C, x_t)

    def pi1(self, x_C, x_t):
        self._need_model()
        args = [np.ascontiguousarray(a, dtype=float) for a in self._inputs(x_C, x_t)]
        return kernels.closed_form(*args, self.lam, self.floor)[0]

    def pi2(self, x_C, x_t, x_M):
        if self.single_stage:
            return np.ones(np.shape(x_t)[0])
        self._need_model()
        args = [np.ascontiguousarray(a, dtype=float) for a in self._inputs(x_C, x_t, x_M)]
        return kernels.closed_form(*args, self.lam, self.floor)[1]

    def on_pool(self):
        if self._pool_values is None:
            raise ValueError("policy carries no pool evaluation")
        return self._pool_values

    def check_dims(self, dims):
        m = self.model
        if isinstance(m, LeverageModel):
            b = m.nuisance.beta_hat
            if b.beta_tC.shape[0] != dims.d_C or b.beta_Mt.shape[0] != dims.d_M:
                from .sem import ShapeError
                raise ShapeError(
                    f"policy built for d_C={b.beta_tC.shape[0]}, d_M={b.beta_Mt.shape[0]} "
                    f"but data has d_C={dims.d_C}, d_M={dims.d_M}"
                )

    def to_dict(self):
        return {
            "kind": "closed_form",
            "lambda": self.lam,
            "floor": self.floor,
            "single_stage": self.single_stage,
            "leverage": None if self.model is None else self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClosedFormPolicy":
        lev = d.get("leverage")
        model = None if lev is None else leverage_from_dict(lev)
        return cls(d["lambda"], model, floor=d.get("floor", PROPENSITY_FLOOR),
                   single_stage=d.get("single_stage", False))


def policy_from_dict(d: dict) -> PropensityPolicy:
    from .sem import TablePolicy

    kind = d["kind"]
    if kind == "constant":
        return ConstantPolicy(d["p1"], d["p2"])
    if kind == "table":
        return TablePolicy(tuple(d["edges1"]), tuple(d["values1"]), tuple(d["edges2"]),
                           tuple(d["values2"]), d.get("feature1", 0), d.get("feature2", 0))
    if kind == "closed_form":
        return ClosedFormPolicy.from_dict(d)
    raise ValueError(f"unknown policy kind {kind!r}")


def _pool_propensities(policy: PropensityPolicy, ctx: LeverageContext):
    if isinstance(policy, ClosedFormPolicy) and policy._pool_values is not None:
        return policy._pool_values
    if isinstance(policy, ConstantPolicy):
        return (np.full(ctx.n, max(policy.p1, policy.floor)),
                np.full(ctx.n, max(policy.p2, policy.floor)))
    if ctx.points is None:
        raise InsufficientPoolError("context has no pool coordinates to evaluate this policy")
    x_C, x_t, x_M = ctx.points
    return policy.pi1(x_C, x_t), policy.pi2(x_C, x_t, x_M)


def variance_at(policy: PropensityPolicy, ctx: LeverageContext):
    """Asymptotic variance ``E[g1/pi1 + g2/(pi1 pi2)]`` over the pool; ``(value, stderr)``."""
    p1, p2 = _pool_propensities(policy, ctx)
    return ctx.variance_of(p1, p2)


def pool_cost(policy: PropensityPolicy, ctx: LeverageContext) -> float:
    p1, p2 = _pool_propensities(policy, ctx)
    return ctx.cost_of(p1, p2)


def optimal_policy(lam: float, ctx: LeverageContext, floor: float = PROPENSITY_FLOOR) -> ClosedFormPolicy:
    return ClosedFormPolicy(lam, ctx.model, floor=floor,
                            pool_values=ctx.propensities(lam, floor))


# ---------------------------------------------------------------------------
# budget solve


@dataclass(frozen=True)
class DesignSolution:
    lambda_star: float
    policy: PropensityPolicy
    var_inf: float
    var_se: float
    expected_cost: float
    b0: float
    boundary_fractions: dict
    relative_efficiency: float
    oversampling_percentage: float
    var_full: float
    cost_full: float
    lambda_interior: float
    n_clipped: int = 0
    warnings: tuple = ()

    def to_dict(self, include_policy: bool = True) -> dict:
        out = {
            "lambda_star": self.lambda_star,
            "lambda_interior": self.lambda_interior,
            "b0": self.b0,
            "var_inf": self.var_inf,
            "var_se": self.var_se,
            "expected_cost": self.expected_cost,
            "boundary_fractions": self.boundary_fractions,
            "relative_efficiency": self.relative_efficiency,
            "oversampling_percentage": self.oversampling_percentage,
            "var_full": self.var_full,
            "cost_full": self.cost_full,
            "n_clipped": self.n_clipped,
            "warnings": list(self.warnings),
        }
        if include_policy:
            out["policy"] = self.policy.to_dict()
            out["policy_digest"] = self.policy.digest()
        return out


def interior_lambda(ctx: LeverageContext, b0: float, single_stage: bool = False) -> float:
    """Multiplier of the all-interior solution, used to start the bracket."""
    if single_stage:
        s = ctx.mean(np.sqrt(ctx.g1_bd * ctx.c1))
    else:
        s = ctx.mean(np.sqrt(ctx.g1 * ctx.c1) + np.sqrt(ctx.g2 * ctx.c2))
    return s**2 / (b0 - ctx.c0) ** 2


def _saturation_lambda(ctx: LeverageContext) -> float:
    """Largest multiplier at which every pool point has ``pi = (1, 1)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = np.minimum(ctx.g1 / ctx.c1, np.where(ctx.c2 > 0, ctx.g2 / ctx.c2, np.inf))
        joint = np.where(ctx.g2 * ctx.c1 >= ctx.g1 * ctx.c2,
                         (ctx.g1 + ctx.eg2) / (ctx.c1 + ctx.ec2), -np.inf)
        lam_i = np.maximum(outer, joint)
        lam_i = np.where(ctx.g2 > 0, lam_i, 0.0)
    return float(np.min(lam_i))


def _bisect_lambda(cost_at, b0: float, lam0: float, max_expand: int = 200):
    """Find ``lam`` with ``cost_at(lam) == b0`` for a non-increasing ``cost_at``.

    Bisection on ``log lam`` starting from a bracket grown geometrically around
    ``lam0``. Returns ``(lam, cost, converged)``.
    """
    if not (np.isfinite(lam0) and lam0 > 0):
        lam0 = 1.0
    lo = hi = lam0
    c_lo = c_hi = cost_at(lam0)
    for _ in range(max_expand):
        if c_lo >= b0:
            break
        lo /= 4.0
        c_lo = cost_at(lo)
    else:
        return lo, c_lo, False
    for _ in range(max_expand):
        if c_hi <= b0:
            break
        hi *= 4.0
        c_hi = cost_at(hi)
    else:
        return hi, c_hi, False
    for _ in range(200):
        if hi / lo - 1.0 < 1e-14:
            break
        mid = math.sqrt(lo * hi)
        c_mid = cost_at(mid)
        if c_mid == b0:
            return mid, c_mid, True
        if c_mid > b0:
            lo, c_lo = mid, c_mid
        else:
            hi, c_hi = mid, c_mid
    if abs(c_lo - b0) <= abs(c_hi - b0):
        return lo, c_lo, True
    return hi, c_hi, True


def _solution(ctx, lam, policy, p1, p2, b0, tol, lam_int, notes, var_full) -> DesignSolution:
    var, se = ctx.variance_of(p1, p2)
    cost = ctx.cost_of(p1, p2)
    c_full = ctx.cost_full
    if abs(cost - b0) > tol * b0 and not any("slack" in s for s in notes):
        msg = f"budget identity violated: expected cost {cost:.6g} vs b0 {b0:.6g}"
        warnings.warn(msg, BudgetSlackWarning, stacklevel=3)
        notes = notes + (msg,)
    floor = getattr(policy, "floor", PROPENSITY_FLOOR)
    return DesignSolution(
        lambda_star=float(lam), policy=policy, var_inf=var, var_se=se,
        expected_cost=cost, b0=float(b0),
        boundary_fractions={"pi1": float(np.mean(p1 >= 1.0)), "pi2": float(np.mean(p2 >= 1.0))},
        relative_efficiency=var * b0 / (var_full * c_full),
        oversampling_percentage=100.0 * c_full / b0,
        var_full=var_full, cost_full=c_full, lambda_interior=float(lam_int),
        n_clipped=int(np.sum(p1 <= floor) + np.sum(p2 <= floor)),
        warnings=notes,
    )


def solve_budget(ctx: LeverageContext, b0: float, tol: float = 1e-3,
                 floor: float = PROPENSITY_FLOOR) -> DesignSolution:
    """Optimal two-stage design spending ``b0`` per unit in expectation."""
    if not b0 > ctx.c0:
        raise InfeasibleBudgetError(f"budget {b0} does not exceed the base cost c0 = {ctx.c0}")
    ones = np.ones(ctx.n)
    var_full = ctx.variance_of(ones, ones)[0]
    c_full = ctx.cost_full
    if b0 >= c_full * (1.0 - 1e-12):
        notes = ()
        if b0 > c_full * (1.0 + tol):
            msg = f"budget slack: b0 {b0:.6g} exceeds the full-sampling cost {c_full:.6g}"
            warnings.warn(msg, BudgetSlackWarning, stacklevel=2)
            notes = (msg,)
        lam_sat = _saturation_lambda(ctx)
        lam = lam_sat if lam_sat > 0 else float("nan")
        policy = ConstantPolicy(1.0, 1.0)
        return _solution(ctx, lam, policy, ones, ones, min(b0, c_full) if notes else b0,
                         tol, lam, notes, var_full)
    lam_int = interior_lambda(ctx, b0)
    lam, cost, ok = _bisect_lambda(lambda l: ctx.cost_at(l), b0, lam_int)
    notes = ()
    if not ok:
        msg = f"budget slack: no multiplier attains b0 {b0:.6g}; closest cost {cost:.6g}"
        warnings.warn(msg, BudgetSlackWarning, stacklevel=2)
        notes = (msg,)
    policy = optimal_policy(lam, ctx, floor)
    p1, p2 = policy.on_pool()
    return _solution(ctx, lam, policy, p1, p2, b0, tol, lam_int, notes, var_full)


def backdoor_solve(ctx: LeverageContext, b0: float, tol: float = 1e-3, form: str = "sqrt",
                   floor: float = PROPENSITY_FLOOR) -> DesignSolution:
    """Single-stage design for ``beta_Mt`` (the back-door sub-problem).

    ``form="sqrt"`` uses ``pi = min(1, sqrt(g / (lam c1)))``. ``form="printed"``
    uses the alternative reading ``pi = min(1, E[g / (lam c1)])``, a constant
    propensity.
    """
    if form not in ("sqrt", "printed"):
        raise ValueError("form must be 'sqrt' or 'printed'")
    if not b0 > ctx.c0:
        raise InfeasibleBudgetError(f"budget {b0} does not exceed the base cost c0 = {ctx.c0}")
    single = ctx.override(g1=ctx.g1_bd, g2=np.zeros(ctx.n), c2=np.zeros(ctx.n),
                          eg2=np.zeros(ctx.n), ec2=np.zeros(ctx.n))
    ones = np.ones(ctx.n)
    var_full = single.variance_of(ones, ones)[0]
    c_full = single.cost_full
    lam_int = interior_lambda(ctx, b0, single_stage=True)
    if b0 >= c_full * (1.0 - 1e-12):
        notes = ()
        if b0 > c_full * (1.0 + tol):
            msg = f"budget slack: b0 {b0:.6g} exceeds the full-sampling cost {c_full:.6g}"
            warnings.warn(msg, BudgetSlackWarning, stacklevel=2)
            notes = (msg,)
        lam = float(np.min(single.g1 / single.c1))
        return _solution(single, lam if lam > 0 else float("nan"), ConstantPolicy(1.0, 1.0), ones,
                         ones, min(b0, c_full), tol, lam_int, notes, var_full)
    if form == "printed":
        p = min(1.0, (b0 - ctx.c0) / single.mean(single.c1))
        lam = single.mean(single.g1 / single.c1) / p
        p1 = np.full(ctx.n, max(p, floor))
        policy = ConstantPolicy(float(p1[0]), 1.0)
        return _solution(single, lam, policy, p1, ones, b0, tol, lam_int, (), var_full)
    lam, cost, ok = _bisect_lambda(lambda l: single.cost_at(l), b0, lam_int)
    p1 = single.propensities(lam, floor)[0]
    policy = ClosedFormPolicy(lam, ctx.model, floor=floor, single_stage=True,
                              pool_values=(p1, ones))
    notes = () if ok else (f"budget slack: closest cost {cost:.6g}",)
    return _solution(single, lam, policy, p1, ones, b0, tol, lam_int, notes, var_full)


@dataclass(frozen=True)
class EfficiencyReport:
    relative_efficiency: float
    oversampling_percentage: float
    b0: float
    solution: DesignSolution


def relative_efficiency_report(ctx: LeverageContext, b0_ratio: float, tol: float = 1e-3) -> EfficiencyReport:
    """Optimized vs full sampling at equal total budget.

    The design spends ``b0 = b0_ratio * c_full`` per unit and therefore affords
    ``1 / b0_ratio`` times as many units. The ratio is
    ``var_opt / (var_full / b0_ratio)``; values below one favour the design.
    A large base cost ``c0`` can push it above one.
    """
    if not 0 < b0_ratio <= 1:
        raise ValueError("b0_ratio must lie in (0, 1]")
    b0 = b0_ratio * ctx.cost_full
    sol = solve_budget(ctx, b0, tol)
    return EfficiencyReport(sol.var_inf * b0_ratio / sol.var_full, 100.0 / b0_ratio, b0, sol)


def design_digest(sol: DesignSolution) -> str:
    return _digest(sol.to_dict())


__all__ = [
    "BudgetSlackWarning", "ClosedFormPolicy", "ConstantLeverage", "DesignSolution",
    "EfficiencyReport", "InfeasibleBudgetError", "InsufficientPoolError", "LeverageContext",
    "LeverageModel", "backdoor_solve", "build_context", "conditional_c2_mean",
    "conditional_g2_mean", "constant_context", "context_from_dataset", "context_from_model",
    "interior_lambda", "leverage_g1", "leverage_g2", "optimal_policy", "policy_from_dict",
    "relative_efficiency_report", "solve_budget", "variance_at",
]
