"""Linear front-door structural equation model, sampling, coarsening and costs.

Variables are ordered ``(x_C, x_t, x_M, x_r)``. Data is generated by forward
substitution in causal order, which is the same as ``X = (I - beta)^{-1} eps``
for the block lower-triangular ``beta`` used here.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

#: Lower bound applied to every propensity output.
PROPENSITY_FLOOR = 1e-3


class ShapeError(ValueError):
    """Block dimensions do not match the declared :class:`Dims`."""


class PolicyRangeError(ValueError):
    """A propensity function returned a value outside (0, 1]."""


class ConfigError(ValueError):
    """Invalid model specification (non-PD covariance, bad family, ...)."""


class Stage(enum.IntEnum):
    """Coarsening level. ``FULL`` plays the role of an infinite stage index."""

    ONE = 1
    TWO = 2
    FULL = 3

    @property
    def token(self) -> str:
        return "inf" if self is Stage.FULL else str(int(self))

    @classmethod
    def from_token(cls, tok: str) -> "Stage":
        tok = tok.strip().lower()
        if tok in ("inf", "infinity", "∞"):
            return cls.FULL
        if tok in ("1", "2"):
            return cls(int(tok))
        raise ValueError(f"unknown stage token {tok!r}")


@dataclass(frozen=True)
class Dims:
    d_C: int
    d_M: int

    def __post_init__(self):
        if int(self.d_C) < 1 or int(self.d_M) < 1:
            raise ShapeError(f"d_C and d_M must be >= 1, got {self.d_C}, {self.d_M}")

    @property
    def d(self) -> int:
        return self.d_C + 1 + self.d_M + 1

    @property
    def d_Ct(self) -> int:
        return self.d_C + 1

    @property
    def d_CtM(self) -> int:
        return self.d_C + 1 + self.d_M


def _vec(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BlockMatrix:
    """Non-zero blocks of the structural coefficient matrix."""

    beta_tC: np.ndarray
    beta_MC: np.ndarray
    beta_Mt: np.ndarray
    beta_rC: np.ndarray
    beta_rM: np.ndarray

    def __post_init__(self):
        for name in ("beta_tC", "beta_MC", "beta_Mt", "beta_rC", "beta_rM"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        if self.beta_MC.ndim != 2:
            raise ShapeError("beta_MC must be a matrix")
        for name in ("beta_tC", "beta_Mt", "beta_rC", "beta_rM"):
            if getattr(self, name).ndim != 1:
                raise ShapeError(f"{name} must be a vector")

    @property
    def dims(self) -> Dims:
        return Dims(self.beta_tC.shape[0], self.beta_Mt.shape[0])

    def check(self, dims: Dims) -> None:
        expected = {
            "beta_tC": (dims.d_C,),
            "beta_MC": (dims.d_M, dims.d_C),
            "beta_Mt": (dims.d_M,),
            "beta_rC": (dims.d_C,),
            "beta_rM": (dims.d_M,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")

    def replace(self, **changes) -> "BlockMatrix":
        kw = {k: getattr(self, k) for k in ("beta_tC", "beta_MC", "beta_Mt", "beta_rC", "beta_rM")}
        kw.update(changes)
        return BlockMatrix(**kw)

    def to_dict(self) -> dict:
        return {
            "tC": self.beta_tC.tolist(),
            "MC": self.beta_MC.tolist(),
            "Mt": self.beta_Mt.tolist(),
            "rC": self.beta_rC.tolist(),
            "rM": self.beta_rM.tolist(),
        }


def assemble_beta(blocks: BlockMatrix, dims: Optional[Dims] = None) -> np.ndarray:
    """Place the five blocks into the full ``d x d`` coefficient matrix."""
    dims = blocks.dims if dims is None else dims
    blocks.check(dims)
    dC, dM = dims.d_C, dims.d_M
    it, iM, ir = dC, dC + 1, dC + 1 + dM
    beta = np.zeros((dims.d, dims.d))
    beta[it, :dC] = blocks.beta_tC
    beta[iM:ir, :dC] = blocks.beta_MC
    beta[iM:ir, it] = blocks.beta_Mt
    beta[ir, :dC] = blocks.beta_rC
    beta[ir, iM:ir] = blocks.beta_rM
    return beta


def causal_effect(blocks: BlockMatrix) -> float:
    """Total effect of ``x_t`` on ``x_r``: the sum over mediating paths.

    Path products are summed with ``math.fsum`` so the result is correctly
    rounded.
    """
    return math.fsum(blocks.beta_rM * blocks.beta_Mt)


# ---------------------------------------------------------------------------
# noise


def _check_spd(name: str, m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12):
        raise ConfigError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{name} is not positive definite") from None


@dataclass(frozen=True)
class NoiseBlock:
    """One independent noise component: Gaussian or multivariate t.

    ``matrix`` is the covariance for Gaussian blocks. For t blocks it is the
    scale matrix unless ``matrix_is_covariance`` is set, in which case the
    scale is rescaled so that the covariance equals ``matrix``.
    """

    family: str
    matrix: np.ndarray
    df: Optional[float] = None
    matrix_is_covariance: bool = False
    name: str = "noise"

    def __post_init__(self):
        object.__setattr__(self, "matrix", _vec(np.atleast_2d(self.matrix)))
        if self.family not in ("gaussian", "t"):
            raise ConfigError(f"{self.name}: unknown family {self.family!r}")
        if self.family == "t":
            if self.df is None or self.df <= 2:
                raise ConfigError(f"{self.name}: t family needs df > 2 for finite variance")
        _check_spd(self.name, self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        if self.family == "gaussian" or self.matrix_is_covariance:
            return np.array(self.matrix)
        return self.matrix * (self.df / (self.df - 2.0))

    @property
    def scale(self) -> np.ndarray:
        if self.family == "t" and self.matrix_is_covariance:
            return self.matrix * ((self.df - 2.0) / self.df)
        return np.array(self.matrix)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.scale)
        z = rng.standard_normal((n, self.dim)) @ chol.T
        if self.family == "t":
            w = rng.chisquare(self.df, size=n)
            z = z / np.sqrt(w / self.df)[:, None]
        return z

    def to_dict(self) -> dict:
        out = {"family": self.family, "matrix": self.matrix.tolist()}
        if self.df is not None:
            out["df"] = self.df
        if self.matrix_is_covariance:
            out["matrix_is_covariance"] = True
        return out


@dataclass(frozen=True)
class ErrorModel:
    """Factorised noise: independent ``eps_C``, ``(eps_t, eps_r)`` and ``eps_M``."""

    C: NoiseBlock
    tr: NoiseBlock
    M: NoiseBlock

    def __post_init__(self):
        if self.tr.dim != 2:
            raise ConfigError("the (t, r) noise block must be bivariate")
        if self.var_r_given_t <= 0:
            raise ConfigError("Var(eps_r | eps_t) must be positive")

    @property
    def Sigma_C(self) -> np.ndarray:
        return self.C.covariance

    @property
    def Sigma_M(self) -> np.ndarray:
        return self.M.covariance

    @property
    def var_t(self) -> float:
        return float(self.tr.covariance[0, 0])

    @property
    def var_r(self) -> float:
        return float(self.tr.covariance[1, 1])

    @property
    def cov_tr(self) -> float:
        return float(self.tr.covariance[0, 1])

    @property
    def gamma0(self) -> float:
        return self.cov_tr / self.var_t

    @property
    def var_r_given_t(self) -> float:
        return self.var_r - self.cov_tr**2 / self.var_t

    def covariance(self) -> np.ndarray:
        """Full ``Var(eps)`` in variable order (C, t, M, r)."""
        dC, dM = self.C.dim, self.M.dim
        d = dC + dM + 2
        it, ir = dC, d - 1
        V = np.zeros((d, d))
        V[:dC, :dC] = self.Sigma_C
        V[dC + 1:ir, dC + 1:ir] = self.Sigma_M
        tr = self.tr.covariance
        V[it, it], V[ir, ir] = tr[0, 0], tr[1, 1]
        V[it, ir] = V[ir, it] = tr[0, 1]
        return V

    def sample(self, rng: np.random.Generator, n: int):
        # fixed draw order keeps streams reproducible across model variants
        eC = self.C.sample(rng, n)
        etr = self.tr.sample(rng, n)
        eM = self.M.sample(rng, n)
        return eC, etr[:, 0], eM, etr[:, 1]

    def to_dict(self) -> dict:
        return {"C": self.C.to_dict(), "tr": self.tr.to_dict(), "M": self.M.to_dict()}


def analytic_covariance(blocks: BlockMatrix, errors: ErrorModel) -> np.ndarray:
    """``(I - beta)^{-1} Var(eps) (I - beta)^{-T}``."""
    beta = assemble_beta(blocks)
    A = np.linalg.inv(np.eye(beta.shape[0]) - beta)
    return A @ errors.covariance() @ A.T


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class FullDataset:
    x_C: np.ndarray
    x_t: np.ndarray
    x_M: np.ndarray
    x_r: np.ndarray

    def __post_init__(self):
        n = self.x_t.shape[0]
        if not (self.x_C.shape[0] == self.x_M.shape[0] == self.x_r.shape[0] == n):
            raise ShapeError("all components must have the same number of records")

    @property
    def n(self) -> int:
        return self.x_t.shape[0]

    @property
    def dims(self) -> Dims:
        return Dims(self.x_C.shape[1], self.x_M.shape[1])

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.x_C, self.x_t, self.x_M, self.x_r])

    def as_coarsened(self) -> "CoarsenedDataset":
        return CoarsenedDataset(
            stage=np.full(self.n, int(Stage.FULL), dtype=np.int8),
            x_C=self.x_C, x_t=self.x_t, x_M=self.x_M, x_r=self.x_r,
        )


@dataclass(frozen=True)
class CoarsenedRecord:
    stage: Stage
    x_C: np.ndarray
    x_t: float
    x_M: Optional[np.ndarray] = None
    x_r: Optional[float] = None

    def __post_init__(self):
        if (self.x_M is not None) != (self.stage >= Stage.TWO):
            raise ValueError(f"x_M presence does not match stage {self.stage.token}")
        if (self.x_r is not None) != (self.stage == Stage.FULL):
            raise ValueError(f"x_r presence does not match stage {self.stage.token}")

    @property
    def x_Ct(self) -> np.ndarray:
        return np.append(self.x_C, self.x_t)


@dataclass(frozen=True)
class CoarsenedDataset:
    """Staged observations.

    ``x_M`` only holds rows for records with ``stage >= 2`` and ``x_r`` only
    rows with ``stage == FULL``, both in record order. Unobserved values are
    therefore absent rather than encoded as NaN.
    """

    stage: np.ndarray
    x_C: np.ndarray
    x_t: np.ndarray
    x_M: np.ndarray
    x_r: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        stage = np.asarray(self.stage, dtype=np.int8)
        object.__setattr__(self, "stage", stage)
        if not np.isin(stage, (1, 2, 3)).all():
            raise ValueError("stage codes must be 1, 2 or 3 (FULL)")
        n = stage.shape[0]
        if self.x_C.shape[0] != n or self.x_t.shape[0] != n:
            raise ShapeError("x_C and x_t must cover every record")
        if self.x_M.shape[0] != int((stage >= 2).sum()):
            raise ShapeError("x_M rows must match the number of stage >= 2 records")
        if self.x_r.shape[0] != int((stage == 3).sum()):
            raise ShapeError("x_r rows must match the number of FULL records")

    @property
    def n(self) -> int:
        return self.stage.shape[0]

    @property
    def dims(self) -> Dims:
        return Dims(self.x_C.shape[1], self.x_M.shape[1])

    @property
    def has_M(self) -> np.ndarray:
        return self.stage >= 2

    @property
    def is_full(self) -> np.ndarray:
        return self.stage == 3

    def counts(self) -> dict:
        return {s.token: int((self.stage == int(s)).sum()) for s in Stage}

    def full_within_M(self) -> np.ndarray:
        """Mask over the ``x_M`` rows selecting the FULL records."""
        return self.stage[self.has_M] == 3

    def records(self) -> Iterator[CoarsenedRecord]:
        iM = ir = 0
        for i in range(self.n):
            s = Stage(int(self.stage[i]))
            xM = xr = None
            if s >= Stage.TWO:
                xM = self.x_M[iM]
                iM += 1
            if s == Stage.FULL:
                xr = float(self.x_r[ir])
                ir += 1
            yield CoarsenedRecord(s, self.x_C[i], float(self.x_t[i]), xM, xr)

    def subset(self, mask: np.ndarray) -> "CoarsenedDataset":
        mask = np.asarray(mask, dtype=bool)
        return CoarsenedDataset(
            stage=self.stage[mask],
            x_C=self.x_C[mask],
            x_t=self.x_t[mask],
            x_M=self.x_M[mask[self.has_M]],
            x_r=self.x_r[mask[self.is_full]],
        )

    def permute(self, order: np.ndarray) -> "CoarsenedDataset":
        order = np.asarray(order)
        # scatter compact arrays to record positions, reorder, compact again
        M = np.full((self.n, self.x_M.shape[1]), np.nan)
        M[self.has_M] = self.x_M
        r = np.full(self.n, np.nan)
        r[self.is_full] = self.x_r
        st = self.stage[order]
        return CoarsenedDataset(
            stage=st, x_C=self.x_C[order], x_t=self.x_t[order],
            x_M=M[order][st >= 2], x_r=r[order][st == 3],
        )


# ---------------------------------------------------------------------------
# sampling


def _simulate(blocks, errors, n, seed, quad=None) -> FullDataset:
    blocks.check(Dims(errors.C.dim, errors.M.dim))
    rng = np.random.default_rng(seed)
    eC, et, eM, er = errors.sample(rng, int(n))
    x_C = eC
    x_t = x_C @ blocks.beta_tC + et
    if quad is None:
        x_M = np.outer(x_t, blocks.beta_Mt) + x_C @ blocks.beta_MC.T + eM
    else:
        x_M = np.outer(x_t, quad.linear_coeffs) + x_C @ blocks.beta_MC.T + eM
        if np.any(quad.quadratic_coeffs != 0):
            x_M = x_M + np.outer(x_t**2, quad.quadratic_coeffs)
    x_r = x_C @ blocks.beta_rC + x_M @ blocks.beta_rM + er
    return FullDataset(x_C, x_t, x_M, x_r)


def sample_full(blocks: BlockMatrix, errors: ErrorModel, n: int, seed=None) -> FullDataset:
    """Draw ``n`` i.i.d. full records from the linear front-door model."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return _simulate(blocks, errors, n, seed)


@dataclass(frozen=True)
class QuadraticMediatorSpec:
    """Mediator equation ``x_M = lin * x_t + quad * x_t**2 + beta_MC x_C + eps_M``."""

    linear_coeffs: np.ndarray
    quadratic_coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear_coeffs", _vec(self.linear_coeffs))
        object.__setattr__(self, "quadratic_coeffs", _vec(self.quadratic_coeffs))
        if self.linear_coeffs.shape != self.quadratic_coeffs.shape:
            raise ShapeError("linear and quadratic coefficient vectors differ in length")

    def effect_at(self, beta_rM, x_t) -> np.ndarray:
        """Derivative of ``E[x_r | do(x_t)]`` at the treatment levels ``x_t``."""
        x_t = np.asarray(x_t, dtype=float)
        slope = self.linear_coeffs[None, :] + 2.0 * np.outer(x_t, self.quadratic_coeffs)
        return slope @ np.asarray(beta_rM)

    def to_dict(self) -> dict:
        return {"linear": self.linear_coeffs.tolist(), "quadratic": self.quadratic_coeffs.tolist()}


def sample_full_quadratic(blocks: BlockMatrix, quad: QuadraticMediatorSpec,
                          errors: ErrorModel, n: int, seed=None) -> FullDataset:
    if n < 0:
        raise ValueError("n must be non-negative")
    if quad.linear_coeffs.shape != blocks.beta_Mt.shape:
        raise ShapeError("quadratic mediator spec does not match d_M")
    return _simulate(blocks, errors, n, seed, quad=quad)


# ---------------------------------------------------------------------------
# propensities


def clip_propensity(p, floor: float = PROPENSITY_FLOOR):
    """Clip to ``[floor, 1]``; returns the clipped array and the clip count."""
    p = np.asarray(p, dtype=float)
    low = p < floor
    return np.where(low, floor, np.minimum(p, 1.0)), int(low.sum())


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class PropensityPolicy:
    """Stage-wise sampling probabilities.

    Subclasses implement vectorised ``pi1(x_C, x_t)`` and
    ``pi2(x_C, x_t, x_M)`` returning arrays in ``(0, 1]``.
    """

    floor: float = PROPENSITY_FLOOR

    def pi1(self, x_C, x_t) -> np.ndarray:
        raise NotImplementedError

    def pi2(self, x_C, x_t, x_M) -> np.ndarray:
        raise NotImplementedError

    def check_dims(self, dims: Dims) -> None:
        pass

    def to_dict(self) -> dict:
        raise NotImplementedError

    def digest(self) -> str:
        return _digest(self.to_dict())


@dataclass(frozen=True)
class ConstantPolicy(PropensityPolicy):
    p1: float = 1.0
    p2: float = 1.0
    floor: float = PROPENSITY_FLOOR

    def __post_init__(self):
        for p in (self.p1, self.p2):
            if not 0.0 < p <= 1.0:
                raise PolicyRangeError(f"constant propensity {p} outside (0, 1]")

    def pi1(self, x_C, x_t):
        return np.full(np.shape(x_t)[0], max(self.p1, self.floor))

    def pi2(self, x_C, x_t, x_M):
        return np.full(np.shape(x_t)[0], max(self.p2, self.floor))

    @property
    def is_full(self) -> bool:
        return self.p1 == 1.0 and self.p2 == 1.0

    def to_dict(self):
        return {"kind": "constant", "p1": float(self.p1), "p2": float(self.p2)}


@dataclass(frozen=True)
class TablePolicy(PropensityPolicy):
    """Piecewise-constant lookup on one coordinate per stage.

    ``feature1`` indexes ``x_Ct`` and ``feature2`` indexes ``x_CtM``. ``values``
    has ``len(edges) + 1`` entries (bins are right-open as in ``np.digitize``).
    """

    edges1: tuple
    values1: tuple
    edges2: tuple
    values2: tuple
    feature1: int = 0
    feature2: int = 0
    floor: float = PROPENSITY_FLOOR

    def __post_init__(self):
        for e, v in ((self.edges1, self.values1), (self.edges2, self.values2)):
            if len(v) != len(e) + 1:
                raise ValueError("values must have one more entry than edges")
            if np.any(np.diff(e) <= 0):
                raise ValueError("edges must be strictly increasing")
            if any(not 0.0 < p <= 1.0 for p in v):
                raise PolicyRangeError("table propensities must lie in (0, 1]")

    def check_dims(self, dims):
        if not 0 <= self.feature1 < dims.d_Ct or not 0 <= self.feature2 < dims.d_CtM:
            raise ShapeError("table policy feature index out of range for these dims")

    def pi1(self, x_C, x_t):
        z = np.column_stack([x_C, x_t])[:, self.feature1]
        return clip_propensity(np.asarray(self.values1)[np.digitize(z, self.edges1)], self.floor)[0]

    def pi2(self, x_C, x_t, x_M):
        z = np.column_stack([x_C, x_t, x_M])[:, self.feature2]
        return clip_propensity(np.asarray(self.values2)[np.digitize(z, self.edges2)], self.floor)[0]

    def to_dict(self):
        return {
            "kind": "table",
            "edges1": list(map(float, self.edges1)), "values1": list(map(float, self.values1)),
            "edges2": list(map(float, self.edges2)), "values2": list(map(float, self.values2)),
            "feature1": self.feature1, "feature2": self.feature2,
        }


@dataclass(frozen=True)
class FunctionPolicy(PropensityPolicy):
    """Wraps user callables; outputs are validated, not clipped."""

    f1: Callable
    f2: Callable
    label: str = "function"

    def pi1(self, x_C, x_t):
        return np.asarray(self.f1(x_C, x_t), dtype=float)

    def pi2(self, x_C, x_t, x_M):
        return np.asarray(self.f2(x_C, x_t, x_M), dtype=float)

    def to_dict(self):
        return {"kind": "function", "label": self.label}


def _check_range(p: np.ndarray, which: str) -> None:
    bad = ~((p > 0) & (p <= 1))
    if bad.any():
        raise PolicyRangeError(
            f"{which} returned {int(bad.sum())} value(s) outside (0, 1], e.g. {p[bad][0]!r}"
        )


def coarsen(full: FullDataset, policy: PropensityPolicy, seed=None) -> CoarsenedDataset:
    """Apply the two-stage measurement mechanism to full records.

    One uniform ``u`` per record: ``u >= pi1`` gives stage 1,
    ``u < pi1 * pi2`` gives FULL and anything in between stage 2.
    """
    policy.check_dims(full.dims)
    rng = np.random.default_rng(seed)
    u = rng.random(full.n)
    p1 = policy.pi1(full.x_C, full.x_t)
    p2 = policy.pi2(full.x_C, full.x_t, full.x_M)
    _check_range(p1, "pi1")
    _check_range(p2, "pi2")
    stage = np.where(u >= p1, 1, np.where(u < p1 * p2, 3, 2)).astype(np.int8)
    n_clipped = int(np.sum(p1 <= policy.floor) + np.sum(p2 <= policy.floor))
    return CoarsenedDataset(
        stage=stage, x_C=full.x_C, x_t=full.x_t,
        x_M=full.x_M[stage >= 2], x_r=full.x_r[stage == 3], n_clipped=n_clipped,
    )


# ---------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class CostFunction:
    """``constant``: ``a``; ``norm``: ``a * ||x||_2`` of its input vector."""

    kind: str
    a: float

    def __post_init__(self):
        if self.kind not in ("constant", "norm"):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if not self.a > 0:
            raise ConfigError("cost scale must be positive")

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            return np.full(x.shape[0], float(self.a))
        return self.a * np.sqrt(np.einsum("ij,ij->i", x, x))

    def to_dict(self):
        return {"kind": self.kind, "a": float(self.a)}


@dataclass(frozen=True)
class CostSpec:
    c0: float
    c1: CostFunction
    c2: CostFunction

    def __post_init__(self):
        if not self.c0 > 0:
            raise ConfigError("c0 must be positive")

    def to_dict(self):
        return {"c0": float(self.c0), "c1": self.c1.to_dict(), "c2": self.c2.to_dict()}


def realized_cost(record: CoarsenedRecord, costs: CostSpec) -> float:
    cost = costs.c0
    if record.stage >= Stage.TWO:
        cost += float(costs.c1(record.x_Ct)[0])
    if record.stage == Stage.FULL:
        cost += float(costs.c2(np.concatenate([record.x_Ct, record.x_M]))[0])
    return cost


def realized_costs(data: CoarsenedDataset, costs: CostSpec) -> np.ndarray:
    """Vectorised :func:`realized_cost` over all records."""
    out = np.full(data.n, float(costs.c0))
    has_M = data.has_M
    xCt = np.column_stack([data.x_C, data.x_t])
    out[has_M] += costs.c1(xCt[has_M])
    full_rows = np.flatnonzero(data.is_full)
    if full_rows.size:
        xCtM = np.column_stack([xCt[has_M], data.x_M])[data.full_within_M()]
        out[full_rows] += costs.c2(xCtM)
    return out


def expected_cost(blocks: BlockMatrix, errors: ErrorModel, policy: PropensityPolicy,
                  costs: CostSpec, mc_n: int = 100_000, seed=None):
    """Monte Carlo ``E[c0 + pi1 c1 + pi1 pi2 c2]``; returns ``(mean, stderr)``.

    Constant policies with constant costs are evaluated exactly.
    """
    if mc_n < 1:
        raise ValueError("mc_n must be >= 1")
    if isinstance(policy, ConstantPolicy) and costs.c1.is_constant and costs.c2.is_constant:
        p1, p2 = max(policy.p1, policy.floor), max(policy.p2, policy.floor)
        return costs.c0 + p1 * costs.c1.a + p1 * p2 * costs.c2.a, 0.0
    full = sample_full(blocks, errors, mc_n, seed)
    xCt = np.column_stack([full.x_C, full.x_t])
    p1 = policy.pi1(full.x_C, full.x_t)
    p2 = policy.pi2(full.x_C, full.x_t, full.x_M)
    per = costs.c0 + p1 * costs.c1(xCt) + p1 * p2 * costs.c2(np.column_stack([xCt, full.x_M]))
    se = float(per.std(ddof=1) / np.sqrt(mc_n)) if mc_n > 1 else float("nan")
    return float(per.mean()), se


# ---------------------------------------------------------------------------
# reference model


@dataclass(frozen=True)
class FrontDoorModel:
    """Bundle of structural blocks, noise and costs, as read from a config."""

    blocks: BlockMatrix
    errors: ErrorModel
    costs: CostSpec
    quadratic: Optional[QuadraticMediatorSpec] = None
    notes: tuple = field(default=())

    def __post_init__(self):
        self.blocks.check(Dims(self.errors.C.dim, self.errors.M.dim))

    @property
    def dims(self) -> Dims:
        return self.blocks.dims

    @property
    def xi(self) -> float:
        return causal_effect(self.blocks)

    def sample(self, n: int, seed=None) -> FullDataset:
        if self.quadratic is not None:
            return sample_full_quadratic(self.blocks, self.quadratic, self.errors, n, seed)
        return sample_full(self.blocks, self.errors, n, seed)

    def replace(self, **changes) -> "FrontDoorModel":
        kw = dict(blocks=self.blocks, errors=self.errors, costs=self.costs,
                  quadratic=self.quadratic, notes=self.notes)
        kw.update(changes)
        return FrontDoorModel(**kw)

    def to_dict(self) -> dict:
        out = {
            "dims": {"d_C": self.dims.d_C, "d_M": self.dims.d_M},
            "beta": self.blocks.to_dict(),
            "errors": self.errors.to_dict(),
            "costs": self.costs.to_dict(),
        }
        if self.quadratic is not None:
            out["quadratic_mediator"] = self.quadratic.to_dict()
        return out


REFERENCE_BLOCKS = BlockMatrix(
    beta_tC=[0.5, -0.2],
    beta_MC=[[0.3, 0.1], [0.5, 0.2], [-0.1, 0.3]],
    beta_Mt=[0.7, 0.2, 0.1],
    beta_rC=[0.2, -0.1],
    beta_rM=[0.5, 0.4, -0.3],
)

# Assumed base cost for the reference model. At c0 = 1 the fixed cost leaves
# too little budget for any design to beat full sampling.
DEFAULT_C0 = 0.1

REFERENCE_QUADRATIC = QuadraticMediatorSpec(
    linear_coeffs=[0.7, 0.2, 0.1], quadratic_coeffs=[-0.1, -0.2, -0.4]
)


def reference_errors(sigma_C=None, sigma_tr=None, sigma_M=None, df: float = 5.0) -> ErrorModel:
    sigma_C = [[1.0, 0.7], [0.7, 1.5]] if sigma_C is None else sigma_C
    sigma_tr = [[1.0, -0.5], [-0.5, 1.5]] if sigma_tr is None else sigma_tr
    sigma_M = [[1.0, 0.3, 0.0], [0.3, 1.5, -0.5], [0.0, -0.5, 1.0]] if sigma_M is None else sigma_M
    return ErrorModel(
        C=NoiseBlock("t", sigma_C, df=df, name="Sigma_C"),
        tr=NoiseBlock("t", sigma_tr, df=df, name="Sigma_tr"),
        M=NoiseBlock("gaussian", sigma_M, name="Sigma_M"),
    )


def reference_costs(c0: float = DEFAULT_C0) -> CostSpec:
    return CostSpec(c0=c0, c1=CostFunction("norm", 0.1), c2=CostFunction("constant", 0.5))


def reference_model(c0: float = DEFAULT_C0) -> FrontDoorModel:
    """Simulation model with ``d_C = 2``, ``d_M = 3`` and ``xi = 0.4``.

    ``c0`` is an assumed default; see ``DEFAULT_C0``.
    """
    return FrontDoorModel(REFERENCE_BLOCKS, reference_errors(), reference_costs(c0),
                          notes=(f"c0 = {c0} (assumed default)", "t scale-matrix convention"))


def quadratic_model(c0: float = DEFAULT_C0, quad: Optional[QuadraticMediatorSpec] = None) -> FrontDoorModel:
    """Quadratic-mediator variant; the mediator equation carries no ``x_C`` term."""
    quad = REFERENCE_QUADRATIC if quad is None else quad
    blocks = REFERENCE_BLOCKS.replace(beta_MC=np.zeros((3, 2)))
    return FrontDoorModel(blocks, reference_errors(), reference_costs(c0), quadratic=quad,
                          notes=(f"c0 = {c0} (assumed default)", "t scale-matrix convention"))


def stack_Ct(x_C, x_t) -> np.ndarray:
    return np.column_stack([x_C, x_t])


def as_records(data: CoarsenedDataset) -> Sequence[CoarsenedRecord]:
    return list(data.records())
