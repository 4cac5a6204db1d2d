"""Seeded simulation experiments and brute-force oracles.

Every replication draws its seed from ``(root_seed, experiment id, cell index,
replication index)``, so tables do not depend on worker scheduling.
"""
from __future__ import annotations

import csv
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .design import (
    InfeasibleBudgetError,
    InsufficientPoolError,
    LeverageContext,
    context_from_dataset,
    relative_efficiency_report,
    solve_budget,
)
from .estimators import (
    InsufficientDataError,
    estimate_effect,
    fit_beta_M,
    fit_beta_r,
    fit_beta_tC,
    solve_checked,
    stage_weights,
    weighted_cross,
)
from .io import thread_count
from .sem import (
    CoarsenedDataset,
    ConfigError,
    ConstantPolicy,
    FrontDoorModel,
    PropensityPolicy,
    QuadraticMediatorSpec,
    coarsen,
    realized_costs,
    reference_model,
)

FULL_SCALE_SIZES = (100, 250, 500, 750, 1000, 2500, 5000, 7500)
DESK_SIZES = (100, 250, 500, 1000, 2500, 5000)
FULL_SCALE_COMPSENS_SIZES = (100, 250, 500, 1000, 2500, 5000, 7500, 10000)
MISSPEC_GRID = np.linspace(-0.1, 0.1, 10)

_FRACTIONS = (0.01, 0.05, 0.10, 0.15, 0.2, 0.25, 1 / 3, 0.5, 1, 2, 3, 4, 5, 10, 20)
SWEEP_GRIDS = {
    "beta_tC": _FRACTIONS,
    "beta_MC": _FRACTIONS,
    "beta_rC": _FRACTIONS,
    "beta_Mt": _FRACTIONS,
    "beta_rM": _FRACTIONS,
    "Sigma_C_diag": (0.6, 0.75, 1, 1.3, 1.75, 2.25, 3, 4.5, 7, 10, 15),
    "Sigma_C_offdiag": tuple(np.linspace(0.0, math.sqrt(3.0), 11)),
    "Sigma_M_diag": (0.5, 0.6, 0.8, 1.1, 1.6, 2.25, 3, 4.5, 7, 10, 15),
    "Sigma_M_offdiag": tuple(np.round(np.arange(11) * 0.2, 10)),
    "Sigma_tr_t": (0.2, 0.4, 0.7, 1, 1.5, 2.5, 5, 8, 12.5, 20),
    "Sigma_tr_r": (0.3, 0.5, 0.7, 1, 1.5, 2.5, 5, 8, 12.5, 20),
    "Sigma_tr_cov": tuple(-np.linspace(0.0, 1.2, 11)),
}

# failures that are recorded per replication instead of aborting a run
REPLICATION_ERRORS = (np.linalg.LinAlgError, InsufficientDataError, InsufficientPoolError,
                      InfeasibleBudgetError)


def replication_seed(root: int, experiment: str, cell: int, rep: int) -> int:
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(experiment.encode()), int(cell), int(rep)))
    lo, hi = ss.generate_state(2)
    return int(lo) | (int(hi) << 32)


def _pmap(fn: Callable, items: Sequence, threads: Optional[int] = None) -> list:
    threads = thread_count() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _guarded(fn: Callable):
    def run(arg):
        try:
            return fn(arg)
        except REPLICATION_ERRORS as e:
            return {"failed": f"{type(e).__name__}: {e}"}
    return run


def _mean_sd(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class ExperimentConfig:
    model: FrontDoorModel = field(default_factory=reference_model)
    sizes: tuple = DESK_SIZES
    replications: int = 20
    budget_ratio: float = 1.5
    seed: int = 0
    level: float = 0.95
    pool_size: int = 256
    threads: Optional[int] = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        sizes = tuple(int(n) for n in self.sizes)
        if not sizes or any(n <= 0 for n in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("sizes must be positive and strictly ascending")
        object.__setattr__(self, "sizes", sizes)
        if not self.budget_ratio >= 1.0:
            raise ConfigError("budget_ratio must be >= 1")

    @classmethod
    def full_scale(cls, **kw) -> "ExperimentConfig":
        kw.setdefault("sizes", FULL_SCALE_SIZES)
        kw.setdefault("replications", 50)
        return cls(**kw)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def describe(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "model_notes": list(self.model.notes),
            "sizes": list(self.sizes),
            "replications": self.replications,
            "budget_ratio": self.budget_ratio,
            "seed": self.seed,
            "level": self.level,
            "pool_size": self.pool_size,
        }


def _scale_cov(m, alpha, diag: bool, entries=None):
    m = np.array(m, dtype=float)
    if diag:
        idx = np.diag_indices_from(m)
        m[idx] = m[idx] * alpha
    else:
        mask = ~np.eye(m.shape[0], dtype=bool) if entries is None else entries
        m[mask] = m[mask] * alpha
    return m


def apply_scaling(model: FrontDoorModel, target: str, alpha: float) -> FrontDoorModel:
    """Scale one parameter block or covariance entry group by ``alpha``."""
    b, e = model.blocks, model.errors
    if target.startswith("beta_"):
        if target not in ("beta_tC", "beta_MC", "beta_rC", "beta_Mt", "beta_rM"):
            raise ConfigError(f"unknown sweep target {target!r}")
        return model.replace(blocks=b.replace(**{target: alpha * getattr(b, target)}))
    block = {"Sigma_C": "C", "Sigma_M": "M", "Sigma_tr": "tr"}
    head, _, part = target.rpartition("_")
    if head not in block:
        raise ConfigError(f"unknown sweep target {target!r}")
    nb = getattr(e, block[head])
    if head == "Sigma_tr":
        if part not in ("t", "r", "cov"):
            raise ConfigError(f"unknown sweep target {target!r}")
        m = np.array(nb.matrix)
        if part == "t":
            m[0, 0] *= alpha
        elif part == "r":
            m[1, 1] *= alpha
        else:
            m[0, 1] *= alpha
            m[1, 0] *= alpha
    elif part in ("diag", "offdiag"):
        m = _scale_cov(nb.matrix, alpha, part == "diag")
    else:
        raise ConfigError(f"unknown sweep target {target!r}")
    new = replace(nb, matrix=m)
    return model.replace(errors=replace(e, **{block[head]: new}))


def _mean_offdiag_corr(m) -> float:
    m = np.asarray(m, dtype=float)
    s = np.sqrt(np.diag(m))
    c = m / np.outer(s, s)
    return float(c[~np.eye(m.shape[0], dtype=bool)].mean())


@dataclass(frozen=True)
class SweepSpec:
    target: str
    grid: tuple = ()
    replications: int = 20
    n: int = 500
    budget_ratio: float = 1.5
    seed: int = 0
    model: FrontDoorModel = field(default_factory=reference_model)
    pool_size: int = 256
    threads: Optional[int] = None

    def __post_init__(self):
        grid = tuple(float(a) for a in (self.grid or SWEEP_GRIDS.get(self.target, ())))
        if not grid:
            raise ConfigError(f"no grid for sweep target {self.target!r}")
        object.__setattr__(self, "grid", grid)
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")

    def models(self) -> list:
        """Scaled models for every grid point; raises naming the first invalid point."""
        out = []
        for i, a in enumerate(self.grid):
            try:
                out.append(apply_scaling(self.model, self.target, a))
            except ConfigError as e:
                raise ConfigError(f"{self.target} grid point {i} (alpha={a!r}): {e}") from None
        return out


# ---------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleResult:
    p1: float
    p2: float
    projected_p1: float
    variance: float
    cost: float
    n_feasible: int
    resolution_bound: float


def grid_oracle(ctx: LeverageContext, b0: float, grid_step: float = 0.01) -> OracleResult:
    """Best constant policy on a ``grid_step`` lattice, by exhaustive search.

    Grid points within ``delta = grid_step * max(E c1, E c2)`` of the budget are
    kept; each is moved onto the budget by rescaling ``pi1`` (skipped if that
    would exceed one) and scored at the rescaled point. ``resolution_bound`` is
    how far below the true optimum a score could sit from the ``delta`` slack.
    """
    if not 0 < grid_step <= 0.5:
        raise ValueError("grid_step must lie in (0, 0.5]")
    Eg1, Eg2 = ctx.mean(ctx.g1), ctx.mean(ctx.g2)
    Ec1, Ec2 = ctx.mean(ctx.c1), ctx.mean(ctx.c2)
    k = int(round(1.0 / grid_step))
    p = np.arange(1, k + 1) * grid_step
    p[-1] = 1.0
    P1, P2 = np.meshgrid(p, p, indexing="ij")
    extra = P1 * (Ec1 + P2 * Ec2)
    delta = grid_step * max(Ec1, Ec2)
    target = b0 - ctx.c0
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(extra > 0, target / extra, np.inf)
    P1s = P1 * scale
    ok = (np.abs(extra - target) <= delta + 1e-12) & (P1s <= 1.0 + 1e-12)
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise InfeasibleBudgetError(f"no grid policy meets budget {b0} within {delta:.3g}")
    P1s = np.minimum(P1s, 1.0)
    var = np.where(ok, Eg1 / P1s + Eg2 / (P1s * P2), np.inf)
    i, j = np.unravel_index(np.argmin(var), var.shape)
    v = float(var[i, j])
    bound = v * delta / max(target - delta, 1e-300)
    return OracleResult(float(P1[i, j]), float(P2[i, j]), float(P1s[i, j]), v,
                        float(ctx.c0 + extra[i, j]), n_ok, bound)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    rows: list
    estimates: dict
    failures: int
    config: dict

    def row(self, arm: str, n: int) -> dict:
        for r in self.rows:
            if r["arm"] == arm and r["n"] == n:
                return r
        raise KeyError((arm, n))


def _pilot(model: FrontDoorModel, n: int, seed: int, pool_size: int):
    full = model.sample(n, seed)
    data = full.as_coarsened()
    ctx = context_from_dataset(data, ConstantPolicy(1.0, 1.0), model.costs,
                               pool_size=pool_size, seed=seed)
    return data, ctx


def _calibration_rep(cfg: ExperimentConfig, n: int, seed: int) -> dict:
    s_pilot, s_opt, s_coarsen = (int(s.generate_state(1)[0]) for s in
                                 np.random.SeedSequence(seed).spawn(3))
    model = cfg.model
    data, ctx = _pilot(model, n, s_pilot, cfg.pool_size)
    naive = estimate_effect(data, None, cfg.level)
    ones = np.ones(ctx.n)
    v_naive = ctx.variance_of(ones, ones)[0]
    c_naive = float(realized_costs(data, model.costs).mean())
    sol = solve_budget(ctx, c_naive / cfg.budget_ratio)
    m = int(round(cfg.budget_ratio * n))
    coarse = coarsen(model.sample(m, s_opt), sol.policy, s_coarsen)
    opt = estimate_effect(coarse, sol.policy, cfg.level)
    xC, xt = coarse.x_C, coarse.x_t
    p1 = sol.policy.pi1(xC, xt)
    return {
        "naive": (naive.xi_hat, naive.se, naive.ci, v_naive, c_naive, n),
        "opt": (opt.xi_hat, opt.se, opt.ci, sol.var_inf,
                float(realized_costs(coarse, model.costs).mean()), m),
        "pi1_quantiles": np.quantile(p1, [0.1, 0.5, 0.9]).tolist(),
        "lambda": sol.lambda_star,
    }


def run_calibration(cfg: ExperimentConfig) -> CalibrationResult:
    """Naive arm (full data, ``n``) against the optimized arm (budget ``c/ratio``, ``ratio * n``)."""
    xi = cfg.model.xi
    rows, estimates, failures = [], {}, 0
    for ci, n in enumerate(cfg.sizes):
        seeds = [replication_seed(cfg.seed, "calibrate", ci, r) for r in range(cfg.replications)]
        out = _pmap(_guarded(lambda s: _calibration_rep(cfg, n, s)), seeds, cfg.threads)
        ok = [o for o in out if "failed" not in o]
        failures += len(out) - len(ok)
        for arm in ("naive", "opt"):
            if not ok:
                rows.append({"arm": arm, "n": n, "reps": 0, "failed": len(out), "seeds": seeds})
                continue
            est = np.array([o[arm][0] for o in ok])
            estimates[(arm, n)] = est
            covered = np.mean([o[arm][2][0] <= xi <= o[arm][2][1] for o in ok])
            n_arm = ok[0][arm][5]
            v = np.array([o[arm][3] for o in ok])
            row = {
                "arm": arm, "n": n, "n_samples": n_arm, "reps": len(ok), "failed": len(out) - len(ok),
                "mse": float(np.mean((est - xi) ** 2)),
                "theoretical_mse": float(v.mean() / n_arm),
                "bias": float(est.mean() - xi),
                "coverage": float(covered),
                "mean_cost": float(np.mean([o[arm][4] for o in ok])),
                "total_budget": float(np.mean([o[arm][4] for o in ok]) * n_arm),
                "seeds": seeds,
            }
            if arm == "opt":
                q = np.mean([o["pi1_quantiles"] for o in ok], axis=0)
                row.update(pi1_q10=float(q[0]), pi1_q50=float(q[1]), pi1_q90=float(q[2]))
            rows.append(row)
    return CalibrationResult(rows, estimates, failures, cfg.describe())


# ---------------------------------------------------------------------------
# sensitivity sweeps


@dataclass
class SweepResult:
    target: str
    rows: list
    samples: list
    failures: int
    config: dict

    def spearman(self, column: str = "relative_efficiency", x: Callable = lambda a: a):
        """Spearman correlation of ``x(alpha)`` against a per-replication column."""
        pts = [(x(s["alpha"]), s[column]) for s in self.samples]
        a, v = np.array(pts).T
        res = stats.spearmanr(a, v)
        return float(res.statistic), float(res.pvalue)


def _sensitivity_rep(model, n, ratio, pool_size, seed):
    _, ctx = _pilot(model, n, seed, pool_size)
    rep = relative_efficiency_report(ctx, 1.0 / ratio)
    return {"var_inf": rep.solution.var_inf, "relative_efficiency": rep.relative_efficiency}


def run_sensitivity(spec: SweepSpec) -> SweepResult:
    models = spec.models()
    rows, samples, failures = [], [], 0
    for gi, (alpha, model) in enumerate(zip(spec.grid, models)):
        seeds = [replication_seed(spec.seed, f"sensitivity/{spec.target}", gi, r)
                 for r in range(spec.replications)]
        out = _pmap(_guarded(lambda s: _sensitivity_rep(model, spec.n, spec.budget_ratio,
                                                        spec.pool_size, s)), seeds, spec.threads)
        ok = [o for o in out if "failed" not in o]
        failures += len(out) - len(ok)
        for r, o in enumerate(out):
            if "failed" not in o:
                samples.append({"alpha": alpha, "rep": r, "seed": seeds[r], **o})
        vm, vs = _mean_sd([o["var_inf"] for o in ok])
        rm, rs = _mean_sd([o["relative_efficiency"] for o in ok])
        row = {"target": spec.target, "alpha": alpha, "reps": len(ok), "failed": len(out) - len(ok),
               "var_inf_mean": vm, "var_inf_sd": vs, "rel_eff_mean": rm, "rel_eff_sd": rs,
               "seeds": seeds}
        if spec.target.startswith("Sigma_"):
            head = spec.target.rpartition("_")[0]
            nb = getattr(model.errors, {"Sigma_C": "C", "Sigma_M": "M", "Sigma_tr": "tr"}[head])
            row["correlation"] = _mean_offdiag_corr(nb.covariance)
        rows.append(row)
    cfg = {"target": spec.target, "grid": list(spec.grid), "replications": spec.replications,
           "n": spec.n, "budget_ratio": spec.budget_ratio, "seed": spec.seed,
           "model": spec.model.to_dict(), "model_notes": list(spec.model.notes)}
    return SweepResult(spec.target, rows, samples, failures, cfg)


# ---------------------------------------------------------------------------
# computational sensitivity


def _compsens_rep(model, n, ratio, pool_size, seed):
    t0 = time.perf_counter()
    _, ctx = _pilot(model, n, seed, pool_size)
    ones = np.ones(ctx.n)
    sol = solve_budget(ctx, ctx.cost_of(ones, ones) / ratio)
    wall = time.perf_counter() - t0
    return {"lambda": sol.lambda_star, "var_inf": sol.var_inf, "cost": sol.expected_cost, "wall": wall}


def run_computational_sensitivity(cfg: ExperimentConfig) -> list:
    """Spread of ``lambda*``, optimized variance, expected cost and solve time by ``n``.

    Replications run sequentially so that wall times are not distorted by
    contention.
    """
    rows = []
    for ci, n in enumerate(cfg.sizes):
        seeds = [replication_seed(cfg.seed, "compsens", ci, r) for r in range(cfg.replications)]
        out = [_guarded(lambda s: _compsens_rep(cfg.model, n, cfg.budget_ratio, cfg.pool_size, s))(s)
               for s in seeds]
        ok = [o for o in out if "failed" not in o]
        row = {"n": n, "reps": len(ok), "failed": len(out) - len(ok), "seeds": seeds}
        for key in ("lambda", "var_inf", "cost", "wall"):
            m, s = _mean_sd([o[key] for o in ok])
            row[f"{key}_mean"], row[f"{key}_sd"] = m, s
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# misspecification


def quadratic_effect(data: CoarsenedDataset, policy: PropensityPolicy, x_grid) -> np.ndarray:
    """Effect curve from a mediator regression that is quadratic in ``x_t``.

    ``beta_rM`` comes from the usual response stage; the mediator slope at
    ``x`` is ``lin + 2 quad x``.
    """
    tfit = fit_beta_tC(data)
    w2, w3 = stage_weights(data, policy)
    mfit = fit_beta_M(data, policy, tfit.eps_t, weights=w2)
    rfit = fit_beta_r(data, policy, tfit.eps_t, mfit.eps_M, weights=w3)
    has_M = data.has_M
    xt = data.x_t[has_M]
    X = np.column_stack([xt, xt**2, data.x_C[has_M]])
    B, _ = solve_checked(weighted_cross(w2, X, X), weighted_cross(w2, X, data.x_M), "quadratic mediator")
    slope = B[0][None, :] + 2.0 * np.outer(np.asarray(x_grid, dtype=float), B[1])
    return slope @ rfit.beta_rM


def _misspec_rep(model, n, ratio, pool_size, grid, truth, seed):
    s_pilot, s_opt, s_coarsen = (int(s.generate_state(1)[0]) for s in
                                 np.random.SeedSequence(seed).spawn(3))
    data, ctx = _pilot(model, n, s_pilot, pool_size)
    naive = quadratic_effect(data, ConstantPolicy(1.0, 1.0), grid)
    c_naive = float(realized_costs(data, model.costs).mean())
    sol = solve_budget(ctx, c_naive / ratio)
    m = int(round(ratio * n))
    coarse = coarsen(model.sample(m, s_opt), sol.policy, s_coarsen)
    opt = quadratic_effect(coarse, sol.policy, grid)
    return {"naive": float(np.mean((naive - truth) ** 2)), "opt": float(np.mean((opt - truth) ** 2)),
            "cost_naive": c_naive, "cost_opt": float(realized_costs(coarse, model.costs).mean())}


def run_misspecification(cfg: ExperimentConfig, quad: QuadraticMediatorSpec) -> list:
    """MSE of the effect curve over ``MISSPEC_GRID`` for both arms, per budget.

    Data follow the quadratic mediator; the design is optimized as if the
    model were linear.
    """
    model = cfg.model.replace(quadratic=quad)
    truth = quad.effect_at(model.blocks.beta_rM, MISSPEC_GRID)
    rows = []
    for ci, n in enumerate(cfg.sizes):
        seeds = [replication_seed(cfg.seed, "misspec", ci, r) for r in range(cfg.replications)]
        out = _pmap(_guarded(lambda s: _misspec_rep(model, n, cfg.budget_ratio, cfg.pool_size,
                                                    MISSPEC_GRID, truth, s)), seeds, cfg.threads)
        ok = [o for o in out if "failed" not in o]
        row = {"n": n, "reps": len(ok), "failed": len(out) - len(ok), "seeds": seeds}
        for key in ("naive", "opt", "cost_naive", "cost_opt"):
            row[f"{key}_mean" if key.startswith("cost") else f"mse_{key}"] = (
                float(np.mean([o[key] for o in ok])) if ok else float("nan"))
        row["total_budget_naive"] = row["cost_naive_mean"] * n
        row["total_budget_opt"] = row["cost_opt_mean"] * int(round(cfg.budget_ratio * n))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# output


def write_table(rows: list, path) -> None:
    """One CSV row per cell; list-valued fields are ``;``-joined."""
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ";".join(map(str, v)) if isinstance(v, (list, tuple)) else v
                        for k, v in r.items()})
