"""Command-line front end: simulate, design, coarsen, estimate, experiment, oracle.

Exit codes: 0 success, 1 usage, 2 config/data parse, 3 infeasible budget,
4 numerical rank failure, 5 policy-digest mismatch.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness
from .design import (
    InfeasibleBudgetError,
    constant_context,
    context_from_dataset,
    context_from_model,
    policy_from_dict,
    solve_budget,
)
from .estimators import estimate_effect
from .io import (
    RunManifest,
    as_full,
    config_digest,
    load_config,
    now,
    object_digest,
    read_dataset,
    read_json,
    read_manifest,
    write_dataset,
    write_json,
    write_manifest,
)
from .sem import (
    ConfigError,
    ConstantPolicy,
    PolicyRangeError,
    ShapeError,
    coarsen,
    quadratic_model,
    reference_model,
)

EXIT_USAGE, EXIT_PARSE, EXIT_BUDGET, EXIT_RANK, EXIT_DIGEST = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class DigestMismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _model(args, default=reference_model):
    if getattr(args, "config", None):
        return load_config(args.config)
    model = default()
    return model, object_digest(model.to_dict()).encode()


def _manifest(cmd, raw, args, outputs, **extra):
    m = RunManifest(cmd, config_digest(raw) if raw else "", getattr(args, "seed", None),
                    started=args._started, finished=now(), outputs=[str(o) for o in outputs],
                    extra=extra)
    for o in outputs:
        write_manifest(m, o)


def _policy_arg(args):
    if args.constant is not None:
        return ConstantPolicy(*args.constant)
    if args.design is not None:
        doc = read_json(args.design)
        return policy_from_dict(doc.get("policy", doc))
    raise UsageError("one of --design or --constant is required")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    model, raw = _model(args)
    data = model.sample(args.n, args.seed)
    write_dataset(data, args.out)
    policy = ConstantPolicy(1.0, 1.0)
    _manifest("simulate", raw, args, [args.out], n=args.n, notes=list(model.notes),
              policy=policy.to_dict(), policy_digest=policy.digest())
    return 0


def cmd_design(args) -> int:
    if args.fixture is not None:
        g1, g2, c1, c2 = args.fixture
        ctx, raw = constant_context(g1, g2, c1, c2, args.c0), b""
    else:
        model, raw = _model(args)
        if args.pilot:
            data = read_dataset(args.pilot)
            meta = read_manifest(args.pilot)
            if "policy" in meta.get("extra", {}):
                pilot_policy = policy_from_dict(meta["extra"]["policy"])
            elif np.all(data.is_full):
                pilot_policy = ConstantPolicy(1.0, 1.0)
            else:
                raise ConfigError(f"{args.pilot}: coarsened pilot without a policy manifest")
            ctx = context_from_dataset(data, pilot_policy, model.costs, pool_size=args.pool_size,
                                       seed=args.seed)
        else:
            ctx = context_from_model(model, args.mc_n, args.seed, pool_size=args.pool_size)
    if args.b0 is not None:
        b0 = args.b0
    elif args.budget_ratio is not None:
        b0 = args.budget_ratio * ctx.cost_full
    else:
        raise UsageError("one of --b0 or --budget-ratio is required")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_budget(ctx, b0, tol=args.tol)
    for w in sol.warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_json(sol.to_dict(), args.out)
    _manifest("design", raw, args, [args.out], policy_digest=sol.policy.digest())
    print(f"lambda*={sol.lambda_star:.6g} var_inf={sol.var_inf:.6g} "
          f"cost={sol.expected_cost:.6g} rel_eff={sol.relative_efficiency:.4f}")
    return 0


def cmd_coarsen(args) -> int:
    data = read_dataset(args.data)
    full = as_full(data)
    policy = _policy_arg(args)
    out = coarsen(full, policy, args.seed)
    write_dataset(out, args.out)
    _manifest("coarsen", b"", args, [args.out], source=str(args.data), policy=policy.to_dict(),
              policy_digest=policy.digest(), counts=out.counts(), n_clipped=out.n_clipped)
    return 0


def cmd_estimate(args) -> int:
    data = read_dataset(args.data)
    policy = _policy_arg(args)
    recorded = read_manifest(args.data).get("extra", {}).get("policy_digest")
    if recorded != policy.digest() and not args.force:
        raise DigestMismatch(
            f"policy digest {policy.digest()[:12]} does not match the one recorded for "
            f"{args.data} ({(recorded or 'none')[:12]}); use --force to override"
        )
    est = estimate_effect(data, policy, args.level)
    write_json(est.to_dict(), args.out)
    _manifest("estimate", b"", args, [args.out], source=str(args.data), policy_digest=policy.digest())
    lo, hi = est.ci
    print(f"xi_hat={est.xi_hat:.6g} se={est.se:.3g} ci=({lo:.6g}, {hi:.6g})")
    return 0


def _experiment_config(args, default_model=reference_model):
    model, raw = _model(args, default_model)
    kw = {"model": model, "seed": args.seed}
    if args.budget_ratio is not None:
        kw["budget_ratio"] = args.budget_ratio
    if args.replications is not None:
        kw["replications"] = args.replications
    if args.sizes:
        kw["sizes"] = tuple(args.sizes)
    cfg = (harness.ExperimentConfig.full_scale(**kw) if args.paper_scale
           else harness.ExperimentConfig(**kw))
    return cfg, raw


def cmd_experiment(args) -> int:
    kind = args.kind
    out = Path(args.out)
    if kind == "calibrate":
        cfg, raw = _experiment_config(args)
        rows = harness.run_calibration(cfg).rows
        desc = cfg.describe()
    elif kind == "compsens":
        cfg, raw = _experiment_config(args)
        if args.paper_scale and not args.sizes:
            cfg = cfg.with_(sizes=harness.FULL_SCALE_COMPSENS_SIZES)
        rows = harness.run_computational_sensitivity(cfg)
        desc = cfg.describe()
    elif kind == "misspec":
        cfg, raw = _experiment_config(args, quadratic_model)
        quad = cfg.model.quadratic
        if quad is None:
            from .sem import REFERENCE_QUADRATIC as quad
        rows = harness.run_misspecification(cfg, quad)
        desc = cfg.describe()
    else:
        model, raw = _model(args)
        reps = args.replications or (50 if args.paper_scale else 20)
        spec = harness.SweepSpec(args.target, replications=reps, n=args.n or 500,
                                 budget_ratio=args.budget_ratio or 1.5, seed=args.seed, model=model)
        res = harness.run_sensitivity(spec)
        rows, desc = res.rows, res.config
    harness.write_table(rows, out)
    _manifest(f"experiment {kind}", raw, args, [out], config=desc,
              seeds={"root": args.seed}, paper_scale=bool(args.paper_scale))
    return 0


def cmd_oracle(args) -> int:
    if args.fixture is not None:
        g1, g2, c1, c2 = args.fixture
        ctx, raw = constant_context(g1, g2, c1, c2, args.c0), b""
    else:
        model, raw = _model(args)
        ctx = context_from_model(model, args.mc_n, args.seed)
    b0 = args.b0 if args.b0 is not None else (args.budget_ratio or 1.0) * ctx.cost_full
    res = harness.grid_oracle(ctx, b0, args.grid_step)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_budget(ctx, b0)
    doc = {"oracle": res.__dict__, "design_var_inf": sol.var_inf, "b0": b0}
    write_json(doc, args.out)
    _manifest("oracle", raw, args, [args.out])
    print(f"grid minimizer ({res.p1:.4g}, {res.p2:.4g}) variance {res.variance:.6g}; "
          f"closed form {sol.var_inf:.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fddesign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="model config JSON (default: reference model)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("simulate", help="draw full records from a model")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("design", help="solve the budget-constrained design")
    common(sp)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--pilot", help="pilot dataset CSV")
    src.add_argument("--from-model", action="store_true", help="use population values (default)")
    src.add_argument("--fixture", type=float, nargs=4, metavar=("G1", "G2", "C1", "C2"),
                     help="constant leverages and costs")
    sp.add_argument("--c0", type=float, default=1.0, help="base cost for --fixture")
    budget = sp.add_mutually_exclusive_group()
    budget.add_argument("--b0", type=float)
    budget.add_argument("--budget-ratio", type=float, help="b0 as a fraction of the full-sampling cost")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--mc-n", type=int, default=20_000)
    sp.add_argument("--pool-size", type=int, default=256)
    sp.set_defaults(func=cmd_design)

    for name, func, helptext in (("coarsen", cmd_coarsen, "apply a policy to full data"),
                                 ("estimate", cmd_estimate, "estimate the effect from coarsened data")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, config=False)
        sp.add_argument("--data", required=True)
        pol = sp.add_mutually_exclusive_group(required=True)
        pol.add_argument("--design", help="design JSON")
        pol.add_argument("--constant", type=float, nargs=2, metavar=("P1", "P2"))
        if name == "estimate":
            sp.add_argument("--level", type=float, default=0.95)
            sp.add_argument("--force", action="store_true", help="skip the policy digest check")
        sp.set_defaults(func=func)

    sp = sub.add_parser("experiment", help="run a simulation experiment")
    sp.add_argument("kind", choices=("calibrate", "sensitivity", "compsens", "misspec"))
    common(sp)
    sp.add_argument("--paper-scale", action="store_true")
    sp.add_argument("--budget-ratio", type=float)
    sp.add_argument("--replications", type=int)
    sp.add_argument("--sizes", type=int, nargs="+")
    sp.add_argument("--target", default="beta_Mt", choices=sorted(harness.SWEEP_GRIDS))
    sp.add_argument("--n", type=int, help="sample size for sensitivity sweeps")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("oracle", help="grid-search the best constant policy")
    common(sp)
    sp.add_argument("--fixture", type=float, nargs=4, metavar=("G1", "G2", "C1", "C2"))
    sp.add_argument("--c0", type=float, default=1.0)
    sp.add_argument("--b0", type=float)
    sp.add_argument("--budget-ratio", type=float)
    sp.add_argument("--grid-step", type=float, default=0.01)
    sp.add_argument("--mc-n", type=int, default=20_000)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._started = now()
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError, PolicyRangeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleBudgetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except np.linalg.LinAlgError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RANK
    except DigestMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIGEST


if __name__ == "__main__":
    sys.exit(main())
