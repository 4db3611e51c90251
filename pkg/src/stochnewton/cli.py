"""Command-line entry point.

Subcommands:
  run        run an experiment spec (or preset) and write CSV outputs
  grid       resolve step-length grid searches only, print selections
  aggregate  (re)build aggregate curves from a directory of trace CSVs
  check      run the built-in invariant suite
"""

from __future__ import annotations

import argparse
import sys

from .checks import run_checks
from .harness import (ExperimentSpec, PRESETS, aggregate_directory,
                      build_problem, resolve_grid_searches, run_experiment)


def _load_spec(args) -> ExperimentSpec:
    if args.preset:
        spec = ExperimentSpec.from_preset(args.preset)
    elif args.spec:
        spec = ExperimentSpec.from_file(args.spec)
    else:
        raise SystemExit("error: provide a spec file or --preset NAME")
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.reps is not None:
        overrides["run.reps"] = args.reps
    if args.budget_s is not None:
        overrides["run.time_budget_s"] = args.budget_s
    if getattr(args, "max_iters", None) is not None:
        overrides["run.max_iters"] = args.max_iters
    return spec.override(**overrides) if overrides else spec


def _add_common(p):
    p.add_argument("spec", nargs="?", help="experiment spec file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="use a built-in desk-scale preset")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--reps", type=int, help="override run.reps")
    p.add_argument("--budget-s", type=float, help="override run.time_budget_s")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stochnewton",
        description="Stochastic second-order optimization benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment")
    _add_common(p_run)
    p_run.add_argument("--max-iters", type=int, help="override run.max_iters")
    p_run.add_argument("--out", default="runs", help="output directory")

    p_grid = sub.add_parser("grid", help="resolve step-length grid searches")
    _add_common(p_grid)
    p_grid.add_argument("--out", help="write the resolved spec here")

    p_agg = sub.add_parser("aggregate", help="aggregate trace CSVs in a directory")
    p_agg.add_argument("directory")
    p_agg.add_argument("--mode", choices=["iter", "time"], default="iter")

    sub.add_parser("check", help="run the invariant suite")

    args = parser.parse_args(argv)

    if args.command == "check":
        return 0 if run_checks() else 1

    if args.command == "aggregate":
        curves = aggregate_directory(args.directory, args.mode)
        for name, curve in sorted(curves.items()):
            print(f"{name}: {curve.n_runs} runs, "
                  f"final mean error {curve.mean_error[-1]:.6e} "
                  f"(+- {curve.ci_half[-1]:.1e})")
        return 0

    if args.command == "grid":
        spec = _load_spec(args)
        problem, kind = build_problem(spec)
        resolved = resolve_grid_searches(spec, problem, kind)
        for name in resolved.solver_names():
            t_ini = resolved.solver_get(name, "t_ini", "1.0")
            print(f"solver.{name}.t_ini = {t_ini}")
        if args.out:
            with open(args.out, "w") as fh:
                for key in sorted(resolved.values):
                    fh.write(f"{key} = {resolved.values[key]}\n")
            print(f"resolved spec written to {args.out}")
        return 0

    # run
    spec = _load_spec(args)
    result = run_experiment(spec, out_dir=args.out)
    for name in result.spec.solver_names():
        curve = result.aggregates.get((name, "iter")) \
            or next(c for (n, _), c in result.aggregates.items() if n == name)
        print(f"{name}: {curve.n_runs} runs, "
              f"final mean error {curve.mean_error[-1]:.6e} "
              f"(+- {curve.ci_half[-1]:.1e})")
    print(f"outputs in {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
