"""Command-line interface: run, compare, sweep, validate, presets.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 validation failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4

_WORKERS_ENV = "NMQSD_WORKERS"


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(_WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmqsd",
        description=(
            "Exact non-Markovian dynamics of dissipative qubit chains: "
            "experiment runner and validation tools"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        group = p.add_mutually_exclusive_group(required=needs_config)
        group.add_argument("--config", type=Path, help="YAML experiment config")
        group.add_argument("--preset", help="figure preset name (see 'presets')")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override QSD master seed")
        p.add_argument(
            "--engines", default=None, help="comma-separated engine subset override"
        )
        p.add_argument(
            "--workers",
            type=int,
            default=_default_workers(),
            help=f"parallel worker budget (default ${_WORKERS_ENV} or 1)",
        )
        p.add_argument("--gamma", type=float, default=None, help="override kernel gamma")

    p_run = sub.add_parser("run", help="execute the configured engines")
    common(p_run)

    p_cmp = sub.add_parser("compare", help="trace-distance report between two runs")
    p_cmp.add_argument("run_a", type=Path)
    p_cmp.add_argument("run_b", type=Path)
    p_cmp.add_argument("--engine-a", default=None)
    p_cmp.add_argument("--engine-b", default=None)
    p_cmp.add_argument("--tolerance", type=float, default=None)
    p_cmp.add_argument("--out", type=Path, default=None, help="CSV output path")

    p_sweep = sub.add_parser("sweep", help="convergence sweep along one axis")
    common(p_sweep)
    p_sweep.add_argument(
        "--axis", required=True, choices=("dt", "n_traj", "gamma", "K_modes")
    )
    p_sweep.add_argument(
        "--values", required=True, help="comma-separated axis values"
    )

    p_val = sub.add_parser("validate", help="invariant and identity checks")
    common(p_val)
    p_val.add_argument(
        "--perturbation",
        type=float,
        default=0.0,
        help="inject a grading-violating perturbation (negative-control hook)",
    )

    sub.add_parser("presets", help="list the figure scenario presets")
    return parser


def _resolve_config(args):
    from .experiment import load_config, preset_config

    if getattr(args, "preset", None):
        cfg = preset_config(args.preset, gamma=args.gamma)
    else:
        cfg = load_config(args.config)
        if args.gamma is not None:
            import dataclasses

            cfg = dataclasses.replace(cfg, gamma=args.gamma)
    import dataclasses

    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    if args.engines:
        engines = tuple(e.strip() for e in args.engines.split(",") if e.strip())
        from .experiment import ENGINES

        for e in engines:
            if e not in ENGINES:
                from .experiment import ConfigError

                raise ConfigError("engines", f"unknown engine {e!r}")
        cfg = dataclasses.replace(cfg, engines=engines)
    return cfg


def _out_dir(args, cfg) -> Path:
    return args.out if args.out is not None else Path("runs") / cfg.name


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    from .experiment import ConfigError

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError, MemoryError, RuntimeError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(args) -> int:
    from .experiment import (
        compare_runs,
        preset_names,
        run_experiment,
        run_sweep,
        validate_config,
    )

    if args.command == "presets":
        for name in preset_names():
            print(name)
        return EXIT_OK

    if args.command == "compare":
        report = compare_runs(
            args.run_a,
            args.run_b,
            engine_a=args.engine_a,
            engine_b=args.engine_b,
            tolerance=args.tolerance,
            out_path=args.out,
        )
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{report.engine_a} vs {report.engine_b}: max trace distance "
            f"{report.max_distance:.3e} (tolerance {report.tolerance:.3e}) {status}"
        )
        return EXIT_OK if report.passed else EXIT_VALIDATION

    cfg = _resolve_config(args)

    if args.command == "run":
        out = _out_dir(args, cfg)
        result = run_experiment(cfg, out, workers=args.workers)
        print(f"wrote {len(result.manifest['files'])} files to {out}")
        return EXIT_OK

    if args.command == "sweep":
        values = [float(v) for v in args.values.split(",")]
        out = args.out
        result = run_sweep(cfg, args.axis, values, out_dir=out, workers=args.workers)
        for v, m in zip(result.values, result.metrics):
            print(f"{args.axis}={v:g}: {m:.6e}")
        if result.observed_order is not None:
            print(f"observed convergence order: {result.observed_order:.3f}")
        if result.fitted_slope is not None:
            print(f"fitted log-log slope: {result.fitted_slope:.3f}")
        print(f"monotone decreasing: {result.monotone_decreasing}")
        return EXIT_OK

    if args.command == "validate":
        out = args.out / "validation.yaml" if args.out is not None else None
        report = validate_config(cfg, perturbation=args.perturbation, out_path=out)
        for name, check in report.checks.items():
            status = "PASS" if check["passed"] else "FAIL"
            value = "n/a" if check["value"] is None else f"{check['value']:.3e}"
            print(f"{status} {name}: {value} (tolerance {check['tolerance']:g})")
        print("validation " + ("passed" if report.passed else "FAILED"))
        return EXIT_OK if report.passed else EXIT_VALIDATION

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
