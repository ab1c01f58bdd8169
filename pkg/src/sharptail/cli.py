"""Command line entry point: ``sharptail <stage> --config run.json --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (the
failing stage is named on stderr), 4 violated assumption.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import (AssumptionViolation, ConfigError, DimensionError, DivergenceError, NonConvergenceError,
                     RiccatiSingularityError, SingularInstantonError)
from .io import EXPORTS, ArtifactManifest, MissingArrayError, export_plot_data, load_config, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSUMPTION = 0, 2, 3, 4
_NUMERIC = (NonConvergenceError, DivergenceError, RiccatiSingularityError, SingularInstantonError)

_STAGE_COMMANDS = {
    "instanton": ["instanton"],
    "spectrum": ["spectrum"],
    "riccati": ["riccati"],
    "estimate": ["estimate"],
    "tube": ["tube"],
    "sample": ["sample"],
    "pipeline": None,  # every enabled stage
}

_SUMMARY_KEYS = ("z", "I_F", "lambda", "obs_residual", "iters", "C_F_fredholm", "C_F_riccati", "det",
                 "plateau_converged", "eps", "tail_prob", "log10_tail_prob")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharptail", description="Sharp extreme-event probability estimates.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", help="output directory (default: config output_dir or ./sharptail-run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--z", type=float, help="override the observable threshold")
    for name in _STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline"
                       else "run all enabled stages")
    v = sub.add_parser("validate", help="check a configuration and print it with defaults filled in")
    v.add_argument("--config", required=True)
    e = sub.add_parser("export", help="write plot data CSVs from a finished run")
    e.add_argument("--out", required=True, help="run directory holding manifest.json")
    e.add_argument("--which", default="all", choices=("all",) + EXPORTS)
    e.add_argument("--dest", help="directory for the CSVs (default: <out>/plots)")
    e.add_argument("--eps", type=float, nargs="+")
    return p


def _run(args) -> int:
    if args.command == "validate":
        print(json.dumps(load_config(args.config), indent=1, sort_keys=True))
        return EXIT_OK
    if args.command == "export":
        try:
            man = ArtifactManifest.load(args.out)
        except FileNotFoundError:
            raise ConfigError(f"no manifest.json in {args.out}") from None
        for path in export_plot_data(man, args.which, args.dest, eps=args.eps):
            print(path)
        return EXIT_OK
    cfg = load_config(args.config)
    if args.z is not None:
        cfg["z"] = args.z
    man = run_pipeline(cfg, args.out, stages=_STAGE_COMMANDS[args.command], threads=args.threads,
                       seed=args.seed)
    summary = {k: man.scalars[k] for k in _SUMMARY_KEYS if k in man.scalars}
    summary["out"] = str(man.base_dir)
    print(json.dumps(summary, indent=1, default=str))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, DimensionError, MissingArrayError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC as exc:
        print(f"numerical failure in stage {getattr(exc, 'stage', '?')}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except AssumptionViolation as exc:
        print(f"assumption violated in stage {getattr(exc, 'stage', '?')}: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
