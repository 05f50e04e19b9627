"""Command line entry point: ``fbsdelab <kind> --config PATH [overrides]``.

Results summary goes to stdout; logs and warnings go to stderr.
Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import KINDS, load_config
from .errors import (ConfigError, DomainError, FBSDELabError, NumericalFailure, RestrictionError,
                     SingularRError, SpecViolationError)
from .experiments import OUT_ENV, run_experiment
from .export import _jsonable

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("fbsdelab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsdelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--n-paths", type=int, help="override monte_carlo.n_paths")
        p.add_argument("--n-steps", type=int, help="override grid.n_steps")
        p.add_argument("--out", help=f"output directory (default: config, then ${OUT_ENV})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        if config.kind != args.kind:
            raise ConfigError(f"config kind {config.kind!r} does not match subcommand {args.kind!r}")
        config = config.with_overrides(args.seed, args.n_paths, args.n_steps, args.out)
        report = run_experiment(config)
    except (ConfigError, SpecViolationError, RestrictionError, SingularRError, DomainError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        logger.error("%s experiment failed: %s: %s", args.kind, type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (FBSDELabError, ValueError) as exc:
        logger.error("%s experiment rejected its inputs: %s: %s", args.kind,
                     type(exc).__name__, exc)
        return EXIT_CONFIG
    for w in report.warnings:
        logger.info(w)
    if report.warnings:
        logger.warning("%d warning(s) recorded in the report", len(report.warnings))
    summary = {"kind": config.kind, "files": report.files, "outputs": report.outputs}
    print(json.dumps(_jsonable(summary), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
