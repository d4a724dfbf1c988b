"""``must <stage> --config <path> [--set key=value]... [--force]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .pipeline import STAGES, DependencyError, Run, run_all
from .synth import InfeasibleOverlapError, ManifestError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="must", description="Run stages of the distillation experiment.")
    parser.add_argument("stage", choices=[*STAGES, "all"], help="stage to run, or 'all' for every stage in order")
    parser.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. training.lambda=0.7 (repeatable)")
    parser.add_argument("--force", action="store_true", help="rerun even if artifacts exist or came from another config")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("must")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.stage == "all":
            for path in run_all(cfg, args.force):
                print(path)
        else:
            Run(cfg, args.force).run_stage(args.stage)
    except (ConfigError, InfeasibleOverlapError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DependencyError, ManifestError, CheckpointError, FileNotFoundError) as e:
        log.error("dependency error: %s", e)
        return EXIT_DEPENDENCY
    except (NonFiniteError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
