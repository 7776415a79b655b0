"""Command-line entry point: ``atrialssm <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, ValidationError, run_pipeline
from .plots import KINDS, PlotError, plot

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("atrialssm")


def build_parser() -> argparse.ArgumentParser:
    # Defaults are suppressed so a flag given before the subcommand is not
    # reset by the subparser; main() reads them with getattr.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker threads for batch stages")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="count")

    p = argparse.ArgumentParser(prog="atrialssm", description="Atrial shape model and P-wave simulation pipeline.",
                                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        sp.add_argument("--force", action="store_true", help="run even if the manifest says it is up to date")
        if stage in ("sample",):
            _sampling_flags(sp)
    rp = sub.add_parser("run", parents=[common], help="run every stage in order")
    rp.add_argument("--force", action="store_true")
    rp.add_argument("--from", dest="start", choices=STAGES, default=STAGES[0], help="first stage to run")
    _sampling_flags(rp)
    pp = sub.add_parser("plot", parents=[common], help="render an artifact CSV to SVG")
    pp.add_argument("artifact", help="generalization.csv, compactness.csv or an ECG trace CSV")
    pp.add_argument("kind", choices=KINDS)
    pp.add_argument("-o", "--output", help="SVG path (default: next to the artifact)")
    return p


def _sampling_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--n-samples", type=int, help="number of sampled instances")
    sp.add_argument("--bounds", choices=("default", "empirical"), help="coefficient sampling bounds")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("jobs", None), ("out", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot":
        try:
            print(plot(args.artifact, args.kind, args.output))
        except PlotError as exc:
            log.error("%s", exc)
            return EXIT_STAGE
        return EXIT_OK
    try:
        cfg = load_config(args.config, seed=args.seed, jobs=args.jobs, output_dir=args.out,
                          n_samples=getattr(args, "n_samples", None), bounds=getattr(args, "bounds", None))
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    stages = STAGES[STAGES.index(args.start):] if args.command == "run" else (args.command,)
    try:
        ctx = run_pipeline(cfg, stages, force=args.force)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    for s in stages:
        print(f"{s}: {'ran' if s in ctx.executed else 'up to date'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
