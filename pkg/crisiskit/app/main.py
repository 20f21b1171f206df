from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from sqlalchemy.exc import SQLAlchemyError

from . import __version__
from .audit import write_log
from .config import RunConfig, load_run_config, write_manifest
from .db import ledger_session
from .deps import StageResult
from .errors import CrisisKitError
from .numcore import seed_everything
from .stages import register_all

log = logging.getLogger("crisiskit.cli")

LOG_FORMAT = "[%(name)s] %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crisiskit",
        description="Crisis-text datasets, compact encoders by distillation, fine-tuning, benchmarks and analytics.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, help="global seed (or CRISIS_SEED)")
    parser.add_argument("--config", type=Path, help="JSON config file (or CRISIS_CONFIG, or ./crisiskit.json)")
    parser.add_argument("--out", type=Path, help="output directory (or CRISIS_OUT)")
    parser.add_argument("--actor", help="name recorded in the run ledger")
    parser.add_argument("-v", "--verbose", action="store_true", default=None)
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    register_all(sub)
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return getattr(v, "value", v)


def _stage_args(args: argparse.Namespace) -> dict:
    """Subcommand arguments as JSON-safe values, for the manifest."""
    skip = {"handler", "stage", "record", "seed", "config", "out", "actor", "verbose", "command"}
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip}


def _record(cfg: RunConfig, stage: str, action: str, summary: str, manifest_hash: Optional[str], duration: float) -> None:
    with ledger_session(cfg.out) as db:
        write_log(
            db, cfg.actor, stage, action, summary,
            seed=cfg.seed, manifest_hash=manifest_hash, duration_s=round(duration, 3),
        )


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run exactly one stage. Returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    cfg: Optional[RunConfig] = None
    started = time.perf_counter()
    try:
        cfg = load_run_config(
            args.config,
            flags={"seed": args.seed, "out": args.out, "actor": args.actor, "verbose": args.verbose},
        )
        configure_logging(cfg.verbose)
        log.debug("resolved config: %s", cfg.model_dump_json())
        seed_everything(cfg.seed)

        result: StageResult = args.handler(cfg, args)
        manifest_hash = None
        if getattr(args, "record", True):
            path, manifest_hash = write_manifest(
                cfg.out, args.stage, cfg, cfg.seed, result.artifacts,
                extra={"args": _stage_args(args), **result.extra},
            )
            log.info("%s: %s (manifest %s)", args.stage, result.summary, path.name)
            _record(cfg, args.stage, "ok", result.summary, manifest_hash, time.perf_counter() - started)
        print(result.stdout if result.stdout is not None else result.summary)
        return 0
    except CrisisKitError as e:
        return _fail(cfg, args, e, started)
    except Exception as e:
        log.debug("unhandled error in %s", args.stage, exc_info=True)
        return _fail(cfg, args, CrisisKitError(f"{type(e).__name__}: {e}", code="internal"), started)


def _fail(cfg: Optional[RunConfig], args: argparse.Namespace, e: CrisisKitError, started: float) -> int:
    """One JSON line on stderr; failed runs are recorded when the config loaded."""
    print(e.one_line(), file=sys.stderr)
    if cfg is not None and getattr(args, "record", True):
        try:
            _record(cfg, args.stage, "error", e.one_line(), None, time.perf_counter() - started)
        except SQLAlchemyError:
            log.debug("could not record failed run", exc_info=True)
    return e.exit_code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
