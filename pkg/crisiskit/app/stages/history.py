from __future__ import annotations

import argparse
import json

from ..audit import as_dict, recent_logs
from ..config import RunConfig
from ..db import ledger_session
from ..deps import StageResult

NAME = "history"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="most recent runs recorded in the output directory's ledger")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--stage", dest="filter_stage", help="only runs of this subcommand")
    # read-only; the dispatcher does not record or manifest it
    p.set_defaults(handler=run, stage=NAME, record=False)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    with ledger_session(cfg.out) as db:
        rows = [as_dict(r) for r in recent_logs(db, limit=args.limit, stage=args.filter_stage)]
    lines = [
        f"{r['when']}  {r['stage']:<16} {r['action']:<6} seed={r['seed']}  {r['summary'] or ''}" for r in rows
    ]
    return StageResult(
        summary=f"{len(rows)} run(s)",
        extra={"runs": rows},
        stdout="\n".join(lines) if lines else "No runs recorded yet.",
    )
