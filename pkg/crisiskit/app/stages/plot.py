from __future__ import annotations

import argparse
from pathlib import Path

import pandas as pd

from ..config import RunConfig, require_file
from ..deps import StageResult, stage_dir
from ..errors import DataError
from ..render import render_line_chart, write_text

NAME = "plot"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="SVG line charts from trend CSVs written by analyze")
    p.add_argument("--trend", type=Path, action="append", required=True, help="CSV with a month column; repeatable")
    p.add_argument("--title", help="chart title (defaults to the file name)")
    p.add_argument("--y-label", dest="y_label", default="count")
    p.set_defaults(handler=run, stage=NAME)


def chart_from_csv(path: Path, title: str, y_label: str) -> str:
    df = pd.read_csv(require_file(path, "trend CSV"))
    if "month" not in df.columns:
        raise DataError(f"{path}: expected a month column")
    series = {c: [None if pd.isna(v) else float(v) for v in df[c]] for c in df.columns if c != "month"}
    return render_line_chart(title, [str(m) for m in df["month"]], series, y_label=y_label)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    out = stage_dir(cfg, "plots")
    artifacts = {}
    for path in args.trend:
        title = args.title or path.stem.replace("_", " ")
        svg = chart_from_csv(path, title, args.y_label)
        artifacts[path.stem] = write_text(out / f"{path.stem}.svg", svg)
    return StageResult(summary=f"{len(artifacts)} chart(s)", artifacts=artifacts)
