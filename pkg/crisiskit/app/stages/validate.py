from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig, require_file
from ..corpus import read_records
from ..dataset_builder import read_human_labels, validation_report
from ..deps import StageResult, stage_dir
from ..errors import ConfigError
from ..schemas import AgreedRecord

NAME = "validate"


def _human_arg(raw: str) -> tuple[str, Path]:
    name, sep, path = raw.partition("=")
    if not sep:
        return Path(raw).stem, Path(raw)
    return name, Path(path)


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="Cohen's kappa of human labels against the machine-agreed sample")
    p.add_argument("--sample", type=Path, required=True, help="JSONL validation sample (id,label)")
    p.add_argument(
        "--human", action="append", type=_human_arg, default=[], metavar="[NAME=]CSV",
        help="CSV id,label from one human annotator; repeatable",
    )
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    if not args.human:
        raise ConfigError("at least one --human label file is required")
    sample = read_records(require_file(args.sample, "validation sample"), AgreedRecord)
    machine = {r.id: r.label for r in sample}
    humans = {}
    for name, path in args.human:
        labels = read_human_labels(require_file(path, "human labels"))
        # label files may cover a whole corpus; only the sampled ids are compared
        humans[name] = {i: l for i, l in labels.items() if i in machine} if len(labels) > len(machine) else labels
    report = validation_report(machine, humans)

    body = report.to_json()
    path = stage_dir(cfg, "dataset") / "validation_report.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    kappas = ", ".join(f"{k}={v:.3f}" for k, v in report.kappa_per_human().items())
    return StageResult(
        summary=f"n={report.n} {kappas}",
        artifacts={"validation_report": path},
        extra={"kappa_per_human": report.kappa_per_human()},
        stdout=json.dumps(body, indent=2, sort_keys=True),
    )
