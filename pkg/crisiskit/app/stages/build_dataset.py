from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig, require_file
from ..corpus import read_records, write_jsonl
from ..dataset_builder import (
    SamplePlan,
    agreement_filter,
    agreement_rate,
    attach_texts,
    read_annotation_csv,
    stratified_validation_sample,
    write_counts,
)
from ..deps import StageResult, stage_dir, stage_seed

NAME = "build-dataset"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="unanimous-agreement filter over an annotation matrix")
    p.add_argument("--annotations", type=Path, required=True, help="CSV id,annotator_1,...,annotator_M")
    p.add_argument("--texts", type=Path, help="JSONL corpus supplying the text of each id")
    p.add_argument("--no-sample", action="store_true", help="skip drawing the validation sample")
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    matrix = read_annotation_csv(require_file(args.annotations, "annotation matrix"))
    result = agreement_filter(matrix)
    records = result.records
    if args.texts is not None:
        texts = {r.id: r.text for r in read_records(require_file(args.texts, "text corpus"))}
        records = attach_texts(records, texts)

    out = stage_dir(cfg, "dataset")
    artifacts = {
        "t_agree": write_jsonl(out / "t_agree.jsonl", records),
        "counts": write_counts(out / "counts.json", result),
    }
    summary = result.summary()
    extra = {"counts": summary, "pairwise": agreement_rate(matrix)}

    if not args.no_sample and records:
        plan = SamplePlan(
            population=len(records),
            margin=cfg.sample.margin,
            confidence=cfg.sample.confidence,
            forced_threshold=cfg.sample.forced_threshold,
            seed=stage_seed(cfg, "build-dataset/sample"),
        )
        sample = stratified_validation_sample(records, plan)
        artifacts["validation_sample"] = write_jsonl(out / "validation_sample.jsonl", sample.records)
        extra["sample"] = {"planned": plan.size, **sample.summary()}

    return StageResult(
        summary=f"kept {summary['kept']} of {result.total} rows",
        artifacts=artifacts,
        extra=extra,
        stdout=json.dumps(summary, indent=2, sort_keys=True),
    )
