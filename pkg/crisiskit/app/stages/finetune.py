from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig
from ..deps import (
    StageResult,
    class_names_for,
    classifier_factory,
    load_splits,
    load_tokenizer,
    revalidated,
    stage_dir,
    stage_seed,
)
from ..finetune import FinetuneTask, repeat_with_ci

NAME = "finetune"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="repeated fine-tuning with a confidence interval on test macro F1")
    p.add_argument("--data", type=Path, required=True, help="labelled JSONL")
    p.add_argument("--tokenizer", type=Path, required=True, help="tokenizer directory")
    p.add_argument("--model", required=True, help="preset name or model directory to start from")
    p.add_argument("--task", default="crisis-help-offer", help="task name used in the report")
    p.add_argument("--label-set", choices=("crisis", "resource"), default="crisis", dest="label_set")
    p.add_argument("--repeats", type=int, help="overrides finetune.repeats")
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    update = {"seed": stage_seed(cfg, NAME)}
    if args.repeats is not None:
        update["repeats"] = args.repeats
    ft = revalidated(cfg.finetune, **update)

    tok = load_tokenizer(args.tokenizer)
    splits = load_splits(cfg, tok, args.data, args.label_set)

    model_name = Path(args.model).name
    task = FinetuneTask(
        name=args.task,
        model_name=model_name,
        build_model=classifier_factory(args.model, tok, class_names_for(args.label_set), cfg.tokenizer.max_length),
        splits=splits,
    )
    report, _ = repeat_with_ci(task, ft)

    out = stage_dir(cfg, "finetune", model_name)
    json_path = out / f"{args.task}.metrics.json"
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    tsv_path = out / f"{args.task}.metrics.tsv"
    tsv_path.write_text(report.to_tsv_row() + "\n", encoding="utf-8")
    return StageResult(
        summary=report.to_tsv_row(),
        artifacts={"metrics": json_path, "row": tsv_path},
        extra={"macro_f1_mean": report.macro_f1_mean, "ci_half_width": report.ci_half_width},
        stdout=report.to_tsv_row(),
    )
