from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig
from ..deps import StageResult, class_names_for, classifier_factory, load_splits, load_tokenizer, stage_dir, stage_seed
from ..encoder import save_model
from ..finetune import evaluate, finetune_run
from ..numcore import seed_everything

NAME = "train-teacher"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="fine-tune the teacher classifier that task distillation learns from")
    p.add_argument("--data", type=Path, required=True, help="labelled JSONL")
    p.add_argument("--tokenizer", type=Path, required=True, help="tokenizer directory")
    p.add_argument("--preset", default="desk-teacher", help="architecture preset or model directory")
    p.add_argument("--label-set", choices=("crisis", "resource"), default="crisis", dest="label_set")
    p.add_argument("--name", default="teacher", help="output directory name under models/")
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    tok = load_tokenizer(args.tokenizer)
    splits = load_splits(cfg, tok, args.data, args.label_set)
    build = classifier_factory(args.preset, tok, class_names_for(args.label_set), cfg.tokenizer.max_length)

    gen = seed_everything(stage_seed(cfg, f"{NAME}/{args.name}"))
    model = build()
    result = finetune_run(model, splits, cfg.finetune, generator=gen)
    test = evaluate(result.model, splits[2])

    out = stage_dir(cfg, "models", args.name)
    save_model(result.model, out, tokenizer=tok)
    metrics = {
        "model": args.name,
        "architecture": model.config.describe(),
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_val_f1,
        "test_macro_f1": test.macro_f1,
        "per_class": {k: v.model_dump() for k, v in test.per_class.items()},
        "epochs": [e.model_dump() for e in result.epochs],
    }
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    return StageResult(
        summary=f"{args.name}: test macro F1 {test.macro_f1:.4f} (best epoch {result.best_epoch})",
        artifacts={"model": out},
        extra={"test_macro_f1": test.macro_f1, "best_epoch": result.best_epoch},
    )
