from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig
from ..deps import (
    StageResult,
    classifier_factory,
    corpus_tensors,
    encoder_config,
    load_classifier,
    load_encoder,
    load_splits,
    load_tokenizer,
    stage_dir,
    stage_seed,
)
from ..distill import TaskDistillConfig, distill_generic, distill_task
from ..encoder import DownsampleProjection, EncoderModel, save_model
from ..errors import ConfigError
from ..finetune import evaluate
from ..numcore import save_checkpoint, seed_everything

NAME = "distill"
VARIANTS = ("mixed", "soft", "hard")


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="task-specific or generic knowledge distillation into a student")
    p.add_argument("--mode", choices=("task", "generic"), required=True)
    p.add_argument("--teacher", type=Path, required=True, help="teacher model directory")
    p.add_argument("--student", required=True, help="student preset name")
    p.add_argument("--tokenizer", type=Path, help="tokenizer directory (defaults to the teacher's)")
    p.add_argument("--data", type=Path, help="labelled JSONL (task mode)")
    p.add_argument("--corpus", type=Path, help="unlabelled JSONL (generic mode)")
    p.add_argument("--variant", choices=VARIANTS, default="mixed", help="task mode: soft (alpha=1), hard (alpha=0, teacher labels) or the configured mix")
    p.add_argument("--name", help="output directory name under models/")
    p.set_defaults(handler=run, stage=NAME)


def _task_config(cfg: RunConfig, variant: str, seed: int) -> TaskDistillConfig:
    base = cfg.task_distill.model_dump()
    base["seed"] = seed
    if variant == "soft":
        return TaskDistillConfig.soft(**{k: v for k, v in base.items() if k != "alpha"})
    if variant == "hard":
        return TaskDistillConfig.hard(**{k: v for k, v in base.items() if k not in ("alpha", "hard_label_source")})
    return TaskDistillConfig(**base)


def _run_task(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    if args.data is None:
        raise ConfigError("task distillation needs --data")
    teacher, teacher_tok = load_classifier(args.teacher)
    tok = load_tokenizer(args.tokenizer) if args.tokenizer else teacher_tok
    if tok is None:
        raise ConfigError(f"{args.teacher} carries no tokenizer; pass --tokenizer")
    name = args.name or f"{args.student}-task-{args.variant}"
    seed = stage_seed(cfg, f"{NAME}/task/{name}")
    tcfg = _task_config(cfg, args.variant, seed)

    splits = load_splits(cfg, tok, args.data)
    gen = seed_everything(seed)
    student = classifier_factory(args.student, tok, teacher.class_names, cfg.tokenizer.max_length)()
    result, trace = distill_task(teacher, student, splits[0], splits[1], tcfg, generator=gen)

    student_test = evaluate(result.model, splits[2])
    teacher_test = evaluate(teacher, splits[2])
    out = stage_dir(cfg, "models", name)
    save_model(result.model, out, tokenizer=tok)
    trace_path = trace.write_csv(out / "loss_trace.csv")
    extra = {
        "variant": args.variant,
        "alpha": tcfg.alpha,
        "temperature": tcfg.temperature,
        "hard_label_source": tcfg.hard_label_source.value,
        "best_epoch": result.best_epoch,
        "student_test_macro_f1": student_test.macro_f1,
        "teacher_test_macro_f1": teacher_test.macro_f1,
    }
    (out / "metrics.json").write_text(json.dumps(extra, indent=2, sort_keys=True), encoding="utf-8")
    return StageResult(
        summary=f"{name}: student {student_test.macro_f1:.4f} vs teacher {teacher_test.macro_f1:.4f}",
        artifacts={"model": out, "trace": trace_path},
        extra=extra,
    )


def _run_generic(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    if args.corpus is None:
        raise ConfigError("generic distillation needs --corpus")
    teacher = load_encoder(args.teacher)
    tok = load_tokenizer(args.tokenizer or args.teacher)
    max_len = min(cfg.tokenizer.max_length, teacher.config.max_positions)
    corpus = corpus_tensors(args.corpus, tok, max_len)

    name = args.name or f"{args.student}-generic-{cfg.generic_distill.pooling.value}"
    seed = stage_seed(cfg, f"{NAME}/generic/{name}")
    gcfg = cfg.generic_distill.model_copy(update={"seed": seed})
    gen = seed_everything(seed)
    student_cfg = encoder_config(args.student).model_copy(
        update={"vocab_size": teacher.config.vocab_size, "max_positions": teacher.config.max_positions}
    )
    student = EncoderModel(student_cfg)
    D = DownsampleProjection(teacher.config.hidden_size, student_cfg.hidden_size)
    res = distill_generic(teacher, student, D, corpus, gcfg, generator=gen, tag=f"generic/{name}")

    out = stage_dir(cfg, "models", name)
    save_model(res.student, out, tokenizer=tok)
    save_checkpoint(out / "projection", D.state_dict())
    trace_path = res.trace.write_csv(out / "loss_trace.csv")
    extra = {
        "steps": len(res.trace),
        "initial_smoothed": res.trace.initial_smoothed,
        "final_smoothed": res.trace.final_smoothed,
        "pooling": gcfg.pooling.value,
    }
    return StageResult(
        summary=f"{name}: smoothed MSE {res.trace.initial_smoothed:.5f} -> {res.trace.final_smoothed:.5f}",
        artifacts={"model": out, "trace": trace_path},
        extra=extra,
    )


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    return _run_task(cfg, args) if args.mode == "task" else _run_generic(cfg, args)
