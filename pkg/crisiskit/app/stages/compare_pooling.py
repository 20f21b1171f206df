from __future__ import annotations

import argparse
import json
from pathlib import Path

from ..config import RunConfig
from ..deps import StageResult, corpus_tensors, encoder_config, load_encoder, load_tokenizer, stage_dir, stage_seed
from ..distill import compare_pooling, write_traces
from ..encoder import EncoderModel, PoolingMode

NAME = "compare-pooling"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="generic distillation once per student pooling mode, same seed")
    p.add_argument("--teacher", type=Path, required=True, help="teacher model directory")
    p.add_argument("--student", required=True, help="student preset name")
    p.add_argument("--corpus", type=Path, required=True, help="unlabelled JSONL")
    p.add_argument("--tokenizer", type=Path, help="tokenizer directory (defaults to the teacher's)")
    p.add_argument(
        "--modes", nargs="+", type=PoolingMode.parse, default=[PoolingMode.MEAN, PoolingMode.CLS],
        help="pooling modes to compare",
    )
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    teacher = load_encoder(args.teacher)
    tok = load_tokenizer(args.tokenizer or args.teacher)
    corpus = corpus_tensors(args.corpus, tok, min(cfg.tokenizer.max_length, teacher.config.max_positions))
    student_cfg = encoder_config(args.student).model_copy(
        update={"vocab_size": teacher.config.vocab_size, "max_positions": teacher.config.max_positions}
    )
    gcfg = cfg.generic_distill.model_copy(update={"seed": stage_seed(cfg, f"{NAME}/{args.student}")})
    report, traces = compare_pooling(
        teacher, lambda: EncoderModel(student_cfg), student_cfg.hidden_size, corpus, gcfg, modes=args.modes
    )

    out = stage_dir(cfg, "pooling", args.student)
    body = report.summary()
    report_path = out / "pooling_report.json"
    report_path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    traces_path = write_traces(out / "loss_traces.csv", traces)
    losses = ", ".join(f"{r.mode.value}={r.final_loss:.5f}" for r in report.runs)
    return StageResult(
        summary=f"{args.student}: final smoothed loss {losses}",
        artifacts={"report": report_path, "traces": traces_path},
        extra=body,
        stdout=json.dumps(body, indent=2, sort_keys=True),
    )
