from __future__ import annotations

import argparse
import json
from pathlib import Path

from torch import nn

from ..bench import render_table, run_benchmark, run_benchmark_concurrent, speedup_vs_baseline
from ..config import RunConfig
from ..deps import StageResult, encoder_config, load_encoder, stage_dir, stage_seed
from ..encoder import EncoderModel
from ..numcore import seed_everything

NAME = "bench"


def _model_arg(raw: str) -> tuple[str, str]:
    tag, sep, spec = raw.partition("=")
    return (tag, spec) if sep else (Path(raw).name, raw)


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="inference latency / throughput with speedup over a baseline")
    p.add_argument(
        "--model", action="append", type=_model_arg, required=True, metavar="[TAG=]MODEL",
        help="model directory, trained model name under out/models, or preset; repeatable",
    )
    p.add_argument("--baseline", help="tag used as the speedup denominator; resolved like --model if not listed")
    p.add_argument("--workers", type=int, help="also measure aggregate throughput with this many readers")
    p.set_defaults(handler=run, stage=NAME)


def resolve_model(cfg: RunConfig, spec: str) -> nn.Module:
    """
    Lookup order:
      1) a model directory path
      2) out/models/<spec> from an earlier stage
      3) bundled preset, randomly initialised (timing does not depend on weights)
    """
    p = Path(spec)
    if p.is_dir():
        return load_encoder(p)
    trained = Path(cfg.out) / "models" / spec
    if trained.is_dir():
        return load_encoder(trained)
    config = encoder_config(spec)
    if config.max_positions < cfg.bench.input_length:
        config = config.model_copy(update={"max_positions": cfg.bench.input_length})
    return EncoderModel(config)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    targets = list(args.model)
    if args.baseline and args.baseline not in {t for t, _ in targets}:
        targets.insert(0, (args.baseline, args.baseline))
    bcfg = cfg.bench.model_copy(update={"seed": stage_seed(cfg, NAME)})

    reports = []
    for tag, spec in targets:
        seed_everything(bcfg.seed)
        model = resolve_model(cfg, spec)
        if args.workers:
            reports.append(run_benchmark_concurrent(model, bcfg, args.workers, tag=tag))
        else:
            reports.append(run_benchmark(model, bcfg, tag=tag))

    table = render_table(reports, args.baseline)
    body = {"reports": [r.model_dump(mode="json") for r in reports], "baseline": args.baseline}
    if args.baseline:
        base = next(r for r in reports if r.tag == args.baseline)
        body["speedup"] = {r.tag: speedup_vs_baseline(r, base) for r in reports}

    out = stage_dir(cfg, "bench")
    json_path = out / "bench.json"
    json_path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    table_path = out / "bench.txt"
    table_path.write_text(table, encoding="utf-8")
    return StageResult(
        summary=", ".join(f"{r.tag}={r.throughput:.0f}/s" for r in reports),
        artifacts={"report": json_path, "table": table_path},
        extra={"speedup": body.get("speedup", {})},
        stdout=json.dumps(body, indent=2, sort_keys=True) + "\n" + table,
    )
