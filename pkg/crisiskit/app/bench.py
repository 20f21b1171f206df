from __future__ import annotations

import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, model_validator
from torch import nn

from .corpus import SPECIAL_TOKENS
from .errors import ConfigError, DataError
from .render import render_bench_table

log = logging.getLogger("crisiskit.bench")

# ---- Config / report ---------------------------------------------------------

class BenchConfig(BaseModel):
    batch_size: int = 32
    iterations: int = 1000
    warmup: int = 10
    input_length: int = 64
    seed: int = 42

    @model_validator(mode="after")
    def _limits(self) -> "BenchConfig":
        if self.iterations < 1 or self.batch_size < 1 or self.input_length < 1:
            raise ValueError("iterations, batch_size and input_length must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        return self


class BenchReport(BaseModel):
    tag: str
    config: BenchConfig
    seconds_per_batch: float
    throughput: float
    p50_seconds: float
    p95_seconds: float
    environment: str
    workers: Optional[int] = None
    aggregate_throughput: Optional[float] = None

    @model_validator(mode="after")
    def _positive(self) -> "BenchReport":
        if self.seconds_per_batch <= 0 or self.throughput <= 0:
            raise ValueError("timings must be positive")
        return self


def environment_note() -> str:
    return f"{platform.machine()} python {platform.python_version()} torch {torch.__version__} threads={torch.get_num_threads()}"


def _synthetic_batch(vocab_size: int, cfg: BenchConfig) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(cfg.seed)
    low = len(SPECIAL_TOKENS) if vocab_size > len(SPECIAL_TOKENS) else 0
    ids = torch.randint(low, vocab_size, (cfg.batch_size, cfg.input_length), generator=gen)
    return ids, torch.ones_like(ids)


def _report(tag: str, cfg: BenchConfig, timings: Sequence[float], **extra) -> BenchReport:
    arr = np.asarray(timings, dtype=float)
    spb = float(arr.mean())
    return BenchReport(
        tag=tag,
        config=cfg,
        seconds_per_batch=spb,
        throughput=cfg.batch_size / spb,
        p50_seconds=float(np.percentile(arr, 50)),
        p95_seconds=float(np.percentile(arr, 95)),
        environment=environment_note(),
        **extra,
    )


# ---- Timing ------------------------------------------------------------------

@torch.inference_mode()
def run_benchmark(model: nn.Module, cfg: BenchConfig = BenchConfig(), tag: str = "model") -> BenchReport:
    """
    Single-stream forward-pass timing on a fixed synthetic batch. Warm-up passes are
    not timed; tokenization is not part of the measurement.
    """
    model.eval()
    config = model.config
    if cfg.input_length > config.max_positions:
        raise ConfigError(f"input_length {cfg.input_length} exceeds max_positions {config.max_positions}")
    ids, mask = _synthetic_batch(config.vocab_size, cfg)
    for _ in range(cfg.warmup):
        model(ids, mask)
    timings = []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        model(ids, mask)
        timings.append(time.perf_counter() - t0)
    rep = _report(tag, cfg, timings)
    log.info("%s: %.5f s/batch, %.0f samples/s", tag, rep.seconds_per_batch, rep.throughput)
    return rep


def run_benchmark_concurrent(
    model: nn.Module, cfg: BenchConfig = BenchConfig(), workers: int = 2, tag: str = "model"
) -> BenchReport:
    """
    `workers` threads share the frozen model and split cfg.iterations between them.
    Per-batch latency comes from the individual calls; aggregate_throughput is
    total samples over wall time.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    model.eval()
    ids, mask = _synthetic_batch(model.config.vocab_size, cfg)
    share = [cfg.iterations // workers + (1 if i < cfg.iterations % workers else 0) for i in range(workers)]

    def reader(n: int) -> list[float]:
        out = []
        with torch.inference_mode():
            for _ in range(n):
                t0 = time.perf_counter()
                model(ids, mask)
                out.append(time.perf_counter() - t0)
        return out

    with torch.inference_mode():
        for _ in range(cfg.warmup):
            model(ids, mask)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(reader, [n for n in share if n]))
    wall = time.perf_counter() - start
    timings = [t for c in chunks for t in c]
    agg = cfg.batch_size * len(timings) / wall
    log.info("%s: %d workers, aggregate %.0f samples/s", tag, workers, agg)
    return _report(tag, cfg, timings, workers=workers, aggregate_throughput=agg)


# ---- Comparison --------------------------------------------------------------

def speedup_vs_baseline(report: BenchReport, baseline: BenchReport) -> float:
    if report.config != baseline.config:
        raise ConfigError(f"{report.tag} and {baseline.tag} were measured under different bench configs")
    return report.throughput / baseline.throughput


def format_speedup(factor: float) -> str:
    return f"x{factor:.1f}"


def render_table(reports: Sequence[BenchReport], baseline: Optional[str] = None) -> str:
    """Aligned text table: seconds per batch, throughput, speedup over the baseline tag."""
    if not reports:
        raise DataError("no reports to tabulate")
    base = None
    if baseline is not None:
        base = next((r for r in reports if r.tag == baseline), None)
        if base is None:
            raise ConfigError(f"baseline {baseline!r} not among reports {[r.tag for r in reports]}")
    rows = []
    for r in reports:
        if base is None or r is base:
            delta = "-"
        else:
            delta = format_speedup(speedup_vs_baseline(r, base))
        rows.append({"tag": r.tag, "spb": f"{r.seconds_per_batch:.4f}", "tput": f"{r.throughput:,.0f}", "delta": delta})
    return render_bench_table(rows, batch_size=reports[0].config.batch_size)
