import pytest

from crisiskit.app.bench import (
    BenchConfig,
    BenchReport,
    format_speedup,
    render_table,
    run_benchmark,
    run_benchmark_concurrent,
    speedup_vs_baseline,
)
from crisiskit.app.encoder import EncoderModel, preset
from crisiskit.app.errors import ConfigError, DataError

QUICK = BenchConfig(batch_size=4, iterations=5, warmup=1, input_length=8)


def _report(tag: str, throughput: float, cfg: BenchConfig = BenchConfig()) -> BenchReport:
    spb = cfg.batch_size / throughput
    return BenchReport(
        tag=tag, config=cfg, seconds_per_batch=spb, throughput=throughput,
        p50_seconds=spb, p95_seconds=spb, environment="test",
    )


# ---------- Config ----------

def test_bench_defaults_and_limits():
    cfg = BenchConfig()
    assert (cfg.batch_size, cfg.iterations, cfg.warmup) == (32, 1000, 10)
    with pytest.raises(ValueError):
        BenchConfig(iterations=0)
    with pytest.raises(ValueError):
        BenchConfig(warmup=-1)


# ---------- Timing ----------

def test_report_identity(tiny_config):
    rep = run_benchmark(EncoderModel(tiny_config), QUICK, tag="tiny")
    assert rep.throughput * rep.seconds_per_batch == pytest.approx(QUICK.batch_size, rel=1e-12)
    assert rep.seconds_per_batch > 0 and rep.p50_seconds <= rep.p95_seconds
    assert rep.tag == "tiny" and rep.workers is None


def test_input_longer_than_positions(tiny_config):
    with pytest.raises(ConfigError):
        run_benchmark(EncoderModel(tiny_config), BenchConfig(iterations=1, input_length=64))


def test_concurrent_readers(tiny_config):
    rep = run_benchmark_concurrent(EncoderModel(tiny_config), QUICK, workers=2, tag="tiny")
    assert rep.workers == 2 and rep.aggregate_throughput > 0
    assert rep.throughput * rep.seconds_per_batch == pytest.approx(QUICK.batch_size)
    with pytest.raises(ConfigError):
        run_benchmark_concurrent(EncoderModel(tiny_config), QUICK, workers=0)


def test_throughput_follows_model_size():
    cfg = BenchConfig(batch_size=64, iterations=30, warmup=5, input_length=64)
    chain = ["desk-teacher", "desk-s_m", "desk-s_s", "desk-s_t"]
    reports = [run_benchmark(EncoderModel(preset(name, vocab_size=300)), cfg, tag=name) for name in chain]
    # compared on median latency
    median_throughput = [cfg.batch_size / r.p50_seconds for r in reports]
    assert median_throughput == sorted(median_throughput)
    assert reports[-1].throughput > reports[0].throughput


# ---------- Speedup ----------

def test_speedup_examples():
    base = _report("bert-base", 1050)
    assert speedup_vs_baseline(base, base) == 1.0
    assert format_speedup(speedup_vs_baseline(base, base)) == "x1.0"
    assert format_speedup(speedup_vs_baseline(_report("s_m", 3699), base)) == "x3.5"
    assert format_speedup(speedup_vs_baseline(_report("s_t", 19549), base)) == "x18.6"


def test_speedup_needs_matching_config():
    with pytest.raises(ConfigError):
        speedup_vs_baseline(_report("a", 10, QUICK), _report("b", 10))


def test_render_table():
    reports = [_report("teacher", 1050), _report("s_t", 19549)]
    text = render_table(reports, baseline="teacher")
    lines = text.splitlines()
    assert lines[0].split() == ["model", "batch_32", "(s)", "throughput", "(/s)", "speedup"]
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].startswith("teacher") and lines[2].endswith("-")
    assert lines[3].startswith("s_t") and "19,549" in lines[3] and lines[3].endswith("x18.6")
    assert len({len(l) for l in lines}) == 1
    with pytest.raises(ConfigError):
        render_table(reports, baseline="nope")
    with pytest.raises(DataError):
        render_table([])
