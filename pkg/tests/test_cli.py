import json
import os

import pytest

from crisiskit.app.main import dispatch
from crisiskit.app.synth import write_sample_data

QUICK = {
    "finetune": {"max_epochs": 2, "patience": 1, "repeats": 1},
    "task_distill": {"max_epochs": 2, "patience": 1},
    "generic_distill": {"batch_size": 64},
    "bench": {"iterations": 3, "warmup": 1, "input_length": 32},
    "tokenizer": {"max_length": 32},
}


def _clean_env(mp: pytest.MonkeyPatch, cwd) -> None:
    for key in [k for k in os.environ if k.startswith("CRISIS_")]:
        mp.delenv(key)
    mp.chdir(cwd)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Sample data, a tokenizer and a trained teacher shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    paths = write_sample_data(root / "sample", n=240, seed=0)
    cfg = root / "run.json"
    cfg.write_text(json.dumps(QUICK))
    out = root / "out"
    with pytest.MonkeyPatch.context() as mp:
        _clean_env(mp, root)
        base = ["--config", str(cfg), "--out", str(out)]
        assert dispatch(base + ["tokenizer", "--corpus", str(paths["labelled"]), "--vocab-size", "400"]) == 0
        assert dispatch(
            base + ["train-teacher", "--data", str(paths["labelled"]), "--tokenizer", str(out / "tokenizer")]
        ) == 0
    return {"root": root, "paths": paths, "out": out, "base": base}


@pytest.fixture()
def cli(pipeline, monkeypatch):
    _clean_env(monkeypatch, pipeline["root"])

    def run(*argv: str) -> int:
        return dispatch(pipeline["base"] + list(argv))

    return run


def _manifest(out, stage):
    return json.loads((out / f"{stage}.manifest.json").read_text())


# ---------- Dataset ----------

def test_build_dataset_and_validate(cli, pipeline, capsys):
    paths, out = pipeline["paths"], pipeline["out"]
    assert cli("build-dataset", "--annotations", str(paths["annotations"]), "--texts", str(paths["labelled"])) == 0
    counts = json.loads(capsys.readouterr().out)
    kept = [json.loads(l) for l in (out / "dataset" / "t_agree.jsonl").read_text().splitlines()]
    assert counts["kept"] == len(kept) and counts["kept"] + counts["dropped"] == 240
    assert all(r["text"] for r in kept)
    assert (out / "dataset" / "validation_sample.jsonl").exists()
    first = _manifest(out, "build-dataset")["manifest_hash"]

    assert cli("build-dataset", "--annotations", str(paths["annotations"]), "--texts", str(paths["labelled"])) == 0
    assert _manifest(out, "build-dataset")["manifest_hash"] == first

    sample = str(out / "dataset" / "validation_sample.jsonl")
    capsys.readouterr()
    assert cli("validate", "--sample", sample, "--human", f"h1={paths['human_1']}", "--human", str(paths["human_2"])) == 0
    body = json.loads(capsys.readouterr().out)
    assert set(body["kappa_per_human"]) == {"h1", "human_2"}
    assert all(k > 0.8 for k in body["kappa_per_human"].values())


# ---------- Models ----------

def test_tokenizer_and_teacher_artifacts(pipeline):
    out = pipeline["out"]
    tok = _manifest(out, "tokenizer")
    assert tok["extra"]["vocab_size"] <= 400 and tok["config"]["tokenizer"]["max_length"] == 32
    assert (out / "models" / "teacher" / "config.json").exists()
    metrics = json.loads((out / "models" / "teacher" / "metrics.json").read_text())
    assert 1 <= len(metrics["epochs"]) <= 2
    assert any(k.startswith("model/") for k in _manifest(out, "train-teacher")["artifacts"])


def test_task_and_generic_distill(cli, pipeline):
    paths, out = pipeline["paths"], pipeline["out"]
    teacher = str(out / "models" / "teacher")
    assert cli("distill", "--mode", "task", "--teacher", teacher, "--student", "desk-s_t", "--data", str(paths["labelled"])) == 0
    task_dir = out / "models" / "desk-s_t-task-mixed"
    assert (task_dir / "loss_trace.csv").exists()
    metrics = json.loads((task_dir / "metrics.json").read_text())
    assert metrics["alpha"] == 0.5 and metrics["variant"] == "mixed"

    assert cli(
        "distill", "--mode", "generic", "--teacher", teacher, "--student", "desk-s_t",
        "--corpus", str(paths["labelled"]), "--name", "s_t-generic",
    ) == 0
    extra = _manifest(out, "distill")["extra"]
    assert extra["steps"] >= 1 and extra["pooling"] == "mean"
    assert (out / "models" / "s_t-generic" / "projection" / "weights.bin").exists()

    assert cli(
        "finetune", "--data", str(paths["labelled"]), "--tokenizer", str(out / "tokenizer"),
        "--model", str(out / "models" / "s_t-generic"),
    ) == 0
    row = (out / "finetune" / "s_t-generic" / "crisis-help-offer.metrics.tsv").read_text()
    assert row.startswith("s_t-generic\tcrisis-help-offer\t")


def test_compare_pooling(cli, pipeline, capsys):
    out = pipeline["out"]
    assert cli(
        "compare-pooling", "--teacher", str(out / "models" / "teacher"), "--student", "desk-s_t",
        "--corpus", str(pipeline["paths"]["labelled"]),
    ) == 0
    assert (out / "pooling" / "desk-s_t" / "loss_traces.csv").exists()
    assert "mean" in capsys.readouterr().out


# ---------- Bench ----------

def test_bench_against_trained_teacher(cli, pipeline, capsys):
    assert cli("bench", "--model", "s_t=desk-s_t", "--baseline", "teacher") == 0
    printed = capsys.readouterr().out
    body = json.loads((pipeline["out"] / "bench" / "bench.json").read_text())
    assert [r["tag"] for r in body["reports"]] == ["teacher", "s_t"]
    assert body["speedup"]["teacher"] == 1.0
    assert "speedup" in printed and "x" in printed.splitlines()[-1]


# ---------- Analytics ----------

def test_analyze_and_plot(cli, pipeline, capsys):
    out = pipeline["out"]
    assert cli("analyze", "--corpus", str(pipeline["paths"]["geo"]), "--published-table", "--four-resources") == 0
    extra = _manifest(out, "analyze")["extra"]
    assert extra["published"]["flagged"] == ["IRL"]
    assert extra["records"] > 0
    trend = out / "analytics" / "trend_label.csv"
    assert trend.exists() and (out / "analytics" / "ro_country.csv").exists()

    assert cli("plot", "--trend", str(trend)) == 0
    svg = (out / "plots" / "trend_label.svg").read_text()
    assert svg.lstrip().startswith("<svg")


# ---------- Errors / ledger ----------

def test_usage_error_exits_two(cli):
    assert cli("bench") == 2
    assert cli("no-such-stage") == 2


def test_missing_input_is_one_json_line(cli, pipeline, capsys):
    capsys.readouterr()
    assert cli("tokenizer", "--corpus", str(pipeline["root"] / "nope.jsonl")) == 1
    last = capsys.readouterr().err.strip().splitlines()[-1]
    err = json.loads(last)
    assert err["error"] == "missing_input" and "nope.jsonl" in err["detail"]


def test_invalid_config_exits_one(pipeline, monkeypatch, capsys):
    _clean_env(monkeypatch, pipeline["root"])
    monkeypatch.setenv("CRISIS_TASK_DISTILL__ALPHA", "3")
    assert dispatch(["--out", str(pipeline["out"]), "history"]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "config"


def test_history_lists_runs(cli, capsys):
    capsys.readouterr()
    assert cli("history", "--limit", "50", "--stage", "train-teacher") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all("train-teacher" in l for l in lines)


def _last_error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_zero_repeats_is_a_config_error(cli, pipeline, capsys):
    capsys.readouterr()
    args = ["finetune", "--data", str(pipeline["paths"]["labelled"]), "--tokenizer", str(pipeline["out"] / "tokenizer")]
    for repeats in ("0", "-2"):
        assert cli(*args, "--model", "desk-s_t", "--repeats", repeats) == 1
        err = _last_error(capsys)
        assert err["error"] == "config" and "repeats" in err["detail"]


def test_unexpected_error_is_one_json_line(cli, pipeline, capsys):
    bad = pipeline["root"] / "ragged.csv"
    bad.write_text("month,Request\n2020-01,1\n2020-02,1,2,3\n")
    capsys.readouterr()
    assert cli("plot", "--trend", str(bad)) == 1
    err_lines = capsys.readouterr().err.strip().splitlines()
    assert not any(l.startswith("Traceback") for l in err_lines)
    err = json.loads(err_lines[-1])
    assert err["error"] == "internal" and "ParserError" in err["detail"]
