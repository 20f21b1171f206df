import copy
import math

import pytest
import torch
from torch import nn

from crisiskit.app.corpus import encode_batch, normalized_texts
from crisiskit.app.distill import (
    GenericDistillConfig,
    HardLabelSource,
    LossTrace,
    TaskDistillConfig,
    compare_pooling,
    distill_generic,
    distill_task,
    ema,
    frozen,
    generic_distill_loss,
    task_distill_loss,
    write_traces,
)
from crisiskit.app.encoder import DownsampleProjection, EncoderModel, PoolingMode, SequenceClassifier
from crisiskit.app.errors import ConfigError, DataError, DivergenceError
from crisiskit.app.finetune import FinetuneConfig, evaluate, finetune_run
from crisiskit.app.numcore import cross_entropy, seed_everything


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class ScalarStudent(nn.Module):
    """Token embedding = w · token id, width 1."""

    def __init__(self, w: float):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w))

    def forward(self, ids, mask):
        return self.w * ids.to(torch.float32).unsqueeze(-1)


# ---------- Configs / traces ----------

def test_task_config_bounds_and_variants():
    assert TaskDistillConfig().alpha == 0.5 and TaskDistillConfig().temperature == 1.0
    with pytest.raises(ValueError):
        TaskDistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TaskDistillConfig(temperature=0)
    assert TaskDistillConfig.soft().alpha == 1.0
    hard = TaskDistillConfig.hard()
    assert hard.alpha == 0.0 and hard.hard_label_source is HardLabelSource.TEACHER


def test_generic_config():
    cfg = GenericDistillConfig(pooling="cls")
    assert cfg.pooling is PoolingMode.CLS
    assert GenericDistillConfig().batch_size == 1024 and GenericDistillConfig().learning_rate == 2e-4
    with pytest.raises(ValueError):
        GenericDistillConfig(epochs=0)
    with pytest.raises(ValueError):
        GenericDistillConfig(pooling="max")


def test_loss_trace_invariants(tmp_path):
    trace = LossTrace(tag="a")
    trace.append(1, 2.0)
    trace.append(3, 1.0)
    with pytest.raises(DataError):
        trace.append(3, 0.5)
    with pytest.raises(DivergenceError):
        trace.append(4, math.nan)
    assert trace.smoothed(0.5) == [2.0, 1.5]
    assert ema([1.0, 0.0, 0.0], 0.5) == [1.0, 0.5, 0.25]

    other = LossTrace(tag="b", steps=[1, 2], losses=[0.3, 0.2])
    back = LossTrace.read_csv(write_traces(tmp_path / "traces.csv", [trace, other]))
    assert [t.tag for t in back] == ["a", "b"]
    assert back[0].steps == [1, 3] and back[1].losses == pytest.approx([0.3, 0.2])
    with pytest.raises(DataError):
        LossTrace(tag="empty").final_smoothed


def test_frozen_restores_flags(tiny_config):
    model = SequenceClassifier.from_config(tiny_config).train()
    with frozen(model):
        assert not model.training
        assert not any(p.requires_grad for p in model.parameters())
    assert model.training
    assert all(p.requires_grad for p in model.parameters())


# ---------- Task-specific ----------

def test_task_loss_degenerate_weights():
    t = torch.tensor([[1.0, 0.0, -1.0, 0.5]])
    s = torch.tensor([[0.2, 0.1, 0.0, -0.3]])
    y = torch.tensor([2])
    w = torch.tensor([1.0, 2.0, 0.5, 1.0])
    assert torch.equal(task_distill_loss(t, s, y, alpha=0.0, weights=w), cross_entropy(s, y, w))
    assert task_distill_loss(t, t, y, alpha=1.0, temperature=2.0).item() == 0.0
    mixed = task_distill_loss(t, s, y, alpha=0.25)
    assert mixed.item() == pytest.approx(
        0.25 * task_distill_loss(t, s, y, 1.0).item() + 0.75 * cross_entropy(s, y).item()
    )


def test_copied_student_starts_at_zero_soft_loss(splits, tiny_config):
    teacher = SequenceClassifier.from_config(tiny_config).eval()
    student = copy.deepcopy(teacher)
    ids, mask = splits[0].ids[:8], splits[0].mask[:8]
    with torch.no_grad():
        loss = task_distill_loss(teacher(ids, mask), student(ids, mask), splits[0].labels[:8], alpha=1.0)
    assert loss.item() == 0.0


def test_alpha_zero_matches_finetuning(splits, tiny_config):
    teacher = SequenceClassifier.from_config(tiny_config)
    torch.manual_seed(3)
    start = SequenceClassifier.from_config(tiny_config)
    a, b = copy.deepcopy(start), copy.deepcopy(start)

    ft = finetune_run(
        a, splits, FinetuneConfig(learning_rate=1e-3, batch_size=32, max_epochs=2, patience=1),
        generator=seed_everything(5),
    )
    kd, trace = distill_task(
        teacher, b, splits[0], splits[1],
        TaskDistillConfig(alpha=0.0, learning_rate=1e-3, batch_size=32, max_epochs=2, patience=1),
        generator=seed_everything(5),
    )
    assert kd.steps == ft.steps
    assert trace.losses == [loss for _, loss in ft.steps]


def test_teacher_is_untouched(splits, tiny_config):
    teacher = SequenceClassifier.from_config(tiny_config)
    before = _snapshot(teacher)
    student = SequenceClassifier.from_config(tiny_config)
    cfg = TaskDistillConfig(learning_rate=1e-3, batch_size=64, max_epochs=2, patience=1)
    _, trace = distill_task(teacher, student, splits[0], splits[1], cfg, generator=seed_everything(0))
    after = _snapshot(teacher)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in teacher.parameters())
    assert len(trace) > 0 and all(math.isfinite(x) for x in trace.losses)


def test_tokenizer_and_vocab_mismatch(splits, tiny_config):
    teacher = SequenceClassifier.from_config(tiny_config, tokenizer_fingerprint="aaa")
    student = SequenceClassifier.from_config(tiny_config, tokenizer_fingerprint="bbb")
    with pytest.raises(ConfigError, match="different tokenizers"):
        distill_task(teacher, student, splits[0], splits[1])
    wider = SequenceClassifier.from_config(tiny_config.model_copy(update={"vocab_size": tiny_config.vocab_size + 1}))
    with pytest.raises(ConfigError, match="vocabulary"):
        distill_task(SequenceClassifier.from_config(tiny_config), wider, splits[0], splits[1])


def test_distilled_student_tracks_teacher(splits, small_config, tiny_config):
    teacher = SequenceClassifier.from_config(small_config)
    finetune_run(
        teacher, splits, FinetuneConfig(learning_rate=3e-3, batch_size=16, max_epochs=20, patience=5),
        generator=seed_everything(1),
    )
    student = SequenceClassifier.from_config(tiny_config)
    cfg = TaskDistillConfig(learning_rate=5e-3, batch_size=16, max_epochs=25, patience=6)
    distill_task(teacher, student, splits[0], splits[1], cfg, generator=seed_everything(2))
    teacher_f1 = evaluate(teacher, splits[2]).macro_f1
    student_f1 = evaluate(student, splits[2]).macro_f1
    assert student_f1 >= teacher_f1 - 0.05


# ---------- Generic ----------

def test_generic_loss_zero_when_everything_is_zero(tiny_config, small_config):
    teacher = EncoderModel(small_config)
    student = EncoderModel(tiny_config)
    last = student.layers[-1].ffn_norm
    D = DownsampleProjection(32, 16)
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
        D.weight.zero_()
        D.bias.zero_()
    ids = torch.randint(0, tiny_config.vocab_size, (4, 10))
    loss = generic_distill_loss(teacher, student, D, ids, torch.ones_like(ids), PoolingMode.MEAN)
    assert loss.item() == 0.0


def test_generic_loss_ignores_batch_order(tiny_config, small_config):
    teacher, student = EncoderModel(small_config).eval(), EncoderModel(tiny_config).eval()
    D = DownsampleProjection(32, 16)
    ids = torch.randint(0, tiny_config.vocab_size, (6, 10))
    mask = torch.ones_like(ids)
    mask[2, 7:] = 0
    perm = torch.tensor([5, 3, 0, 1, 4, 2])
    with torch.no_grad():
        a = generic_distill_loss(teacher, student, D, ids, mask, PoolingMode.MEAN)
        b = generic_distill_loss(teacher, student, D, ids[perm], mask[perm], PoolingMode.MEAN)
    assert a.item() == pytest.approx(b.item(), rel=1e-5)


def test_single_sample_step_matches_closed_form(tiny_config):
    teacher = EncoderModel(tiny_config)
    D = DownsampleProjection(tiny_config.hidden_size, 1)
    student = ScalarStudent(0.1)
    ids = torch.tensor([[2, 5, 3]])
    mask = torch.ones_like(ids)
    with torch.no_grad():
        target = D(teacher(ids, mask).mean(dim=1)).item()
    x = 10 / 3
    grad = -2 * x * (target - 0.1 * x)
    lr = 0.1
    distill_generic(teacher, student, D, (ids, mask), GenericDistillConfig(learning_rate=lr, batch_size=1))
    # first Adam step: lr · g / (|g| + eps)
    assert student.w.item() == pytest.approx(0.1 - lr * grad / (abs(grad) + 1e-8), abs=1e-6)


def test_generic_distillation_reduces_loss(records, tokenizer, tiny_config, small_config):
    corpus = encode_batch(tokenizer, list(normalized_texts(records)), max_length=32)
    teacher = EncoderModel(small_config)
    before = _snapshot(teacher)
    student = EncoderModel(tiny_config)
    D = DownsampleProjection(32, 16)
    cfg = GenericDistillConfig(learning_rate=1e-3, batch_size=32, epochs=4)
    res = distill_generic(teacher, student, D, corpus, cfg, generator=seed_everything(0))
    assert len(res.trace) == 4 * math.ceil(len(records) / 32)
    assert res.trace.final_smoothed < res.trace.initial_smoothed
    assert all(torch.equal(before[k], v) for k, v in teacher.state_dict().items())


def test_generic_rejects_empty_corpus(tiny_config, small_config):
    empty = (torch.zeros(0, 8, dtype=torch.long), torch.zeros(0, 8, dtype=torch.long))
    with pytest.raises(DataError, match="empty corpus"):
        distill_generic(EncoderModel(small_config), EncoderModel(tiny_config), DownsampleProjection(32, 16), empty)


# ---------- Pooling comparison ----------

def test_compare_pooling_reports_both_modes(records, tokenizer, tiny_config, small_config):
    corpus = encode_batch(tokenizer, list(normalized_texts(records[:96])), max_length=32)
    teacher = EncoderModel(small_config)
    cfg = GenericDistillConfig(learning_rate=1e-3, batch_size=32, epochs=1)
    report, traces = compare_pooling(teacher, lambda: EncoderModel(tiny_config), 16, corpus, cfg)
    assert [r.mode for r in report.runs] == [PoolingMode.MEAN, PoolingMode.CLS]
    assert math.isfinite(report.mean_pool_final_loss) and math.isfinite(report.cls_final_loss)
    assert len(traces) == 2 and traces[0].tag != traces[1].tag
    assert set(report.summary()) == {"runs", "mean_pool_final_loss", "cls_final_loss"}

    same, _ = compare_pooling(
        teacher, lambda: EncoderModel(tiny_config), 16, corpus, cfg, modes=(PoolingMode.MEAN, PoolingMode.MEAN)
    )
    assert same.runs[0].final_loss == same.runs[1].final_loss
