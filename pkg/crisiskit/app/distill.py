from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import pandas as pd
import torch
from pydantic import BaseModel, field_validator, model_validator
from torch import nn

from .encoder import DownsampleProjection, EncoderModel, PoolingMode, SequenceClassifier, pool, project_down
from .errors import ConfigError, DataError, DivergenceError
from .finetune import LabelledData, TrainResult, class_weight_tensor, train_with_early_stopping
from .numcore import AdamState, adam_step, cross_entropy, kl_divergence, mse, seed_everything

log = logging.getLogger("crisiskit.distill")

EMA_FACTOR = 0.98

# ---- Configs -----------------------------------------------------------------

class HardLabelSource(str, Enum):
    GOLD = "gold"
    TEACHER = "teacher"


class TaskDistillConfig(BaseModel):
    alpha: float = 0.5
    temperature: float = 1.0
    learning_rate: float = 2e-5
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    hard_label_source: HardLabelSource = HardLabelSource.GOLD
    class_weighted: bool = True
    seed: int = 42

    @field_validator("alpha")
    @classmethod
    def _alpha_range(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        return v

    @model_validator(mode="after")
    def _limits(self) -> "TaskDistillConfig":
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self

    @classmethod
    def soft(cls, **kw) -> "TaskDistillConfig":
        """Teacher logits only."""
        return cls(**{"alpha": 1.0, **kw})

    @classmethod
    def hard(cls, **kw) -> "TaskDistillConfig":
        """Teacher argmax labels only."""
        return cls(**{"alpha": 0.0, "hard_label_source": HardLabelSource.TEACHER, **kw})


class GenericDistillConfig(BaseModel):
    pooling: PoolingMode = PoolingMode.MEAN
    learning_rate: float = 2e-4
    batch_size: int = 1024
    epochs: int = 1
    seed: int = 42
    log_every: int = 50

    @field_validator("pooling", mode="before")
    @classmethod
    def _parse_pooling(cls, v):
        try:
            return PoolingMode.parse(v)
        except ConfigError as e:
            raise ValueError(e.detail) from e

    @model_validator(mode="after")
    def _limits(self) -> "GenericDistillConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        return self


# ---- Loss traces -------------------------------------------------------------

@dataclass
class LossTrace:
    tag: str
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise DataError(f"trace steps must increase ({step} after {self.steps[-1]})")
        if not math.isfinite(loss):
            raise DivergenceError()
        self.steps.append(step)
        self.losses.append(float(loss))

    def __len__(self) -> int:
        return len(self.steps)

    def smoothed(self, factor: float = EMA_FACTOR) -> list[float]:
        return ema(self.losses, factor)

    @property
    def initial_smoothed(self) -> float:
        return self.smoothed()[0]

    @property
    def final_smoothed(self) -> float:
        if not self.losses:
            raise DataError(f"trace {self.tag!r} is empty")
        return self.smoothed()[-1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": self.steps, "loss": self.losses, "tag": self.tag})

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def read_csv(cls, path: Path) -> list["LossTrace"]:
        """One trace per tag, in order of first appearance."""
        df = pd.read_csv(path)
        out = []
        for tag, grp in df.groupby("tag", sort=False):
            out.append(cls(tag=str(tag), steps=grp["step"].astype(int).tolist(), losses=grp["loss"].astype(float).tolist()))
        return out


def ema(values: Sequence[float], factor: float = EMA_FACTOR) -> list[float]:
    out: list[float] = []
    for v in values:
        out.append(v if not out else factor * out[-1] + (1 - factor) * v)
    return out


def write_traces(path: Path, traces: Sequence[LossTrace]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat([t.to_frame() for t in traces], ignore_index=True).to_csv(path, index=False)
    return path


# ---- Teacher freezing --------------------------------------------------------

@contextmanager
def frozen(model: nn.Module) -> Iterator[nn.Module]:
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


# ---- Task-specific distillation ----------------------------------------------

def _check_compatible(teacher: SequenceClassifier, student: SequenceClassifier) -> None:
    t_fp, s_fp = teacher.tokenizer_fingerprint, student.tokenizer_fingerprint
    if t_fp and s_fp and t_fp != s_fp:
        raise ConfigError("teacher and student were built against different tokenizers")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError(
            f"vocabulary mismatch: teacher {teacher.config.vocab_size}, student {student.config.vocab_size}"
        )
    if teacher.config.num_classes != student.config.num_classes:
        raise ConfigError("teacher and student disagree on the number of classes")


def task_distill_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    hard_labels: torch.Tensor,
    alpha: float,
    temperature: float = 1.0,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """alpha·KL(teacher ‖ student at T) + (1−alpha)·CE(student, hard); a zero-weight term is dropped."""
    if alpha == 1.0:
        return kl_divergence(teacher_logits, student_logits, temperature)
    ce = cross_entropy(student_logits, hard_labels, weights)
    if alpha == 0.0:
        return ce
    return alpha * kl_divergence(teacher_logits, student_logits, temperature) + (1 - alpha) * ce


def distill_task(
    teacher: SequenceClassifier,
    student: SequenceClassifier,
    train: LabelledData,
    val: LabelledData,
    cfg: TaskDistillConfig = TaskDistillConfig(),
    generator: Optional[torch.Generator] = None,
) -> tuple[TrainResult, LossTrace]:
    _check_compatible(teacher, student)
    weights = class_weight_tensor(train.labels, student.config.num_classes) if cfg.class_weighted else None
    tag = f"task/alpha={cfg.alpha:g}/T={cfg.temperature:g}/{cfg.hard_label_source.value}"

    with frozen(teacher):

        def batch_loss(ids, mask, y):
            with torch.no_grad():
                t_logits = teacher(ids, mask)
            s_logits = student(ids, mask)
            hard = y if cfg.hard_label_source is HardLabelSource.GOLD else t_logits.argmax(dim=-1)
            return task_distill_loss(t_logits, s_logits, hard, cfg.alpha, cfg.temperature, weights)

        result = train_with_early_stopping(
            student,
            batch_loss,
            train,
            val,
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            max_epochs=cfg.max_epochs,
            patience=cfg.patience,
            min_delta=cfg.min_delta,
            generator=generator,
            name="distill-task",
        )

    trace = LossTrace(tag=tag)
    for step, loss in result.steps:
        trace.append(step, loss)
    return result, trace


# ---- Generic distillation ----------------------------------------------------

@dataclass
class GenericResult:
    student: nn.Module
    projection: DownsampleProjection
    trace: LossTrace


def generic_distill_loss(
    teacher: EncoderModel,
    student: nn.Module,
    D: DownsampleProjection,
    ids: torch.Tensor,
    mask: torch.Tensor,
    pooling: PoolingMode,
) -> torch.Tensor:
    """MSE between the projected mean-pooled teacher embedding and the pooled student embedding."""
    with torch.no_grad():
        teacher_pooled = pool(teacher(ids, mask), mask, PoolingMode.MEAN)
    target = project_down(D, teacher_pooled)
    return mse(target, pool(student(ids, mask), mask, pooling))


def distill_generic(
    teacher: EncoderModel,
    student: nn.Module,
    D: DownsampleProjection,
    corpus: tuple[torch.Tensor, torch.Tensor],
    cfg: GenericDistillConfig = GenericDistillConfig(),
    generator: Optional[torch.Generator] = None,
    tag: Optional[str] = None,
) -> GenericResult:
    """
    Student and D share one Adam optimizer; the teacher is frozen and recomputed per batch.
    `student` is any module mapping (ids, mask) to token embeddings [B, T, d_S].
    """
    ids_all, mask_all = corpus
    n = int(ids_all.shape[0])
    if n == 0:
        raise DataError("empty corpus")
    tag = tag or f"generic/{cfg.pooling.value}"
    params = [*student.parameters(), *D.parameters()]
    state = AdamState(params, lr=cfg.learning_rate)
    trace = LossTrace(tag=tag)
    step = 0
    student.train()

    with frozen(teacher):
        for epoch in range(1, cfg.epochs + 1):
            order = torch.randperm(n, generator=generator)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                ids, mask = ids_all[idx], mask_all[idx]
                state.zero_grad()
                loss = generic_distill_loss(teacher, student, D, ids, mask, cfg.pooling)
                if not torch.isfinite(loss):
                    raise DivergenceError()
                loss.backward()
                adam_step(state.params, None, state)
                step += 1
                trace.append(step, float(loss.item()))
                if step % cfg.log_every == 0:
                    log.info("%s epoch %d step %d loss=%.5f ema=%.5f", tag, epoch, step, trace.losses[-1], trace.final_smoothed)

    log.info("%s done: %d steps, smoothed loss %.5f -> %.5f", tag, step, trace.initial_smoothed, trace.final_smoothed)
    return GenericResult(student=student, projection=D, trace=trace)


# ---- Pooling comparison ------------------------------------------------------

class PoolingRun(BaseModel):
    mode: PoolingMode
    initial_loss: float
    final_loss: float


class PoolingReport(BaseModel):
    runs: list[PoolingRun]

    def _first(self, mode: PoolingMode) -> Optional[float]:
        return next((r.final_loss for r in self.runs if r.mode is mode), None)

    @property
    def mean_pool_final_loss(self) -> Optional[float]:
        return self._first(PoolingMode.MEAN)

    @property
    def cls_final_loss(self) -> Optional[float]:
        return self._first(PoolingMode.CLS)

    def summary(self) -> dict:
        out = {"runs": [r.model_dump(mode="json") for r in self.runs]}
        out["mean_pool_final_loss"] = self.mean_pool_final_loss
        out["cls_final_loss"] = self.cls_final_loss
        return out


def compare_pooling(
    teacher: EncoderModel,
    student_factory: Callable[[], nn.Module],
    student_width: int,
    corpus: tuple[torch.Tensor, torch.Tensor],
    cfg: GenericDistillConfig = GenericDistillConfig(),
    modes: Sequence[PoolingMode] = (PoolingMode.MEAN, PoolingMode.CLS),
) -> tuple[PoolingReport, list[LossTrace]]:
    """
    One generic-distillation run per pooling mode. Every run re-seeds before building
    its student and projection, so all runs start from identical weights and batch order.
    """
    runs: list[PoolingRun] = []
    traces: list[LossTrace] = []
    for i, mode in enumerate(modes):
        gen = seed_everything(cfg.seed)
        student = student_factory()
        D = DownsampleProjection(teacher.config.hidden_size, student_width)
        run_cfg = cfg.model_copy(update={"pooling": PoolingMode.parse(mode)})
        res = distill_generic(teacher, student, D, corpus, run_cfg, generator=gen, tag=f"pooling/{i}/{run_cfg.pooling.value}")
        runs.append(PoolingRun(mode=run_cfg.pooling, initial_loss=res.trace.initial_smoothed, final_loss=res.trace.final_smoothed))
        traces.append(res.trace)
    report = PoolingReport(runs=runs)
    m, c = report.mean_pool_final_loss, report.cls_final_loss
    if m is not None and c is not None:
        log.info("pooling comparison: mean=%.5f cls=%.5f (%s lower)", m, c, "mean" if m < c else "cls")
    return report, traces
