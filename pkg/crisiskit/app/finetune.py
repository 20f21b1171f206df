from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable, Iterator, Optional, Sequence, TypeVar

import numpy as np
import torch
from pydantic import BaseModel, model_validator
from scipy import stats
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow
from sklearn.metrics import f1_score, precision_recall_fscore_support
from sklearn.utils.class_weight import compute_class_weight

from .corpus import DEFAULT_MAX_LENGTH, CrisisTokenizer, encode_batch
from .encoder import SequenceClassifier
from .errors import ConfigError, DataError, DivergenceError
from .hashing import derive_seed
from .numcore import AdamState, adam_step, cross_entropy, seed_everything
from .schemas import Label

log = logging.getLogger("crisiskit.finetune")

T = TypeVar("T")

# ---- Configs -----------------------------------------------------------------

class SplitSpec(BaseModel):
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 42

    @model_validator(mode="after")
    def _fractions(self) -> "SplitSpec":
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("every split fraction must be > 0")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self


class FinetuneConfig(BaseModel):
    max_epochs: int = 30
    learning_rate: float = 1e-5
    batch_size: int = 32
    patience: int = 5
    min_delta: float = 1e-4
    repeats: int = 3
    seed: int = 42
    max_length: int = DEFAULT_MAX_LENGTH

    @model_validator(mode="after")
    def _limits(self) -> "FinetuneConfig":
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return self


# ---- Labelled tensors --------------------------------------------------------

def _key(x: Hashable) -> Hashable:
    return x.value if isinstance(x, Enum) else x


DEFAULT_CLASSES: tuple[str, ...] = tuple(l.value for l in Label.ordered())


@dataclass
class LabelledData:
    """Encoded texts with integer class targets (index into class_names)."""

    ids: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor
    class_names: tuple[str, ...] = DEFAULT_CLASSES

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: torch.Tensor) -> "LabelledData":
        return LabelledData(self.ids[index], self.mask[index], self.labels[index], self.class_names)

    @classmethod
    def from_texts(
        cls,
        tok: CrisisTokenizer,
        texts: Sequence[str],
        labels: Sequence[Hashable],
        class_names: Sequence[str] = DEFAULT_CLASSES,
        max_length: int = DEFAULT_MAX_LENGTH,
    ) -> "LabelledData":
        if len(texts) != len(labels):
            raise DataError(f"{len(texts)} texts but {len(labels)} labels")
        if not texts:
            raise DataError("no labelled texts")
        index = {name: i for i, name in enumerate(class_names)}
        try:
            y = [index[str(_key(l))] for l in labels]
        except KeyError as e:
            raise DataError(f"label {e.args[0]!r} not in class set {list(class_names)}") from e
        ids, mask = encode_batch(tok, texts, max_length)
        return cls(ids, mask, torch.tensor(y, dtype=torch.long), tuple(class_names))


def iter_batches(
    data: LabelledData, batch_size: int, generator: Optional[torch.Generator] = None, shuffle: bool = True
) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    n = len(data)
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield data.ids[idx], data.mask[idx], data.labels[idx]


# ---- Splits ------------------------------------------------------------------

def _split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """(n_train, n_val, n_test): val+test held out first, then divided between val and test."""
    rest_frac = spec.val + spec.test
    n_rest = math.ceil(n * rest_frac - 1e-9)
    n_rest = min(max(n_rest, 2), n - 1)
    n_test = math.ceil(n_rest * spec.test / rest_frac - 1e-9)
    n_test = min(max(n_test, 1), n_rest - 1)
    return n - n_rest, n_rest - n_test, n_test


def _round_table(counts: Sequence[int], sizes: Sequence[int]) -> np.ndarray:
    """
    Integer class x split table whose rows sum to `counts` and columns to `sizes`,
    each cell the floor or ceiling of count * size / n. The leftover units after
    flooring are placed by a max flow: source -> class (row leftover), class -> split
    (1 where the quota is fractional), split -> sink (column leftover).
    """
    n = sum(counts)
    quota = np.outer(counts, sizes) / n
    table = np.floor(quota + 1e-9).astype(np.int64)
    frac = (quota - table) > 1e-9
    row_left = np.asarray(counts) - table.sum(axis=1)
    col_left = np.asarray(sizes) - table.sum(axis=0)
    if not row_left.any():
        return table

    C, S = table.shape
    source, sink = 0, C + S + 1
    cap = np.zeros((C + S + 2, C + S + 2), dtype=np.int32)
    cap[source, 1 : C + 1] = row_left
    cap[1 : C + 1, C + 1 : C + S + 1] = frac
    cap[C + 1 : C + S + 1, sink] = col_left
    flow = maximum_flow(csr_matrix(cap), source, sink)
    if flow.flow_value != row_left.sum():
        raise DataError("no stratified allocation matches the split sizes")
    placed = flow.flow.toarray()[1 : C + 1, C + 1 : C + S + 1]
    return table + np.clip(placed, 0, None)


def split_stratified(
    records: Sequence[T],
    spec: SplitSpec = SplitSpec(),
    label_of: Callable[[T], Hashable] = lambda r: r.label,
) -> tuple[list[T], list[T], list[T]]:
    """
    Stratified train/val/test split. Every class gets the floor or ceiling of its
    proportional share in every split, so per-class counts are within one item of
    the global ratio. Items keep their input order inside each split.
    """
    by_class: dict[Hashable, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(_key(label_of(r)), []).append(i)
    if len(by_class) < 2:
        raise DataError("need at least two classes to stratify")
    small = sorted(str(c) for c, idx in by_class.items() if len(idx) < 3)
    if small:
        raise DataError(f"class too small to stratify: {', '.join(small)}")

    classes = sorted(by_class, key=str)
    counts = [len(by_class[c]) for c in classes]
    table = _round_table(counts, _split_sizes(len(records), spec))

    rng = np.random.default_rng(spec.seed)
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for c, (n_train, n_val, _) in zip(classes, table):
        members = list(rng.permutation(by_class[c]))
        train_idx += members[:n_train]
        val_idx += members[n_train : n_train + n_val]
        test_idx += members[n_train + n_val :]

    pick = lambda idx: [records[i] for i in sorted(int(j) for j in idx)]
    return pick(train_idx), pick(val_idx), pick(test_idx)


# ---- Metrics -----------------------------------------------------------------

def class_weights(labels: Sequence[Hashable]) -> dict[Hashable, float]:
    """Balanced weights N / (K · n_c) over the classes present."""
    if not labels:
        raise DataError("class_weights needs at least one label")
    keys = [_key(l) for l in labels]
    classes = sorted(set(keys), key=str)
    code = {c: i for i, c in enumerate(classes)}
    y = np.array([code[k] for k in keys])
    w = compute_class_weight("balanced", classes=np.arange(len(classes)), y=y)
    return {c: float(w[i]) for i, c in enumerate(classes)}


def class_weight_tensor(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    present = class_weights(labels.tolist())
    return torch.tensor([present.get(i, 1.0) for i in range(num_classes)], dtype=torch.float32)


def macro_f1(predictions: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    if len(predictions) != len(gold):
        raise DataError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if not gold:
        raise DataError("macro_f1 needs at least one item")
    pred = [str(_key(p)) for p in predictions]
    true = [str(_key(g)) for g in gold]
    labels = sorted(set(true))
    return float(f1_score(true, pred, labels=labels, average="macro", zero_division=0))


class ClassScores(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int


def per_class_scores(
    predictions: Sequence[Hashable], gold: Sequence[Hashable], class_names: Sequence[str]
) -> dict[str, ClassScores]:
    pred = [str(_key(p)) for p in predictions]
    true = [str(_key(g)) for g in gold]
    p, r, f, s = precision_recall_fscore_support(true, pred, labels=list(class_names), zero_division=0)
    return {
        name: ClassScores(precision=float(p[i]), recall=float(r[i]), f1=float(f[i]), support=int(s[i]))
        for i, name in enumerate(class_names)
    }


# ---- Early stopping ----------------------------------------------------------

@dataclass
class EarlyStopping:
    """Stops after `patience` epochs without a strict improvement greater than min_delta."""

    patience: int = 5
    min_delta: float = 1e-4
    best: float = -math.inf
    best_epoch: int = 0
    epoch: int = 0
    bad_epochs: int = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score > self.best + self.min_delta + 1e-12:
            self.best, self.best_epoch, self.bad_epochs = score, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---- Training ----------------------------------------------------------------

class EpochLog(BaseModel):
    epoch: int
    train_loss: float
    val_macro_f1: float
    improved: bool


@dataclass
class TrainResult:
    model: SequenceClassifier
    best_val_f1: float
    best_epoch: int
    epochs: list[EpochLog] = field(default_factory=list)
    steps: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class Evaluation:
    predictions: list[int]
    gold: list[int]
    macro_f1: float
    per_class: dict[str, ClassScores]


@torch.inference_mode()
def predict(model: SequenceClassifier, data: LabelledData, batch_size: int = 64) -> list[int]:
    was_training = model.training
    model.eval()
    out: list[int] = []
    for ids, mask, _ in iter_batches(data, batch_size, shuffle=False):
        out.extend(model(ids, mask).argmax(dim=-1).tolist())
    model.train(was_training)
    return out


def evaluate(model: SequenceClassifier, data: LabelledData, batch_size: int = 64) -> Evaluation:
    preds = predict(model, data, batch_size)
    gold = data.labels.tolist()
    names = data.class_names
    return Evaluation(
        predictions=preds,
        gold=gold,
        macro_f1=macro_f1(preds, gold),
        per_class=per_class_scores([names[p] for p in preds], [names[g] for g in gold], names),
    )


BatchLoss = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def train_with_early_stopping(
    model: SequenceClassifier,
    batch_loss: BatchLoss,
    train: LabelledData,
    val: LabelledData,
    *,
    learning_rate: float,
    batch_size: int,
    max_epochs: int,
    patience: int,
    min_delta: float,
    generator: Optional[torch.Generator] = None,
    name: str = "train",
) -> TrainResult:
    """
    Adam over model parameters; validation macro F1 after every epoch; the best
    epoch's weights are restored before returning.
    """
    state = AdamState(list(model.parameters()), lr=learning_rate)
    stopper = EarlyStopping(patience=patience, min_delta=min_delta)
    best_state = copy.deepcopy(model.state_dict())
    epochs: list[EpochLog] = []
    steps: list[tuple[int, float]] = []
    step = 0

    for epoch in range(1, max_epochs + 1):
        model.train()
        total, seen = 0.0, 0
        for ids, mask, y in iter_batches(train, batch_size, generator):
            state.zero_grad()
            loss = batch_loss(ids, mask, y)
            if not torch.isfinite(loss):
                raise DivergenceError()
            loss.backward()
            adam_step(state.params, None, state)
            step += 1
            steps.append((step, float(loss.item())))
            total += float(loss.item()) * len(y)
            seen += len(y)

        val_f1 = evaluate(model, val).macro_f1
        improved = stopper.update(val_f1)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        epochs.append(EpochLog(epoch=epoch, train_loss=total / max(seen, 1), val_macro_f1=val_f1, improved=improved))
        log.info(
            "%s epoch %d loss=%.4f val_f1=%.4f patience=%d/%d",
            name, epoch, total / max(seen, 1), val_f1, stopper.bad_epochs, patience,
        )
        if stopper.should_stop:
            log.info("%s early stop after epoch %d (best epoch %d)", name, epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state)
    return TrainResult(model=model, best_val_f1=stopper.best, best_epoch=stopper.best_epoch, epochs=epochs, steps=steps)


def finetune_run(
    model: SequenceClassifier,
    splits: tuple[LabelledData, LabelledData, LabelledData],
    cfg: FinetuneConfig = FinetuneConfig(),
    generator: Optional[torch.Generator] = None,
) -> TrainResult:
    """Class-weighted cross-entropy on mean-pooled embeddings, early-stopped on validation macro F1."""
    train, val, _ = splits
    weights = class_weight_tensor(train.labels, model.config.num_classes)

    def batch_loss(ids, mask, y):
        return cross_entropy(model(ids, mask), y, weights)

    return train_with_early_stopping(
        model,
        batch_loss,
        train,
        val,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        min_delta=cfg.min_delta,
        generator=generator,
        name="finetune",
    )


# ---- Repeats / confidence intervals ------------------------------------------

def confidence_interval(scores: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """(mean, half-width) with Student's t on r−1 degrees of freedom; one run gives half-width 0."""
    if not scores:
        raise DataError("no scores")
    arr = np.asarray(scores, dtype=float)
    mean = float(arr.mean())
    r = len(arr)
    if r < 2 or np.ptp(arr) == 0:
        return mean, 0.0
    s = float(arr.std(ddof=1))
    t = float(stats.t.ppf(0.5 + level / 2, df=r - 1))
    return mean, t * s / math.sqrt(r)


class MetricsReport(BaseModel):
    model: str
    task: str
    macro_f1_mean: float
    ci_half_width: float
    ci_relative_pct: float
    single_run: bool = False
    per_class: dict[str, ClassScores] = {}
    run_scores: list[float]

    @model_validator(mode="after")
    def _bounds(self) -> "MetricsReport":
        for s in [self.macro_f1_mean, *self.run_scores]:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score {s} outside [0, 1]")
        return self

    def to_tsv_row(self) -> str:
        return (
            f"{self.model}\t{self.task}\t{self.macro_f1_mean:.4f}\t"
            f"±{self.ci_half_width:.4f}\t(±{self.ci_relative_pct:.2f}%)"
        )


def build_report(
    model_name: str, task_name: str, scores: Sequence[float], per_class: Optional[dict[str, ClassScores]] = None
) -> MetricsReport:
    mean, half = confidence_interval(scores)
    return MetricsReport(
        model=model_name,
        task=task_name,
        macro_f1_mean=mean,
        ci_half_width=half,
        ci_relative_pct=(100.0 * half / mean) if mean else 0.0,
        single_run=len(scores) < 2,
        per_class=per_class or {},
        run_scores=list(scores),
    )


@dataclass
class FinetuneTask:
    """A fixed set of splits plus a factory for fresh, untrained classifiers."""

    name: str
    model_name: str
    build_model: Callable[[], SequenceClassifier]
    splits: tuple[LabelledData, LabelledData, LabelledData]


def _average_per_class(evals: Sequence[Evaluation]) -> dict[str, ClassScores]:
    names = list(evals[0].per_class)
    out = {}
    for n in names:
        rows = [e.per_class[n] for e in evals]
        out[n] = ClassScores(
            precision=float(np.mean([r.precision for r in rows])),
            recall=float(np.mean([r.recall for r in rows])),
            f1=float(np.mean([r.f1 for r in rows])),
            support=rows[0].support,
        )
    return out


def repeat_with_ci(task: FinetuneTask, cfg: FinetuneConfig = FinetuneConfig()) -> tuple[MetricsReport, list[TrainResult]]:
    """Fine-tune cfg.repeats fresh models on fixed splits; each repeat gets its own derived seed."""
    if cfg.repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {cfg.repeats}")
    evals: list[Evaluation] = []
    results: list[TrainResult] = []
    for r in range(cfg.repeats):
        seed = derive_seed(cfg.seed, f"finetune/{task.name}/{r}")
        gen = seed_everything(seed)
        model = task.build_model()
        result = finetune_run(model, task.splits, cfg, generator=gen)
        ev = evaluate(result.model, task.splits[2])
        log.info("repeat %d/%d test macro F1 %.4f", r + 1, cfg.repeats, ev.macro_f1)
        evals.append(ev)
        results.append(result)
    report = build_report(task.model_name, task.name, [e.macro_f1 for e in evals], _average_per_class(evals))
    if report.single_run:
        log.warning("single repeat: confidence interval reported as 0")
    return report, results


def relative_change(new: float, baseline: float) -> float:
    """Percent change of `new` over `baseline`."""
    if baseline == 0:
        raise DataError("baseline is zero")
    return 100.0 * (new - baseline) / baseline


def macro_average(reports: Sequence[MetricsReport]) -> float:
    if not reports:
        raise DataError("no reports to average")
    return float(np.mean([r.macro_f1_mean for r in reports]))
