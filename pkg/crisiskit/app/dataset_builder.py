from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator
from scipy import stats
from sklearn.metrics import confusion_matrix

from .errors import DataError, MissingInputError
from .schemas import AgreedRecord, Label

log = logging.getLogger("crisiskit.dataset")

FORCED_INCLUSION_THRESHOLD = 5

# ---- Annotation matrix -------------------------------------------------------

@dataclass
class AnnotationMatrix:
    """
    One row per record id, one column per annotator. Cells that did not parse
    into a Label are kept as None and count as disagreement.
    """

    frame: pd.DataFrame

    def __post_init__(self):
        if self.frame.shape[1] < 2:
            raise DataError("annotation matrix needs at least two annotator columns")
        if self.frame.index.has_duplicates:
            dup = self.frame.index[self.frame.index.duplicated()][0]
            raise DataError(f"duplicate record id {dup!r} in annotation matrix")

    @classmethod
    def from_rows(cls, ids: Sequence[str], rows: Sequence[Sequence[object]], annotators: Optional[Sequence[str]] = None):
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise DataError("annotation matrix is not rectangular")
        if len(ids) != len(rows):
            raise DataError(f"{len(ids)} ids for {len(rows)} rows")
        m = widths.pop() if widths else 0
        names = list(annotators or [f"annotator_{j + 1}" for j in range(m)])
        cells = [[Label.parse(c) for c in r] for r in rows]
        return cls(pd.DataFrame(cells, index=pd.Index([str(i) for i in ids], name="id"), columns=names, dtype=object))

    @property
    def ids(self) -> list[str]:
        return list(self.frame.index)

    @property
    def annotators(self) -> list[str]:
        return list(self.frame.columns)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def unparsed_cells(self) -> int:
        return int(self.frame.isna().to_numpy().sum())


def read_annotation_csv(path: Path) -> AnnotationMatrix:
    """CSV with header `id,annotator_1,...,annotator_M`; labels parsed leniently."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"annotation file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "id" not in df.columns:
        raise DataError(f"{path}: missing 'id' column")
    annotators = [c for c in df.columns if c != "id"]
    matrix = AnnotationMatrix.from_rows(df["id"].tolist(), df[annotators].values.tolist(), annotators)
    if matrix.unparsed_cells:
        log.warning("%s: %d cells did not parse into a label", path.name, matrix.unparsed_cells)
    return matrix


# ---- Agreement ---------------------------------------------------------------

@dataclass
class AgreementResult:
    records: list[AgreedRecord]
    counts: dict[Label, int]
    dropped: int

    @property
    def total(self) -> int:
        return len(self.records) + self.dropped

    def summary(self) -> dict:
        return {
            "kept": len(self.records),
            "dropped": self.dropped,
            "counts": {l.value: self.counts.get(l, 0) for l in Label.ordered()},
        }


def agreement_filter(matrix: AnnotationMatrix) -> AgreementResult:
    """Keep exactly the rows on which every annotator gave the same parseable label."""
    frame = matrix.frame
    complete = frame.notna().all(axis=1)
    unanimous = complete & frame.eq(frame.iloc[:, 0], axis=0).all(axis=1)
    kept = frame.loc[unanimous].iloc[:, 0]
    records = [AgreedRecord(id=rid, label=lbl) for rid, lbl in kept.items()]
    counts = {l: 0 for l in Label.ordered()}
    for r in records:
        counts[r.label] += 1
    dropped = len(frame) - len(records)
    log.info("agreement filter: kept %d of %d rows", len(records), len(frame))
    return AgreementResult(records=records, counts=counts, dropped=dropped)


def attach_texts(records: Iterable[AgreedRecord], texts: Mapping[str, str]) -> list[AgreedRecord]:
    return [r.model_copy(update={"text": texts.get(r.id)}) for r in records]


def agreement_rate(matrix: AnnotationMatrix) -> dict:
    """Pairwise raw agreement and Cohen's kappa for every annotator pair, plus the unanimous share."""
    frame = matrix.frame
    pairs = []
    for a, b in combinations(matrix.annotators, 2):
        both = frame[[a, b]].dropna()
        if both.empty:
            continue
        ya = [l.value for l in both[a]]
        yb = [l.value for l in both[b]]
        pairs.append(
            {
                "pair": [a, b],
                "n": len(both),
                "agreement": float(np.mean([x == y for x, y in zip(ya, yb)])),
                "kappa": cohens_kappa(ya, yb).kappa,
            }
        )
    unanimous = len(agreement_filter(matrix).records) / len(frame) if len(frame) else 0.0
    return {
        "pairs": pairs,
        "mean_pairwise_agreement": float(np.mean([p["agreement"] for p in pairs])) if pairs else 0.0,
        "unanimous_rate": unanimous,
    }


# ---- Sampling ----------------------------------------------------------------

def sample_size(N: int, E: float = 0.03, confidence: float = 0.95, p: float = 0.5) -> int:
    """Cochran's n0 = z²·p(1−p)/E² with finite-population correction, rounded up, capped at N."""
    if N < 1:
        raise DataError("population must be >= 1")
    if not 0 < E < 1 or not 0 < confidence < 1:
        raise DataError("margin and confidence must lie in (0, 1)")
    z = float(stats.norm.ppf(1 - (1 - confidence) / 2))
    n0 = z * z * p * (1 - p) / (E * E)
    n = n0 / (1 + (n0 - 1) / N)
    return int(min(max(math.ceil(n - 1e-9), 1), N))


class SamplePlan(BaseModel):
    population: int
    margin: float = 0.03
    confidence: float = 0.95
    size: int = 0
    forced_threshold: int = FORCED_INCLUSION_THRESHOLD
    seed: int = 42

    @model_validator(mode="after")
    def _fill_size(self) -> "SamplePlan":
        if not 0 < self.margin < 1 or not 0 < self.confidence < 1:
            raise ValueError("margin and confidence must lie in (0, 1)")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.size <= 0:
            self.size = sample_size(self.population, self.margin, self.confidence)
        if self.size > self.population:
            raise ValueError(f"sample size {self.size} exceeds population {self.population}")
        return self


@dataclass
class ValidationSample:
    records: list[AgreedRecord]
    allocation: dict[Label, int]
    forced: list[Label] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "size": len(self.records),
            "allocation": {l.value: n for l, n in self.allocation.items()},
            "forced_classes": [l.value for l in self.forced],
        }


def _allocate(counts: Sequence[int], n: int) -> list[int]:
    total = sum(counts)
    quotas = [n * c / total for c in counts]
    alloc = [math.floor(q) for q in quotas]
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: n - sum(alloc)]:
        alloc[i] += 1
    return [min(a, c) for a, c in zip(alloc, counts)]


def stratified_validation_sample(records: Sequence[AgreedRecord], plan: SamplePlan) -> ValidationSample:
    """
    Proportional per-class sample of plan.size records. Any class whose share rounds
    to fewer than plan.forced_threshold members is included in full instead.
    """
    if plan.size > len(records):
        raise DataError(f"sample size {plan.size} exceeds the {len(records)} available records")
    by_class: dict[Label, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    classes = [l for l in Label.ordered() if l in by_class]
    alloc = _allocate([len(by_class[c]) for c in classes], plan.size)

    rng = np.random.default_rng(plan.seed)
    chosen: list[int] = []
    forced: list[Label] = []
    allocation: dict[Label, int] = {}
    for c, a in zip(classes, alloc):
        members = by_class[c]
        if len(classes) > 1 and a < plan.forced_threshold:
            forced.append(c)
            chosen += members
            allocation[c] = len(members)
        else:
            chosen += [int(i) for i in rng.choice(members, size=a, replace=False)]
            allocation[c] = a
    if forced:
        log.info("forced inclusion of %s", ", ".join(f.value for f in forced))
    return ValidationSample(records=[records[i] for i in sorted(chosen)], allocation=allocation, forced=forced)


# ---- Kappa -------------------------------------------------------------------

def kappa_band(kappa: float) -> str:
    if kappa >= 0.81:
        return "almost perfect"
    if kappa >= 0.61:
        return "substantial"
    if kappa >= 0.41:
        return "moderate"
    if kappa >= 0.21:
        return "fair"
    if kappa > 0:
        return "slight"
    return "none"


class KappaReport(BaseModel):
    kappa: float
    p_o: float
    p_e: float
    n: int
    labels: list[str]
    confusion: list[list[int]]

    @property
    def band(self) -> str:
        return kappa_band(self.kappa)


def cohens_kappa(labels_a: Sequence[object], labels_b: Sequence[object]) -> KappaReport:
    """κ = (p_o − p_e)/(1 − p_e); complete agreement on a single class is defined as κ = 1."""
    if len(labels_a) != len(labels_b):
        raise DataError(f"label vectors differ in length ({len(labels_a)} vs {len(labels_b)})")
    if not labels_a:
        raise DataError("kappa needs at least one item")
    a = [getattr(x, "value", x) for x in labels_a]
    b = [getattr(x, "value", x) for x in labels_b]
    labels = sorted(set(a) | set(b), key=str)
    cm = confusion_matrix(a, b, labels=labels)
    n = cm.sum()
    p_o = float(np.trace(cm)) / n
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / (n * n)
    kappa = 1.0 if p_e >= 1.0 else (p_o - p_e) / (1 - p_e)
    return KappaReport(
        kappa=kappa, p_o=p_o, p_e=p_e, n=int(n), labels=[str(l) for l in labels], confusion=cm.tolist()
    )


class HumanAgreement(BaseModel):
    annotator: str
    report: KappaReport
    band: str


class ValidationReport(BaseModel):
    n: int
    humans: list[HumanAgreement]

    def kappa_per_human(self) -> dict[str, float]:
        return {h.annotator: h.report.kappa for h in self.humans}

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "kappa_per_human": self.kappa_per_human(),
            "band": {h.annotator: h.band for h in self.humans},
            "p_o": {h.annotator: h.report.p_o for h in self.humans},
            "p_e": {h.annotator: h.report.p_e for h in self.humans},
            "confusion": {h.annotator: {"labels": h.report.labels, "matrix": h.report.confusion} for h in self.humans},
        }


def validation_report(machine: Mapping[str, Label], humans: Mapping[str, Mapping[str, Label]]) -> ValidationReport:
    """One kappa per human annotator against the machine-agreed labels, over the same ids."""
    ids = list(machine)
    want = set(ids)
    out = []
    for name, labels in humans.items():
        have = set(labels)
        if have != want:
            missing, extra = sorted(want - have)[:3], sorted(have - want)[:3]
            raise DataError(f"{name}: ids do not align with the sample (missing {missing}, extra {extra})")
        rep = cohens_kappa([machine[i] for i in ids], [labels[i] for i in ids])
        out.append(HumanAgreement(annotator=name, report=rep, band=rep.band))
        log.info("%s: kappa %.3f (%s)", name, rep.kappa, rep.band)
    return ValidationReport(n=len(ids), humans=out)


def read_human_labels(path: Path) -> dict[str, Label]:
    """CSV `id,label`; every label must parse."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"human label file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if not {"id", "label"} <= set(df.columns):
        raise DataError(f"{path}: expected columns id,label")
    out: dict[str, Label] = {}
    for rid, raw in zip(df["id"], df["label"]):
        lbl = Label.parse(raw)
        if lbl is None:
            raise DataError(f"{path}: unparseable label {raw!r} for id {rid!r}")
        if rid in out:
            raise DataError(f"{path}: duplicate id {rid!r}")
        out[rid] = lbl
    return out


def write_counts(path: Path, result: AgreementResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True), encoding="utf-8")
    return path
