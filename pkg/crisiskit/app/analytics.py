from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Literal, Mapping, Optional, Sequence

import pandas as pd
import torch
from pydantic import BaseModel

from .corpus import DEFAULT_MAX_LENGTH, CrisisTokenizer, encode_batch, normalize_text
from .encoder import SequenceClassifier
from .errors import ConfigError, DataError
from .schemas import GeoRecord, Label, RawRecord, ResourceType

log = logging.getLogger("crisiskit.analytics")

_PUBLISHED_PATH = Path(__file__).parent / "data" / "published_ro.json"
UNKNOWN_REGION = "(unknown)"
GroupBy = Literal["country", "city"]

# ---- Labelling ---------------------------------------------------------------

def _batched(items: Iterable[RawRecord], size: int) -> Iterator[list[RawRecord]]:
    batch: list[RawRecord] = []
    for it in items:
        batch.append(it)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


@torch.inference_mode()
def _predict_names(model: SequenceClassifier, tok: CrisisTokenizer, texts: list[str], max_length: int) -> list[str]:
    ids, mask = encode_batch(tok, texts, max_length)
    idx = model(ids, mask).argmax(dim=-1).tolist()
    return [model.class_names[i] for i in idx]


def label_corpus(
    classifier: SequenceClassifier,
    tok: CrisisTokenizer,
    records: Iterable[RawRecord],
    batch_size: int = 64,
    max_length: int = DEFAULT_MAX_LENGTH,
    resource_classifier: Optional[SequenceClassifier] = None,
) -> Iterator[GeoRecord]:
    """
    Batched 4-class labelling in input order. With a resource classifier, actionable
    records also get a resource tag: Request, Offer and Request and Offer alike, so
    only Irrelevant stays untagged.
    """
    if not classifier.class_names:
        raise ConfigError("classifier carries no class names")
    classifier.eval()
    if resource_classifier is not None:
        resource_classifier.eval()
    for batch in _batched(records, batch_size):
        texts = [normalize_text(r.text) for r in batch]
        labels = [Label.parse(n) for n in _predict_names(classifier, tok, texts, max_length)]
        resources: list[Optional[str]] = [None] * len(batch)
        if resource_classifier is not None:
            actionable = [i for i, l in enumerate(labels) if l is not Label.IRRELEVANT]
            if actionable:
                names = _predict_names(resource_classifier, tok, [texts[i] for i in actionable], max_length)
                for i, n in zip(actionable, names):
                    resources[i] = n
        for rec, lbl, res in zip(batch, labels, resources):
            yield GeoRecord(**rec.model_dump(exclude={"predicted", "resource"}), predicted=lbl, resource=res)


# ---- R/O ratios --------------------------------------------------------------

class RoRow(BaseModel):
    region: str
    requests: int
    offers: int

    @property
    def exact(self) -> Optional[Fraction]:
        return Fraction(self.requests, self.offers) if self.offers > 0 else None

    @property
    def ratio(self) -> Optional[float]:
        e = self.exact
        return float(e) if e is not None else None

    @property
    def display(self) -> str:
        r = self.ratio
        return f"{r:.2f}" if r is not None else "undefined"


def _rank(rows: Iterable[RoRow]) -> list[RoRow]:
    defined = sorted((r for r in rows if r.offers > 0), key=lambda r: (-r.exact, r.region))
    undefined = sorted((r for r in rows if r.offers == 0), key=lambda r: (-r.requests, r.region))
    return defined + undefined


def _region(rec: GeoRecord, group_by: GroupBy) -> str:
    if group_by not in ("country", "city"):
        raise ConfigError(f"group_by must be country or city, not {group_by!r}")
    return getattr(rec, group_by) or UNKNOWN_REGION


def ro_from_counts(counts: Mapping[str, tuple[int, int]]) -> list[RoRow]:
    """Rows from (requests, offers) per region, ranked by exact ratio, undefined ratios last."""
    rows = []
    for region, (req, off) in counts.items():
        if req < 0 or off < 0:
            raise DataError(f"negative count for {region}")
        rows.append(RoRow(region=region, requests=int(req), offers=int(off)))
    return _rank(rows)


def _counts(
    records: Iterable[GeoRecord], group_by: GroupBy, resource: Optional[ResourceType] = None
) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for r in records:
        if resource is not None and r.resource is not resource:
            continue
        slot = out.setdefault(_region(r, group_by), [0, 0])
        if r.predicted is Label.REQUEST:
            slot[0] += 1
        elif r.predicted is Label.OFFER:
            slot[1] += 1
    return out


def ro_ratio(records: Iterable[GeoRecord], group_by: GroupBy = "country") -> list[RoRow]:
    """Request and Offer counts per region; 'Request and Offer' records count towards neither."""
    counts = _counts(records, group_by)
    return ro_from_counts({k: (v[0], v[1]) for k, v in counts.items() if v[0] or v[1]})


class PublishedCheck(BaseModel):
    region: str
    computed: Optional[float]
    published: float
    consistent: bool


def load_published_table() -> dict[str, dict]:
    return json.loads(_PUBLISHED_PATH.read_text(encoding="utf-8"))


def check_published(
    rows: Sequence[RoRow], published: Mapping[str, float], tolerance: float = 0.02
) -> list[PublishedCheck]:
    """Compare ratios computed from counts with published ones; rows outside tolerance are flagged."""
    by_region = {r.region: r for r in rows}
    out = []
    for region, pub in published.items():
        row = by_region.get(region)
        comp = row.ratio if row is not None else None
        ok = comp is not None and abs(comp - pub) <= tolerance + 1e-12
        if not ok:
            log.warning("%s: computed R/O %s disagrees with published %.2f", region, row.display if row else "n/a", pub)
        out.append(PublishedCheck(region=region, computed=comp, published=pub, consistent=ok))
    return out


# ---- Regions -----------------------------------------------------------------

class RegionShare(BaseModel):
    region: str
    count: int
    percent: float


class RegionRanking(BaseModel):
    label: Label
    total: int
    rows: list[RegionShare]
    remainder_count: int
    remainder_percent: float


def top_regions(
    records: Iterable[GeoRecord], label: Label, k: int = 10, group_by: GroupBy = "city"
) -> RegionRanking:
    if label not in (Label.REQUEST, Label.OFFER):
        raise ConfigError("top_regions ranks Request or Offer records")
    counts: dict[str, int] = {}
    for r in records:
        if r.predicted is label:
            key = _region(r, group_by)
            counts[key] = counts.get(key, 0) + 1
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max(k, 0)]
    pct = lambda n: 100.0 * n / total if total else 0.0
    rows = [RegionShare(region=reg, count=n, percent=pct(n)) for reg, n in ranked]
    rest = total - sum(r.count for r in rows)
    return RegionRanking(label=label, total=total, rows=rows, remainder_count=rest, remainder_percent=pct(rest))


def resource_shares(records: Iterable[GeoRecord], label: Label) -> dict[ResourceType, float]:
    """Percentage of tagged records of `label` per resource type."""
    counts = {r: 0 for r in ResourceType}
    for rec in records:
        if rec.predicted is label and rec.resource is not None:
            counts[rec.resource] += 1
    total = sum(counts.values())
    return {r: (100.0 * n / total if total else 0.0) for r, n in counts.items()}


# ---- Monthly trends ----------------------------------------------------------

@dataclass
class TrendTable:
    months: list[str]
    series: dict[str, list[float]]
    untimed: int = 0
    meta: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.series, index=pd.Index(self.months, name="month"))
        return df.reset_index()

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def _timed_frame(records: Iterable[GeoRecord]) -> tuple[pd.DataFrame, int]:
    rows, untimed = [], 0
    for r in records:
        if r.timestamp is None:
            untimed += 1
            continue
        rows.append(
            {
                "month": pd.Timestamp(r.timestamp).tz_convert("UTC").tz_localize(None).to_period("M"),
                "label": r.predicted.value,
                "resource": r.resource.value if r.resource else None,
                "country": r.country or UNKNOWN_REGION,
                "city": r.city or UNKNOWN_REGION,
            }
        )
    return pd.DataFrame(rows, columns=["month", "label", "resource", "country", "city"]), untimed


def _month_axis(df: pd.DataFrame) -> pd.PeriodIndex:
    return pd.period_range(df["month"].min(), df["month"].max(), freq="M")


def monthly_trend(
    records: Iterable[GeoRecord],
    by: Literal["resource", "label"] = "resource",
    keys: Optional[Sequence[str]] = None,
    label: Optional[Label] = None,
) -> TrendTable:
    """
    Counts per UTC calendar month and key, with empty months filled by zero. `keys`
    restricts the series (e.g. the four-resource view); `label` restricts the records.
    """
    if by not in ("resource", "label"):
        raise ConfigError(f"trend key must be resource or label, not {by!r}")
    df, untimed = _timed_frame(records)
    if untimed:
        log.info("%d records without timestamp left out of the trend", untimed)
    if label is not None:
        df = df[df["label"] == label.value]
    df = df.dropna(subset=[by])
    if keys is not None:
        df = df[df[by].isin(list(keys))]
    if df.empty:
        return TrendTable(months=[], series={k: [] for k in (keys or [])}, untimed=untimed, meta={"by": by})
    axis = _month_axis(df)
    table = df.groupby(["month", by]).size().unstack(by, fill_value=0).reindex(axis, fill_value=0)
    cols = list(keys) if keys is not None else sorted(table.columns)
    series = {c: [int(v) for v in table[c]] if c in table.columns else [0] * len(axis) for c in cols}
    return TrendTable(months=[str(p) for p in axis], series=series, untimed=untimed, meta={"by": by})


def monthly_ro_trend(
    records: Iterable[GeoRecord],
    group_by: GroupBy = "country",
    resource: Optional[ResourceType] = None,
    regions: Optional[Sequence[str]] = None,
) -> TrendTable:
    """Monthly R/O per region (optionally for one resource type); months without offers are NaN."""
    df, untimed = _timed_frame(records)
    if resource is not None:
        df = df[df["resource"] == resource.value]
    df = df[df["label"].isin([Label.REQUEST.value, Label.OFFER.value])]
    if regions is not None:
        df = df[df[group_by].isin(list(regions))]
    meta = {"group_by": group_by, "resource": resource.value if resource else None}
    if df.empty:
        return TrendTable(months=[], series={}, untimed=untimed, meta=meta)
    axis = _month_axis(df)
    counts = df.groupby(["month", group_by, "label"]).size().unstack("label", fill_value=0)
    for col in (Label.REQUEST.value, Label.OFFER.value):
        if col not in counts.columns:
            counts[col] = 0
    series: dict[str, list[float]] = {}
    for region in (regions if regions is not None else sorted(df[group_by].unique())):
        if region in counts.index.get_level_values(group_by):
            sub = counts.xs(region, level=group_by).reindex(axis, fill_value=0)
        else:
            sub = pd.DataFrame({Label.REQUEST.value: 0, Label.OFFER.value: 0}, index=axis)
        req = sub[Label.REQUEST.value].astype(float)
        off = sub[Label.OFFER.value].astype(float)
        ratio = (req / off.where(off > 0)).tolist()
        series[region] = [float(v) for v in ratio]
    return TrendTable(months=[str(p) for p in axis], series=series, untimed=untimed, meta=meta)


# ---- Output ------------------------------------------------------------------

def ro_frame(rows: Sequence[RoRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"region": r.region, "requests": r.requests, "offers": r.offers, "ratio": r.display} for r in rows],
        columns=["region", "requests", "offers", "ratio"],
    )


def write_ro_csv(path: Path, rows: Sequence[RoRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ro_frame(rows).to_csv(path, index=False)
    return path


def write_region_csv(path: Path, ranking: RegionRanking) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([r.model_dump() for r in ranking.rows], columns=["region", "count", "percent"])
    df["percent"] = df["percent"].round(2)
    df.to_csv(path, index=False)
    return path
