from __future__ import annotations

import argparse
import json
import os
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .corpus import write_jsonl
from .schemas import GeoRecord, Label, RawRecord, ResourceType

# --------------------------
# Vocabulary
# --------------------------

RESOURCE_WORDS = {
    ResourceType.MONEY: ["money", "funds", "cash donations", "financial support"],
    ResourceType.VOLUNTEERS: ["volunteers", "helping hands", "drivers", "people to help"],
    ResourceType.CLOTHING: ["clothes", "blankets", "jackets", "shoes"],
    ResourceType.SHELTER: ["shelter", "a place to stay", "beds", "rooms"],
    ResourceType.MEDICAL_AID: ["oxygen", "medicine", "masks", "hospital beds"],
    ResourceType.FOOD: ["food", "meals", "groceries", "water"],
}

TEMPLATES = {
    Label.REQUEST: [
        "urgently need {res} in {city} please help",
        "we desperately need {res} for families in {city}",
        "anyone able to provide {res} near {city} asap",
        "please help my family needs {res} {city}",
    ],
    Label.OFFER: [
        "offering free {res} to anyone in {city}",
        "we can donate {res} in {city} dm us",
        "happy to give {res} to those in need {city}",
        "free {res} available for pickup in {city}",
    ],
    Label.REQUEST_AND_OFFER: [
        "we need {res} and can offer {res2} in {city}",
        "looking for {res} happy to share {res2} {city}",
        "can trade {res2} for {res} near {city}",
    ],
    Label.IRRELEVANT: [
        "watching the match tonight with friends",
        "new episode dropped and it is amazing",
        "coffee first then the long commute",
        "weekend plans include a long nap",
        "cannot believe the traffic on the bridge today",
    ],
}

DECORATIONS = [
    "",
    " https://example.org/post/{n}",
    " @helper{n}",
    " &amp; stay safe",
    " \U0001F64F",
    "   ",
]

PLACES = {
    "IND": ["New Delhi", "Mumbai", "Bengaluru"],
    "USA": ["New York", "Los Angeles", "Chicago"],
    "GBR": ["London", "Manchester"],
    "CAN": ["Toronto", "Vancouver"],
    "AUS": ["Sydney", "Melbourne"],
    "IRL": ["Dublin"],
    "ZAF": ["Johannesburg"],
    "NGA": ["Lagos"],
    "PAK": ["Karachi"],
    "PHL": ["Manila"],
}

DEFAULT_MIX = {Label.REQUEST: 0.35, Label.OFFER: 0.30, Label.REQUEST_AND_OFFER: 0.10, Label.IRRELEVANT: 0.25}

# --------------------------
# Helpers
# --------------------------

def _text(rng: np.random.Generator, label: Label, resource: Optional[ResourceType], city: str, n: int) -> str:
    template = TEMPLATES[label][rng.integers(len(TEMPLATES[label]))]
    res = RESOURCE_WORDS[resource][rng.integers(4)] if resource else ""
    other = list(ResourceType)[rng.integers(len(ResourceType))]
    res2 = RESOURCE_WORDS[other][rng.integers(4)]
    deco = DECORATIONS[rng.integers(len(DECORATIONS))].format(n=n)
    return template.format(res=res, res2=res2, city=city) + deco


def _draw_labels(rng: np.random.Generator, n: int, mix: dict[Label, float]) -> list[Label]:
    labels = list(mix)
    p = np.array([mix[l] for l in labels], dtype=float)
    return [labels[i] for i in rng.choice(len(labels), size=n, p=p / p.sum())]


# --------------------------
# Corpora
# --------------------------

def labelled_corpus(n: int = 2000, seed: int = 0, mix: Optional[dict[Label, float]] = None) -> list[RawRecord]:
    """Separable 4-class texts: each class has its own phrasing templates."""
    rng = np.random.default_rng(seed)
    countries = list(PLACES)
    out = []
    for i, label in enumerate(_draw_labels(rng, n, mix or DEFAULT_MIX)):
        country = countries[rng.integers(len(countries))]
        city = PLACES[country][rng.integers(len(PLACES[country]))]
        resource = None if label is Label.IRRELEVANT else list(ResourceType)[rng.integers(len(ResourceType))]
        out.append(RawRecord(id=f"t{i:06d}", text=_text(rng, label, resource, city, i), label=label))
    return out


def resource_corpus(n: int = 600, seed: int = 0) -> list[dict]:
    """Request/Offer texts tagged with the resource they mention."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = Label.REQUEST if rng.random() < 0.5 else Label.OFFER
        resource = list(ResourceType)[rng.integers(len(ResourceType))]
        country = list(PLACES)[rng.integers(len(PLACES))]
        city = PLACES[country][0]
        out.append({"id": f"r{i:06d}", "text": _text(rng, label, resource, city, i), "resource": resource.value})
    return out


def annotation_matrix(
    ids: list[str], labels: list[Label], annotators: int = 4, agree_rate: float = 0.8, seed: int = 0
) -> pd.DataFrame:
    """
    `agree_rate` of the rows are unanimous on the true label; every other row has at
    least one annotator who picked a different label.
    """
    rng = np.random.default_rng(seed)
    all_labels = Label.ordered()
    rows = []
    for rid, lbl in zip(ids, labels):
        row = [lbl.value] * annotators
        if rng.random() >= agree_rate:
            j = int(rng.integers(annotators))
            others = [l for l in all_labels if l is not lbl]
            row[j] = others[rng.integers(len(others))].value
        rows.append([rid, *row])
    return pd.DataFrame(rows, columns=["id", *[f"annotator_{j + 1}" for j in range(annotators)]])


def human_labels(ids: list[str], labels: list[Label], flip_rate: float = 0.03, seed: int = 0) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    out = []
    for rid, lbl in zip(ids, labels):
        if rng.random() < flip_rate:
            others = [l for l in Label.ordered() if l is not lbl]
            lbl = others[rng.integers(len(others))]
        out.append({"id": rid, "label": lbl.value})
    return pd.DataFrame(out, columns=["id", "label"])


def geo_corpus(n: int = 3000, seed: int = 0, start: datetime = datetime(2020, 3, 1, tzinfo=timezone.utc), months: int = 12) -> list[GeoRecord]:
    """Labelled, timestamped, geo-tagged records; roughly 2% carry no timestamp."""
    rng = np.random.default_rng(seed)
    countries = list(PLACES)
    weights = np.linspace(2.0, 1.0, len(countries))
    out = []
    for i, label in enumerate(_draw_labels(rng, n, DEFAULT_MIX)):
        country = countries[rng.choice(len(countries), p=weights / weights.sum())]
        city = PLACES[country][rng.integers(len(PLACES[country]))]
        resource = None if label is Label.IRRELEVANT else list(ResourceType)[rng.integers(len(ResourceType))]
        ts = None if rng.random() < 0.02 else start + timedelta(days=float(rng.uniform(0, 30.4 * months)))
        out.append(
            GeoRecord(
                id=f"g{i:06d}",
                text=_text(rng, label, resource, city, i),
                label=label,
                predicted=label,
                resource=resource,
                country=country,
                city=city,
                timestamp=ts,
            )
        )
    return out


def write_sample_data(out_dir: Path, n: int = 2000, seed: int = 0) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = labelled_corpus(n, seed)
    ids = [r.id for r in records]
    labels = [r.label for r in records]
    paths = {"labelled": write_jsonl(out_dir / "labelled.jsonl", records)}

    matrix = annotation_matrix(ids, labels, seed=seed + 1)
    paths["annotations"] = out_dir / "annotations.csv"
    matrix.to_csv(paths["annotations"], index=False)
    for k in (1, 2):
        path = out_dir / f"human_{k}.csv"
        human_labels(ids, labels, seed=seed + 10 + k).to_csv(path, index=False)
        paths[f"human_{k}"] = path

    paths["resources"] = out_dir / "resources.jsonl"
    with paths["resources"].open("w", encoding="utf-8") as fh:
        for row in resource_corpus(seed=seed + 2):
            fh.write(json.dumps(row) + "\n")
    paths["geo"] = write_jsonl(out_dir / "geo.jsonl", geo_corpus(seed=seed + 3))
    return paths


# --------------------------
# Main
# --------------------------

def main():
    parser = argparse.ArgumentParser(description="Write a synthetic labelled corpus, annotation matrix, human labels and geo corpus.")
    parser.add_argument("--out", type=Path, default=Path(os.environ.get("CRISIS_SAMPLE_DIR", "sample")))
    parser.add_argument("--n", type=int, default=2000, help="labelled records (and annotation rows)")
    parser.add_argument("--seed", type=int, default=int(os.environ.get("CRISIS_SEED", "0")))
    args = parser.parse_args()

    paths = write_sample_data(args.out, args.n, args.seed)
    for name, path in paths.items():
        print(f"{name:<12} {path}")


if __name__ == "__main__":
    main()
