from __future__ import annotations

import argparse
import json
from pathlib import Path

import pandas as pd

from ..analytics import (
    check_published,
    label_corpus,
    load_published_table,
    monthly_ro_trend,
    monthly_trend,
    resource_shares,
    ro_from_counts,
    ro_ratio,
    top_regions,
    write_region_csv,
    write_ro_csv,
)
from ..config import RunConfig, require_file
from ..corpus import read_records, write_jsonl
from ..deps import StageResult, load_classifier, load_tokenizer, stage_dir
from ..errors import ConfigError
from ..render import render_ro_table, write_text
from ..schemas import GeoRecord, Label, RawRecord, ResourceType

NAME = "analyze"
FOUR_RESOURCES = (ResourceType.FOOD.value, ResourceType.MONEY.value, ResourceType.SHELTER.value, ResourceType.VOLUNTEERS.value)


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="R/O ratios, top regions and monthly trends over a geo-tagged corpus")
    p.add_argument("--corpus", type=Path, help="JSONL geo records; already labelled unless --classifier is given")
    p.add_argument("--classifier", type=Path, help="4-class model directory used to label the corpus")
    p.add_argument("--resource-classifier", type=Path, dest="resource_classifier", help="resource-type model directory")
    p.add_argument("--tokenizer", type=Path, help="tokenizer directory (defaults to the classifier's)")
    p.add_argument("--top-k", type=int, default=10, dest="top_k")
    p.add_argument("--four-resources", action="store_true", dest="four_resources", help="trend over Food/Money/Shelter/Volunteers only")
    p.add_argument("--published-table", action="store_true", dest="published_table", help="reproduce the bundled published R/O table from its counts")
    p.set_defaults(handler=run, stage=NAME)


def _rows_for_table(rows) -> list[dict]:
    return [{"region": r.region, "requests": r.requests, "offers": r.offers, "ratio": r.display} for r in rows]


def _published(out: Path) -> tuple[dict[str, Path], dict, str]:
    table = load_published_table()
    rows = ro_from_counts({k: (v["requests"], v["offers"]) for k, v in table.items()})
    checks = check_published(rows, {k: v["ratio"] for k, v in table.items()})
    csv_path = out / "published_check.csv"
    pd.DataFrame([c.model_dump() for c in checks]).to_csv(csv_path, index=False)
    flagged = [c.region for c in checks if not c.consistent]
    text = render_ro_table(_rows_for_table(rows), region_label="country")
    return {"published_check": csv_path}, {"flagged": flagged, "consistent": len(checks) - len(flagged)}, text


def _load_geo(cfg: RunConfig, args: argparse.Namespace, out: Path) -> tuple[list[GeoRecord], dict[str, Path]]:
    path = require_file(args.corpus, "geo corpus")
    if args.classifier is None:
        return read_records(path, GeoRecord), {}
    classifier, tok = load_classifier(args.classifier)
    if args.tokenizer is not None:
        tok = load_tokenizer(args.tokenizer)
    if tok is None:
        raise ConfigError(f"{args.classifier} carries no tokenizer; pass --tokenizer")
    resource = load_classifier(args.resource_classifier)[0] if args.resource_classifier else None
    records = list(
        label_corpus(
            classifier,
            tok,
            read_records(path, RawRecord),
            batch_size=cfg.finetune.batch_size,
            max_length=min(cfg.tokenizer.max_length, classifier.config.max_positions),
            resource_classifier=resource,
        )
    )
    return records, {"labelled": write_jsonl(out / "labelled.jsonl", records)}


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    if args.corpus is None and not args.published_table:
        raise ConfigError("analyze needs --corpus or --published-table")
    out = stage_dir(cfg, "analytics")
    artifacts: dict[str, Path] = {}
    extra: dict = {}
    printed: list[str] = []

    if args.published_table:
        a, e, text = _published(out)
        artifacts.update(a)
        extra["published"] = e
        printed.append(text)

    if args.corpus is not None:
        records, a = _load_geo(cfg, args, out)
        artifacts.update(a)
        by_country = ro_ratio(records, "country")
        artifacts["ro_country"] = write_ro_csv(out / "ro_country.csv", by_country)
        artifacts["ro_city"] = write_ro_csv(out / "ro_city.csv", ro_ratio(records, "city"))
        for label in (Label.REQUEST, Label.OFFER):
            ranking = top_regions(records, label, args.top_k, "city")
            key = f"top_cities_{label.name.lower()}"
            artifacts[key] = write_region_csv(out / f"{key}.csv", ranking)

        shares = {
            label.value: {r.value: round(p, 4) for r, p in resource_shares(records, label).items()}
            for label in (Label.REQUEST, Label.OFFER)
        }
        shares_path = out / "resource_shares.json"
        shares_path.write_text(json.dumps(shares, indent=2, sort_keys=True), encoding="utf-8")
        artifacts["resource_shares"] = shares_path

        keys = FOUR_RESOURCES if args.four_resources else None
        for label in (Label.REQUEST, Label.OFFER):
            trend = monthly_trend(records, by="resource", keys=keys, label=label)
            artifacts[f"trend_resource_{label.name.lower()}"] = trend.write_csv(
                out / f"trend_resource_{label.name.lower()}.csv"
            )
        label_trend = monthly_trend(records, by="label", keys=[l.value for l in Label.ordered()])
        artifacts["trend_label"] = label_trend.write_csv(out / "trend_label.csv")
        top_countries = [r.region for r in by_country[: args.top_k]]
        artifacts["ro_trend_country"] = monthly_ro_trend(records, "country", regions=top_countries).write_csv(
            out / "ro_trend_country.csv"
        )

        extra["records"] = len(records)
        extra["untimed"] = label_trend.untimed
        printed.append(render_ro_table(_rows_for_table(by_country), region_label="country"))

    table_path = write_text(out / "ro_table.txt", "\n".join(printed))
    artifacts["table"] = table_path
    summary = f"{extra.get('records', 0)} records"
    if "published" in extra:
        summary += f"; published rows flagged: {', '.join(extra['published']['flagged']) or 'none'}"
    return StageResult(summary=summary, artifacts=artifacts, extra=extra, stdout="\n".join(printed))
