from __future__ import annotations

import argparse
from pathlib import Path

from ..config import RunConfig, require_file
from ..corpus import normalized_texts, read_records, train_tokenizer
from ..deps import StageResult, stage_dir

NAME = "tokenizer"


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(NAME, help="train the shared subword tokenizer on a normalized corpus")
    p.add_argument("--corpus", type=Path, required=True, help="JSONL records with a text field")
    p.add_argument("--vocab-size", type=int, dest="vocab_size", help="overrides tokenizer.vocab_size")
    p.set_defaults(handler=run, stage=NAME)


def run(cfg: RunConfig, args: argparse.Namespace) -> StageResult:
    vocab_size = args.vocab_size or cfg.tokenizer.vocab_size
    records = read_records(require_file(args.corpus, "corpus"))
    tok = train_tokenizer(normalized_texts(records), vocab_size=vocab_size)
    vocab_path, merges_path = tok.save(stage_dir(cfg, "tokenizer"))
    return StageResult(
        summary=f"vocab {tok.vocab_size} (asked {vocab_size}) from {len(records)} records",
        artifacts={"vocab": vocab_path, "merges": merges_path},
        extra={"vocab_size": tok.vocab_size, "fingerprint": tok.fingerprint},
    )
