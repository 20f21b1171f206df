# crisiskit/app/deps.py
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, TypeVar

import torch
from pydantic import BaseModel, ValidationError

from .config import RunConfig, require_file
from .corpus import CrisisTokenizer, encode_batch, iter_jsonl, normalize_text, read_records
from .encoder import (
    EncoderConfig,
    EncoderModel,
    SequenceClassifier,
    list_presets,
    load_model,
    preset,
)
from .errors import ConfigError, DataError
from .finetune import DEFAULT_CLASSES, LabelledData, split_stratified
from .hashing import derive_seed
from .schemas import Label, ResourceType

LabelSet = Literal["crisis", "resource"]
RESOURCE_CLASSES: tuple[str, ...] = tuple(r.value for r in ResourceType)


@dataclass
class StageResult:
    """What a stage handler hands back to the dispatcher."""

    summary: str
    artifacts: dict[str, Path] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    stdout: Optional[str] = None


def stage_seed(cfg: RunConfig, stage: str) -> int:
    return derive_seed(cfg.seed, stage)


def stage_dir(cfg: RunConfig, *parts: str) -> Path:
    p = Path(cfg.out).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


M = TypeVar("M", bound=BaseModel)


def revalidated(model: M, **update) -> M:
    """Copy of a config with `update` applied and every validator run again."""
    try:
        return type(model).model_validate({**model.model_dump(), **update})
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or type(model).__name__
        raise ConfigError(f"{where}: {first['msg']}") from e


# ---- Tokenizer / models ------------------------------------------------------

def load_tokenizer(path: Optional[Path]) -> CrisisTokenizer:
    return CrisisTokenizer.load(require_file(path, "tokenizer directory"))


def encoder_config(name_or_dir: str, **overrides) -> EncoderConfig:
    """
    Preset name, or a model directory whose config is reused.
      1) existing directory with config.json
      2) bundled preset
    """
    p = Path(name_or_dir)
    if p.is_dir():
        model, _ = load_model(p)
        return model.config.model_copy(update=overrides) if overrides else model.config
    if name_or_dir not in list_presets():
        raise ConfigError(f"unknown model {name_or_dir!r}; presets: {', '.join(list_presets())}")
    return preset(name_or_dir, **overrides)


def sized_config(name_or_dir: str, tok: CrisisTokenizer, num_classes: int, max_length: int) -> EncoderConfig:
    """Architecture fitted to the tokenizer's vocabulary, the class count and the input length."""
    base = encoder_config(name_or_dir)
    return base.model_copy(
        update={
            "vocab_size": tok.vocab_size,
            "num_classes": num_classes,
            "max_positions": max(base.max_positions, max_length),
        }
    )


def classifier_factory(
    name_or_dir: str, tok: CrisisTokenizer, class_names: Sequence[str], max_length: int
) -> Callable[[], SequenceClassifier]:
    """
    Fresh untrained classifiers for a preset, or classifiers that start from the
    encoder weights stored in a model directory (e.g. a generically distilled student).
    """
    names = tuple(class_names)
    p = Path(name_or_dir)
    if p.is_dir():
        encoder = load_encoder(p)
        if encoder.config.vocab_size != tok.vocab_size:
            raise ConfigError(f"{p}: vocabulary {encoder.config.vocab_size} does not match tokenizer {tok.vocab_size}")
        state = encoder.state_dict()
        config = encoder.config.model_copy(update={"num_classes": len(names)})

        def build() -> SequenceClassifier:
            enc = EncoderModel(config)
            enc.load_state_dict(state)
            return SequenceClassifier(enc, class_names=names, tokenizer_fingerprint=tok.fingerprint)

        return build
    config = sized_config(name_or_dir, tok, len(names), max_length)
    return lambda: SequenceClassifier.from_config(config, class_names=names, tokenizer_fingerprint=tok.fingerprint)


def load_classifier(path: Optional[Path]) -> tuple[SequenceClassifier, Optional[CrisisTokenizer]]:
    model, tok = load_model(require_file(path, "model directory"))
    if not isinstance(model, SequenceClassifier):
        raise ConfigError(f"{path} holds a bare encoder, not a classifier")
    return model, tok


def load_encoder(path: Optional[Path]) -> EncoderModel:
    """Bare encoder from a model directory; a classifier contributes its encoder."""
    model, _ = load_model(require_file(path, "model directory"))
    return model.encoder if isinstance(model, SequenceClassifier) else model


# ---- Labelled data -----------------------------------------------------------

def class_names_for(label_set: LabelSet) -> tuple[str, ...]:
    return DEFAULT_CLASSES if label_set == "crisis" else RESOURCE_CLASSES


def read_labelled(path: Optional[Path], label_set: LabelSet = "crisis") -> tuple[list[str], list[str], list[str]]:
    """
    (ids, normalized texts, class names) from JSONL. Crisis data carries `label`,
    resource data carries `resource`; unlabelled or unparseable rows are an error.
    """
    path = require_file(path, "labelled data")
    ids, texts, labels = [], [], []
    if label_set == "crisis":
        for rec in read_records(path):
            if rec.label is None:
                raise DataError(f"{path}: record {rec.id!r} has no label")
            ids.append(rec.id)
            texts.append(normalize_text(rec.text))
            labels.append(rec.label.value)
        return ids, texts, labels
    for lineno, obj in enumerate(iter_jsonl(path), start=1):
        res = ResourceType.parse(obj.get("resource"))
        if res is None or not obj.get("text"):
            raise DataError(f"{path}: record {lineno} needs text and a resource tag")
        ids.append(str(obj.get("id", lineno)))
        texts.append(normalize_text(obj["text"]))
        labels.append(res.value)
    return ids, texts, labels


def load_splits(
    cfg: RunConfig, tok: CrisisTokenizer, path: Optional[Path], label_set: LabelSet = "crisis"
) -> tuple[LabelledData, LabelledData, LabelledData]:
    """
    Stratified train/val/test split. The split seed derives from the global seed, so
    every stage reading the same file sees the same partition.
    """
    _, texts, labels = read_labelled(path, label_set)
    rows = list(zip(texts, labels))
    spec = cfg.split.model_copy(update={"seed": stage_seed(cfg, "split")})
    train, val, test = split_stratified(rows, spec, label_of=lambda r: r[1])
    names = class_names_for(label_set)
    max_len = cfg.tokenizer.max_length

    def build(part):
        return LabelledData.from_texts(tok, [t for t, _ in part], [l for _, l in part], names, max_len)

    return build(train), build(val), build(test)


def corpus_tensors(path: Optional[Path], tok: CrisisTokenizer, max_length: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Unlabelled JSONL corpus -> (ids, mask); texts that normalize to nothing are skipped."""
    texts = [t for t in (normalize_text(r.text) for r in read_records(require_file(path, "corpus"))) if t]
    if not texts:
        raise DataError("empty corpus")
    return encode_batch(tok, texts, max_length)


def parse_label(raw: str) -> Label:
    lbl = Label.parse(raw)
    if lbl is None:
        raise ConfigError(f"unknown label {raw!r}")
    return lbl
