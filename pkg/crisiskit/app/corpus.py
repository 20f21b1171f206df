from __future__ import annotations

import html
import json
import logging
import re
from dataclasses import dataclass
from itertools import chain
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TypeVar

import emoji
import torch
from pydantic import BaseModel, ValidationError
from tokenizers import Tokenizer as _HFTokenizer
from tokenizers import decoders, pre_tokenizers
from tokenizers.models import BPE
from tokenizers.trainers import BpeTrainer

from .errors import ConfigError, DataError, ShapeError
from .hashing import digest_fields
from .schemas import RawRecord

log = logging.getLogger("crisiskit.corpus")

CLS, SEP, PAD, UNK, MASK = "[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"
URL_TOKEN = "HTTPURL"
USER_TOKEN = "@USER"
SPECIAL_TOKENS: tuple[str, ...] = (CLS, SEP, PAD, UNK, MASK, URL_TOKEN, USER_TOKEN)
BYTE_ALPHABET_SIZE = 256

DEFAULT_VOCAB_SIZE = 8192
DEFAULT_MAX_LENGTH = 64

VOCAB_FILE = "vocab.txt"
MERGES_FILE = "merges.txt"

# ---- Normalization -----------------------------------------------------------

_URL_RE = re.compile(r"(?:https?://|www\.)\S*", re.IGNORECASE)
_MENTION_RE = re.compile(r"@\w+")
_LEFTOVER_ENTITY_RE = re.compile(r"&[A-Za-z]+;")
_SPACE_RE = re.compile(r"\s+")


def _replace_urls(text: str) -> str:
    return _URL_RE.sub(URL_TOKEN, text)


def _replace_mentions(text: str) -> str:
    return _MENTION_RE.sub(USER_TOKEN, text)


def _decode_entities(text: str) -> str:
    # double-escaped input (&amp;amp;) decodes all the way down
    while True:
        decoded = html.unescape(text)
        if decoded == text:
            break
        text = decoded
    # names html doesn't know are dropped
    return _LEFTOVER_ENTITY_RE.sub("", text)


def _replace_emoji(text: str) -> str:
    return emoji.demojize(text)


def _collapse_whitespace(text: str) -> str:
    return _SPACE_RE.sub(" ", text).strip()


_RULES = (_replace_urls, _replace_mentions, _decode_entities, _replace_emoji, _collapse_whitespace)


def normalize_text(raw: str) -> str:
    """
    URLs -> HTTPURL, @mentions -> @USER, HTML entities decoded, emoji -> :shortcode:,
    whitespace runs -> one space, trimmed. Rules run in that order and the pass is
    repeated until the text stops changing, so the result is a fixed point.
    """
    text = raw
    for _ in range(16):
        out = text
        for rule in _RULES:
            out = rule(out)
        if out == text:
            break
        text = out
    return text


# ---- Token sequences ---------------------------------------------------------

@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ShapeError("ids and attention_mask differ in length")

    def __len__(self) -> int:
        return len(self.ids)


# ---- Tokenizer ---------------------------------------------------------------

class CrisisTokenizer:
    """
    Byte-level BPE tokenizer shared by teacher and students. Special tokens hold
    the reserved ids 0..6 in SPECIAL_TOKENS order; HTTPURL and @USER are never split.
    """

    def __init__(self, backend: _HFTokenizer):
        self._tok = backend
        missing = [t for t in SPECIAL_TOKENS if backend.token_to_id(t) is None]
        if missing:
            raise ConfigError(f"tokenizer lacks special tokens: {missing}")

    # -- ids --
    def token_to_id(self, token: str) -> int:
        tid = self._tok.token_to_id(token)
        if tid is None:
            return self.unk_id
        return tid

    @property
    def cls_id(self) -> int:
        return self._tok.token_to_id(CLS)

    @property
    def pad_id(self) -> int:
        return self._tok.token_to_id(PAD)

    @property
    def unk_id(self) -> int:
        return self._tok.token_to_id(UNK)

    @property
    def special_ids(self) -> dict[str, int]:
        return {t: self._tok.token_to_id(t) for t in SPECIAL_TOKENS}

    @property
    def vocab(self) -> dict[str, int]:
        return self._tok.get_vocab(with_added_tokens=True)

    @property
    def vocab_size(self) -> int:
        return self._tok.get_vocab_size(with_added_tokens=True)

    @property
    def merges(self) -> list[tuple[str, str]]:
        raw = json.loads(self._tok.to_str())["model"]["merges"]
        out: list[tuple[str, str]] = []
        for m in raw:
            if isinstance(m, str):
                a, b = m.split(" ", 1)
            else:
                a, b = m
            out.append((a, b))
        return out

    @property
    def fingerprint(self) -> str:
        vocab_items = sorted(self.vocab.items(), key=lambda kv: kv[1])
        return digest_fields(*(f"{t}\t{i}" for t, i in vocab_items), *(f"{a} {b}" for a, b in self.merges))

    def tokenize(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False).ids

    def decode(self, ids: Sequence[int], skip_special_tokens: bool = False) -> str:
        return self._tok.decode(list(ids), skip_special_tokens=skip_special_tokens)

    # -- persistence --
    def save(self, directory: Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        vocab_path = directory / VOCAB_FILE
        merges_path = directory / MERGES_FILE
        items = sorted(self.vocab.items(), key=lambda kv: kv[1])
        vocab_path.write_text("".join(f"{t}\t{i}\n" for t, i in items), encoding="utf-8")
        merges_path.write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")
        return vocab_path, merges_path

    @classmethod
    def load(cls, directory: Path) -> "CrisisTokenizer":
        directory = Path(directory)
        vocab: dict[str, int] = {}
        for line in (directory / VOCAB_FILE).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            token, idx = line.rsplit("\t", 1)
            vocab[token] = int(idx)
        merges = [
            tuple(line.split(" ", 1))
            for line in (directory / MERGES_FILE).read_text(encoding="utf-8").splitlines()
            if line
        ]
        backend = _HFTokenizer(BPE(vocab=vocab, merges=merges, unk_token=UNK))
        _configure_byte_level(backend)
        backend.add_special_tokens(list(SPECIAL_TOKENS))
        return cls(backend)


def _configure_byte_level(backend: _HFTokenizer) -> None:
    backend.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    backend.decoder = decoders.ByteLevel()


def train_tokenizer(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE) -> CrisisTokenizer:
    """Learn a byte-level BPE merge table over already-normalized texts."""
    floor = len(SPECIAL_TOKENS) + BYTE_ALPHABET_SIZE
    if vocab_size <= floor:
        raise ConfigError(f"vocab_size must exceed {floor} (special tokens + byte alphabet)")

    it = iter(corpus)
    first = next(it, None)
    if first is None:
        raise DataError("empty corpus")

    backend = _HFTokenizer(BPE(unk_token=UNK))
    _configure_byte_level(backend)
    trainer = BpeTrainer(
        vocab_size=vocab_size,
        special_tokens=list(SPECIAL_TOKENS),
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
        show_progress=False,
    )
    backend.train_from_iterator(chain([first], it), trainer=trainer)
    tok = CrisisTokenizer(backend)
    log.info("trained tokenizer: %d tokens (%d merges)", tok.vocab_size, len(tok.merges))
    return tok


def encode(tok: CrisisTokenizer, text: str, max_length: int = DEFAULT_MAX_LENGTH) -> TokenSequence:
    """CLS-prefixed ids, truncated to max_length and right-padded with PAD."""
    if max_length < 1:
        raise ConfigError("max_length must be positive")
    ids = [tok.cls_id, *tok.tokenize(text)][:max_length]
    n = len(ids)
    pad = max_length - n
    return TokenSequence(ids=tuple(ids + [tok.pad_id] * pad), attention_mask=tuple([1] * n + [0] * pad))


def decode(tok: CrisisTokenizer, ids: Sequence[int]) -> str:
    """Inverse of encode up to normalization; PAD positions are dropped, other specials kept."""
    return tok.decode([i for i in ids if i != tok.pad_id])


def tokenizer_fingerprint(tok: CrisisTokenizer) -> str:
    return tok.fingerprint


def collate(sequences: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack equal-length sequences into (ids [B, L], mask [B, L]) long tensors."""
    if not sequences:
        raise ShapeError("empty batch")
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ShapeError(f"sequences must share one padded length, got {sorted(lengths)}")
    ids = torch.tensor([s.ids for s in sequences], dtype=torch.long)
    mask = torch.tensor([s.attention_mask for s in sequences], dtype=torch.long)
    return ids, mask


def encode_batch(
    tok: CrisisTokenizer, texts: Iterable[str], max_length: int = DEFAULT_MAX_LENGTH
) -> tuple[torch.Tensor, torch.Tensor]:
    return collate([encode(tok, t, max_length) for t in texts])


# ---- JSONL records -----------------------------------------------------------

M = TypeVar("M", bound=BaseModel)


def iter_jsonl(path: Path) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e


def read_records(path: Path, model: type[M] = RawRecord) -> list[M]:
    """Read a JSONL corpus; ids must be unique within the file."""
    records: list[M] = []
    seen: set[str] = set()
    for lineno, obj in enumerate(iter_jsonl(path), start=1):
        try:
            rec = model.model_validate(obj)
        except ValidationError as e:
            raise DataError(f"{path}: record {lineno}: {e.errors()[0]['msg']}") from e
        rid = getattr(rec, "id", None)
        if rid is not None:
            if rid in seen:
                raise DataError(f"{path}: duplicate id {rid!r}")
            seen.add(rid)
        records.append(rec)
    return records


def write_jsonl(path: Path, items: Iterable[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(item.model_dump_json(exclude_none=True))
            fh.write("\n")
    return path


def normalized_texts(records: Iterable[RawRecord]) -> Iterator[str]:
    for r in records:
        yield normalize_text(r.text)
