from __future__ import annotations

import json
import logging
import math
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

from .corpus import CrisisTokenizer, TokenSequence, collate
from .errors import ConfigError, EmptySequenceError, MissingInputError, ShapeError
from .numcore import load_checkpoint, save_checkpoint

log = logging.getLogger("crisiskit.encoder")

_PRESETS_PATH = Path(__file__).parent / "data" / "presets.json"
MODEL_CONFIG_FILE = "config.json"
INIT_STD = 0.02

# ---- Config ------------------------------------------------------------------

class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    hidden_size: int
    num_layers: int
    num_heads: int
    intermediate_size: int
    vocab_size: int
    max_positions: int = 64
    num_classes: int = 4
    dropout: float = 0.0
    layer_norm_eps: float = 1e-12

    @model_validator(mode="after")
    def _shape_rules(self) -> "EncoderConfig":
        positive = ("hidden_size", "num_heads", "intermediate_size", "vocab_size", "max_positions", "num_classes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.intermediate_size < self.hidden_size:
            raise ValueError("intermediate_size must be >= hidden_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def describe(self) -> str:
        return f"H={self.hidden_size} L={self.num_layers} A={self.num_heads} I={self.intermediate_size}"


@lru_cache(maxsize=1)
def _load_presets() -> dict[str, dict]:
    return json.loads(_PRESETS_PATH.read_text(encoding="utf-8"))


def list_presets() -> list[str]:
    return sorted(_load_presets())


def preset(name: str, **overrides) -> EncoderConfig:
    """Named architecture (see data/presets.json) with optional field overrides."""
    table = _load_presets()
    key = name.strip().lower()
    if key not in table:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(table))}")
    fields = {**table[key], **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return EncoderConfig(**fields)
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ---- Parameter accounting ----------------------------------------------------

def _count(V: int, H: int, L: int, I: int, P: int) -> int:
    embeddings = V * H + P * H + 2 * H
    attention = 4 * (H * H + H)
    ffn = H * I + I + I * H + H
    norms = 4 * H
    return embeddings + L * (attention + ffn + norms)


def count_params(config: EncoderConfig) -> int:
    """Closed-form size of EncoderModel(config); the classifier head is not included."""
    return _count(
        config.vocab_size, config.hidden_size, config.num_layers, config.intermediate_size, config.max_positions
    )


def implied_vocab_size(config: EncoderConfig, reported_params: float) -> float:
    """Vocabulary size that makes count_params(config) equal a reported total."""
    rest = _count(0, config.hidden_size, config.num_layers, config.intermediate_size, config.max_positions)
    return (reported_params - rest) / config.hidden_size


def brute_force_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---- Modules -----------------------------------------------------------------

def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class SelfAttention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        H = config.hidden_size
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(H, H)
        self.key = nn.Linear(H, H)
        self.value = nn.Linear(H, H)
        self.output = nn.Linear(H, H)
        self.dropout = nn.Dropout(config.dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self, x: torch.Tensor, additive_mask: torch.Tensor, return_probs: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        B, T, H = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores + additive_mask, dim=-1)
        ctx = (self.dropout(probs) @ v).transpose(1, 2).reshape(B, T, H)
        out = self.output(ctx)
        if return_probs:
            return out, probs
        return out


class EncoderLayer(nn.Module):
    """Post-LN block: x = LN(x + Attn(x)); x = LN(x + FFN(x))."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        H, I = config.hidden_size, config.intermediate_size
        self.attention = SelfAttention(config)
        self.attention_norm = nn.LayerNorm(H, eps=config.layer_norm_eps)
        self.ffn_in = nn.Linear(H, I)
        self.ffn_out = nn.Linear(I, H)
        self.ffn_norm = nn.LayerNorm(H, eps=config.layer_norm_eps)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, additive_mask: torch.Tensor) -> torch.Tensor:
        x = self.attention_norm(x + self.dropout(self.attention(x, additive_mask)))
        h = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(h))


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        H = config.hidden_size
        self.token_embeddings = nn.Embedding(config.vocab_size, H)
        self.position_embeddings = nn.Embedding(config.max_positions, H)
        self.embedding_norm = nn.LayerNorm(H, eps=config.layer_norm_eps)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.apply(_init_weights)

    @staticmethod
    def additive_mask(mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        # [B, T] -> [B, 1, 1, T]; masked keys get the dtype's most negative value
        keep = mask.to(torch.bool)[:, None, None, :]
        return torch.zeros(keep.shape, dtype=dtype, device=mask.device).masked_fill(~keep, torch.finfo(dtype).min)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        T = ids.shape[1]
        if T > self.config.max_positions:
            raise ShapeError(f"sequence length {T} exceeds max_positions {self.config.max_positions}")
        positions = torch.arange(T, device=ids.device)
        x = self.token_embeddings(ids) + self.position_embeddings(positions)[None, :, :]
        return self.dropout(self.embedding_norm(x))

    def forward(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if ids.dim() != 2:
            raise ShapeError(f"expected ids [B, T], got {tuple(ids.shape)}")
        if mask is None:
            mask = torch.ones_like(ids)
        elif mask.shape != ids.shape:
            raise ShapeError(f"mask shape {tuple(mask.shape)} != ids shape {tuple(ids.shape)}")
        x = self.embed(ids)
        additive = self.additive_mask(mask, x.dtype)
        for layer in self.layers:
            x = layer(x, additive)
        return x


def forward(model: EncoderModel, batch: Sequence[TokenSequence]) -> torch.Tensor:
    ids, mask = collate(batch)
    return model(ids, mask)


# ---- Pooling / heads ---------------------------------------------------------

class PoolingMode(str, Enum):
    MEAN = "mean"
    CLS = "cls"

    @classmethod
    def parse(cls, raw: "str | PoolingMode") -> "PoolingMode":
        if isinstance(raw, PoolingMode):
            return raw
        key = str(raw).strip().lower().replace("_", "").replace("-", "")
        aliases = {"mean": cls.MEAN, "meanpool": cls.MEAN, "cls": cls.CLS, "clstoken": cls.CLS}
        if key not in aliases:
            raise ConfigError(f"unknown pooling mode {raw!r}")
        return aliases[key]


def pool(embeddings: torch.Tensor, mask: torch.Tensor, mode: PoolingMode) -> torch.Tensor:
    if embeddings.shape[:2] != mask.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match embeddings {tuple(embeddings.shape)}")
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptySequenceError()
    if mode is PoolingMode.CLS:
        return embeddings[:, 0, :]
    m = mask.to(embeddings.dtype).unsqueeze(-1)
    return (embeddings * m).sum(dim=1) / counts.to(embeddings.dtype).unsqueeze(-1)


class ClassifierHead(nn.Linear):
    """Affine map pooled [B, H] -> logits [B, num_classes], no activation."""

    def __init__(self, hidden_size: int, num_classes: int = 4):
        super().__init__(hidden_size, num_classes)
        _init_weights(self)


def classify_logits(head: ClassifierHead, pooled: torch.Tensor) -> torch.Tensor:
    if pooled.shape[-1] != head.in_features:
        raise ShapeError(f"pooled width {pooled.shape[-1]} != head input {head.in_features}")
    return head(pooled)


class DownsampleProjection(nn.Linear):
    """Trainable map from the teacher's pooled width d_T down to a student's d_S."""

    def __init__(self, teacher_dim: int, student_dim: int):
        if student_dim >= teacher_dim:
            raise ConfigError(f"student width {student_dim} must be smaller than teacher width {teacher_dim}")
        super().__init__(teacher_dim, student_dim)
        _init_weights(self)


def project_down(D: DownsampleProjection, teacher_pooled: torch.Tensor) -> torch.Tensor:
    if teacher_pooled.shape[-1] != D.in_features:
        raise ShapeError(f"teacher width {teacher_pooled.shape[-1]} != projection input {D.in_features}")
    return D(teacher_pooled)


# ---- Classifier --------------------------------------------------------------

class SequenceClassifier(nn.Module):
    """Encoder + pooling + linear head, with the class names and tokenizer it was trained against."""

    def __init__(
        self,
        encoder: EncoderModel,
        pooling: PoolingMode = PoolingMode.MEAN,
        class_names: Sequence[str] = (),
        tokenizer_fingerprint: Optional[str] = None,
    ):
        super().__init__()
        cfg = encoder.config
        if class_names and len(class_names) != cfg.num_classes:
            raise ConfigError(f"{len(class_names)} class names for {cfg.num_classes} outputs")
        self.encoder = encoder
        self.pooling = PoolingMode.parse(pooling)
        self.head = ClassifierHead(cfg.hidden_size, cfg.num_classes)
        self.class_names = list(class_names)
        self.tokenizer_fingerprint = tokenizer_fingerprint

    @classmethod
    def from_config(cls, config: EncoderConfig, **kwargs) -> "SequenceClassifier":
        return cls(EncoderModel(config), **kwargs)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def pooled(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return pool(self.encoder(ids, mask), mask, self.pooling)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return classify_logits(self.head, self.pooled(ids, mask))


# ---- Persistence -------------------------------------------------------------

def save_model(
    model: EncoderModel | SequenceClassifier,
    directory: Path,
    tokenizer: Optional[CrisisTokenizer] = None,
) -> Path:
    """Model directory: config.json + weights.bin/weights.json (+ tokenizer files when given)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta: dict = {"config": model.config.model_dump()}
    if isinstance(model, SequenceClassifier):
        meta.update(
            kind="classifier",
            pooling=model.pooling.value,
            class_names=model.class_names,
            tokenizer_fingerprint=model.tokenizer_fingerprint,
        )
    else:
        meta["kind"] = "encoder"
    if tokenizer is not None:
        meta["tokenizer_fingerprint"] = tokenizer.fingerprint
        tokenizer.save(directory)
    (directory / MODEL_CONFIG_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    save_checkpoint(directory, model.state_dict())
    return directory


def load_model(directory: Path) -> tuple[EncoderModel | SequenceClassifier, Optional[CrisisTokenizer]]:
    directory = Path(directory)
    cfg_path = directory / MODEL_CONFIG_FILE
    if not cfg_path.exists():
        raise MissingInputError(f"no model at {directory}")
    meta = json.loads(cfg_path.read_text(encoding="utf-8"))
    config = EncoderConfig(**meta["config"])
    model: EncoderModel | SequenceClassifier
    if meta.get("kind") == "classifier":
        model = SequenceClassifier(
            EncoderModel(config),
            pooling=PoolingMode.parse(meta["pooling"]),
            class_names=meta.get("class_names") or (),
            tokenizer_fingerprint=meta.get("tokenizer_fingerprint"),
        )
    else:
        model = EncoderModel(config)
    state = load_checkpoint(directory)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ConfigError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")

    tokenizer = None
    try:
        tokenizer = CrisisTokenizer.load(directory)
    except FileNotFoundError:
        pass
    return model, tokenizer
