# crisiskit/app/config.py
from __future__ import annotations

import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .bench import BenchConfig
from .corpus import DEFAULT_MAX_LENGTH, DEFAULT_VOCAB_SIZE
from .dataset_builder import FORCED_INCLUSION_THRESHOLD
from .distill import GenericDistillConfig, TaskDistillConfig
from .errors import ConfigError, MissingInputError
from .finetune import FinetuneConfig, SplitSpec
from .hashing import artifact_digests, digest_fields

ENV_PREFIX = "CRISIS_"
ENV_CONFIG = "CRISIS_CONFIG"
DEFAULT_CONFIG_NAME = "crisiskit.json"
MANIFEST_NAME = "manifest.json"


class TokenizerBlock(BaseModel):
    vocab_size: int = DEFAULT_VOCAB_SIZE
    max_length: int = DEFAULT_MAX_LENGTH


class SampleBlock(BaseModel):
    margin: float = 0.03
    confidence: float = 0.95
    forced_threshold: int = FORCED_INCLUSION_THRESHOLD


class RunConfig(BaseModel):
    """Resolved configuration of one CLI run; every stage reads its own block."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 42
    out: Path = Path("out")
    actor: str = "cli"
    verbose: bool = False
    tokenizer: TokenizerBlock = Field(default_factory=TokenizerBlock)
    split: SplitSpec = Field(default_factory=SplitSpec)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    task_distill: TaskDistillConfig = Field(default_factory=TaskDistillConfig)
    generic_distill: GenericDistillConfig = Field(default_factory=GenericDistillConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    sample: SampleBlock = Field(default_factory=SampleBlock)


# ---- Layer merging -----------------------------------------------------------

def _deep_merge(base: dict, over: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(env: Mapping[str, str]) -> dict:
    """
    CRISIS_SEED=7 -> {"seed": 7}; CRISIS_FINETUNE__MAX_EPOCHS=5 -> {"finetune": {"max_epochs": 5}}.
    Values are read as JSON when they parse, else kept as strings.
    """
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX) or key == ENV_CONFIG:
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _coerce(raw)
    return out


def _config_file(explicit: Optional[Path], env: Mapping[str, str]) -> Optional[Path]:
    """
    Search order:
      1) --config flag
      2) CRISIS_CONFIG env var
      3) ./crisiskit.json when present
    """
    if explicit is not None:
        p = Path(explicit).expanduser()
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        return p
    env_path = env.get(ENV_CONFIG)
    if env_path:
        p = Path(env_path).expanduser()
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        return p
    local = Path.cwd() / DEFAULT_CONFIG_NAME
    return local if local.exists() else None


def load_run_config(
    config_path: Optional[Path] = None,
    flags: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """defaults < JSON file < CRISIS_* environment < command-line flags."""
    env = os.environ if env is None else env
    layers: dict = {}
    path = _config_file(config_path, env)
    if path is not None:
        try:
            layers = _deep_merge(layers, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from e
    layers = _deep_merge(layers, env_overrides(env))
    layers = _deep_merge(layers, {k: v for k, v in (flags or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(layers)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']}") from e


def require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise MissingInputError(f"{what} not given")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


# ---- Manifests ---------------------------------------------------------------

def manifest_body(stage: str, cfg: RunConfig, seed: int, artifacts: Mapping[str, Path], extra: Optional[dict] = None) -> dict:
    return {
        "stage": stage,
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "artifacts": artifact_digests(dict(artifacts)),
        "extra": extra or {},
    }


def write_manifest(
    out_dir: Path,
    stage: str,
    cfg: RunConfig,
    seed: int,
    artifacts: Mapping[str, Path],
    extra: Optional[dict] = None,
) -> tuple[Path, str]:
    """
    Writes <out>/<stage>.manifest.json. The returned hash covers everything but
    `created_at`, so identical reruns hash identically.
    """
    body = manifest_body(stage, cfg, seed, artifacts, extra)
    digest = digest_fields(json.dumps(body, sort_keys=True))
    doc = {**body, "manifest_hash": digest, "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    path = Path(out_dir) / f"{stage}.{MANIFEST_NAME}"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path, digest
