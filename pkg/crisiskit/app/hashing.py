from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any


def digest_fields(*fields: Any) -> str:
    """
    Stable SHA-256 over a list of fields (record separator between them).
    Used for tokenizer fingerprints and manifest hashes.
    """
    h = hashlib.sha256()
    for f in fields:
        h.update(str(f).encode("utf-8", "ignore"))
        h.update(b"\x1e")  # sep
    return h.hexdigest()


def file_digest(path: Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def artifact_digests(paths: dict[str, Path]) -> dict[str, str]:
    """name -> sha256 for every artifact that is a file; directories are hashed file by file."""
    out: dict[str, str] = {}
    for name, p in sorted(paths.items()):
        p = Path(p)
        if p.is_file():
            out[name] = file_digest(p)
        elif p.is_dir():
            for child in sorted(q for q in p.rglob("*") if q.is_file()):
                out[f"{name}/{child.relative_to(p).as_posix()}"] = file_digest(child)
    return out


def derive_seed(seed: int, stream: str) -> int:
    """Expand the global seed into an independent seed for a named stream."""
    raw = hashlib.sha256(f"{int(seed)}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "little") % (2**31 - 1)
