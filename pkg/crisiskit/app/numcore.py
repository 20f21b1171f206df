from __future__ import annotations

import json
import logging
import random
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, NumericalError, ShapeError

log = logging.getLogger("crisiskit.numcore")

CHECKPOINT_BIN = "weights.bin"
CHECKPOINT_MANIFEST = "weights.json"

# ---- Precision / determinism -------------------------------------------------

@contextmanager
def verification_mode() -> Iterator[None]:
    """64-bit default dtype for the duration of the block (gradient checks only)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def seed_everything(seed: int, single_thread: bool = False) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


# ---- Losses ------------------------------------------------------------------

def _require_finite(t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NumericalError("non-finite input")


def _require_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _require_finite(logits)
    # torch subtracts the row max internally
    return torch.softmax(logits, dim=axis)


def kl_divergence(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """T² · KL(softmax(teacher/T) ‖ softmax(student/T)), averaged over the batch."""
    _require_same_shape(teacher_logits, student_logits)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if teacher_logits.dim() == 1:
        teacher_logits, student_logits = teacher_logits.unsqueeze(0), student_logits.unsqueeze(0)
    log_p = F.log_softmax(teacher_logits / temperature, dim=-1)
    log_q = F.log_softmax(student_logits / temperature, dim=-1)
    kl = F.kl_div(log_q, log_p, reduction="batchmean", log_target=True)
    return kl * (temperature**2)


def cross_entropy(
    logits: torch.Tensor,
    target: int | torch.Tensor,
    weight: float | torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Single sample (1-D logits, int target): −weight · log softmax(logits)[target].
    Batch (2-D logits, target tensor, optional per-class weight tensor):
    Σ w_i·l_i / Σ w_i, which with unit weights is exactly the plain mean.
    """
    num_classes = logits.shape[-1]
    if logits.dim() == 1:
        idx = int(target)
        if not 0 <= idx < num_classes:
            raise IndexError(f"class index {idx} out of range for {num_classes} classes")
        w = 1.0 if weight is None else weight
        return -w * F.log_softmax(logits, dim=-1)[idx]

    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise IndexError(f"class index out of range for {num_classes} classes")
    losses = -F.log_softmax(logits, dim=-1).gather(1, target.unsqueeze(1)).squeeze(1)
    if weight is None:
        per_sample = torch.ones_like(losses)
    else:
        per_sample = torch.as_tensor(weight, dtype=losses.dtype)[target]
    return (per_sample * losses).sum() / per_sample.sum()


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require_same_shape(a, b)
    return F.mse_loss(a, b, reduction="mean")


# ---- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam over a fixed parameter list, no weight decay."""

    params: list[torch.Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self):
        self.params = [p for p in self.params if p.requires_grad]
        self.optimizer = torch.optim.Adam(
            self.params, lr=self.lr, betas=(self.beta1, self.beta2), eps=self.eps, weight_decay=0.0
        )

    @property
    def step(self) -> int:
        steps = [s["step"] for s in self.optimizer.state.values() if "step" in s]
        return int(max(steps)) if steps else 0

    def moments(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor] | None:
        s = self.optimizer.state.get(p)
        if not s:
            return None
        return s["exp_avg"], s["exp_avg_sq"]

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None] | None,
    state: AdamState,
) -> AdamState:
    """
    Apply one Adam update. `grads` overrides whatever .grad holds; pass None to use
    the gradients left by backward(). `params` must be tensors the state optimizes.
    Any non-finite gradient aborts with DivergenceError.
    """
    managed = {id(p) for p in state.params}
    if any(id(p) not in managed for p in params):
        raise ConfigError("adam_step got a parameter this AdamState does not optimize")
    if grads is not None:
        if len(grads) != len(params):
            raise ShapeError("params and grads differ in length")
        for p, g in zip(params, grads):
            if g is not None and g.shape != p.shape:
                raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            p.grad = None if g is None else g.detach().clone()
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError("diverged")
    state.optimizer.step()
    return state


# ---- Gradient check ----------------------------------------------------------

def grad_check(
    f: Callable[..., torch.Tensor],
    point: torch.Tensor | Sequence[torch.Tensor],
    step: float = 1e-5,
    atol: float = 1e-6,
) -> float:
    """
    Max relative error between autograd and central finite differences over every
    coordinate of `point`. f is called as f(*point) and must return a scalar; the
    denominator is floored at `atol` so near-zero gradients don't blow up the ratio.
    """
    tensors = [point] if isinstance(point, torch.Tensor) else list(point)
    for t in tensors:
        if not t.requires_grad:
            t.requires_grad_(True)
        t.grad = None

    out = f(*tensors)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar function")
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            a = torch.zeros_like(t) if a is None else a
            flat = t.view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = f(*tensors).item()
                flat[i] = orig - step
                minus = f(*tensors).item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                exact = a_flat[i].item()
                denom = max(abs(exact), abs(numeric), atol)
                worst = max(worst, abs(exact - numeric) / denom)
    return worst


# ---- Checkpoints -------------------------------------------------------------

def save_checkpoint(directory: Path, tensors: Mapping[str, torch.Tensor]) -> tuple[Path, Path]:
    """
    Flat float32 little-endian blob + JSON manifest {name: {shape, offset}} (offset in bytes).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, dict] = {}
    offset = 0
    bin_path = directory / CHECKPOINT_BIN
    with bin_path.open("wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            fh.write(arr.tobytes(order="C"))
            manifest[name] = {"shape": list(arr.shape), "offset": offset}
            offset += arr.nbytes
    man_path = directory / CHECKPOINT_MANIFEST
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return bin_path, man_path


def load_checkpoint(directory: Path) -> dict[str, torch.Tensor]:
    directory = Path(directory)
    manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
    blob = (directory / CHECKPOINT_BIN).read_bytes()
    out: dict[str, torch.Tensor] = {}
    for name, meta in manifest.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=meta["offset"]).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def all_finite(tensors: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
