"""Parameter storage, AdamW, learning-rate schedule and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"XMCL"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named parameters, iterated in lexicographic path order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(p, self._params[p]) for p in self.paths()]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for _, t in self.items()])

    def copy_from(self, other: "ParamStore") -> None:
        for p, t in other.items():
            self._params[p].data[...] = t.data


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, state: AdamWState) -> None:
    """One AdamW update with decoupled weight decay, then zero the grads."""
    items = params.items()
    for path, t in items:
        if t.grad is None:
            raise ValueError(f"adamw_step: parameter {path!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for path, t in items:
        g = t.grad
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(t.data)
            state.v[path] = np.zeros_like(t.data)
        v = state.v[path]
        if state.weight_decay:
            t.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = np.zeros_like(t.data)


def decayed_lr(base_lr: float, decay: float, epoch: int) -> float:
    """Per-epoch exponential schedule: ``base_lr * decay**epoch``."""
    return base_lr * decay ** epoch


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    manifest = [{"path": p, "shape": list(t.shape)} for p, t in params.items()]
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    body = b"".join(t.data.astype("<f8").tobytes() for _, t in params.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(body)


def read_checkpoint(path: str | Path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9 or raw[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version")
    (n,) = struct.unpack_from("<I", raw, 5)
    try:
        manifest = json.loads(raw[9 : 9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest at offset 9: {exc}") from exc
    offset = 9 + n
    out = []
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at offset {offset} ({entry['path']})")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        out.append((entry["path"], arr))
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def load_checkpoint(params: ParamStore, path: str | Path) -> None:
    """Load values into an existing store; paths and shapes must match exactly."""
    entries = read_checkpoint(path)
    got = {p for p, _ in entries}
    want = set(params.paths())
    if got != want:
        missing = sorted(want - got)[:3]
        extra = sorted(got - want)[:3]
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for p, arr in entries:
        t = params[p]
        if t.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p}: {arr.shape} vs {t.shape}")
        t.data[...] = arr
