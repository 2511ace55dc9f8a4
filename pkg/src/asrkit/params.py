"""Named parameter store with group tagging, Adam, and checkpoint I/O.

Every trainable tensor belongs to exactly one of four groups; freezing a
group removes it from optimizer state entirely, so frozen tensors stay
bit-identical across a training stage.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterable

import numpy as np

from asrkit.autodiff import Tensor
from asrkit.errors import DataError, DivergenceError

GROUPS = ("uni_enc", "bi_enc", "mocha_dec", "bfa_dec")
ENCODER_GROUPS = ("uni_enc", "bi_enc")

CHECKPOINT_MAGIC = b"ASRC"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered name -> (tensor, group) map with per-group trainable flags."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}
        self.trainable_groups: set[str] = set(GROUPS)

    def add(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = group in self.trainable_groups
        self._entries[name] = (tensor, group)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def group_of(self, name: str) -> str:
        return self._entries[name][1]

    def items(self) -> Iterable[tuple[str, Tensor, str]]:
        for name, (t, g) in self._entries.items():
            yield name, t, g

    def tensors(self, groups: Iterable[str] | None = None) -> list[Tensor]:
        if groups is None:
            return [t for t, _ in self._entries.values()]
        wanted = set(groups)
        return [t for t, g in self._entries.values() if g in wanted]

    def set_frozen(self, frozen_groups: Iterable[str]) -> None:
        frozen = set(frozen_groups)
        unknown = frozen - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups in freeze set: {sorted(unknown)}")
        self.trainable_groups = set(GROUPS) - frozen
        for t, g in self._entries.values():
            t.requires_grad = g in self.trainable_groups

    def zero_grad(self) -> None:
        for t, _ in self._entries.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        dup.trainable_groups = set(self.trainable_groups)
        for name, (t, g) in self._entries.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            dup._entries[name] = (nt, g)
        return dup

    def astype(self, dtype) -> "ParamStore":
        dup = ParamStore()
        dup.trainable_groups = set(self.trainable_groups)
        for name, (t, g) in self._entries.items():
            nt = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            dup._entries[name] = (nt, g)
        return dup

    def load_values_from(self, other: "ParamStore") -> None:
        """Copy tensor values from a shape-compatible store (hard transfer)."""
        if set(other.names()) != set(self.names()):
            missing = set(self.names()) ^ set(other.names())
            raise DataError(f"parameter name mismatch, offending tensors: {sorted(missing)}")
        for name, (t, _) in self._entries.items():
            src = other[name]
            if src.data.shape != t.data.shape:
                raise DataError(
                    f"shape mismatch for tensor {name!r}: "
                    f"{src.data.shape} vs {t.data.shape}"
                )
            t.data = src.data.astype(t.data.dtype, copy=True)


class Adam:
    """Adam with global gradient-norm clipping.

    Moment state exists only for tensors in trainable groups, so frozen
    groups cannot drift through stale adaptive moments.
    """

    def __init__(
        self,
        params: ParamStore,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float = 5.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, tensor, group in params.items():
            if group in params.trainable_groups:
                self._state[name] = (
                    np.zeros_like(tensor.data, dtype=np.float32),
                    np.zeros_like(tensor.data, dtype=np.float32),
                )

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self, grad_scale: float = 1.0) -> float:
        """Apply accumulated gradients. Returns the pre-clip gradient norm."""
        grads: dict[str, np.ndarray] = {}
        sq = 0.0
        for name in self._state:
            tensor = self.params[name]
            if tensor.grad is None:
                continue
            g = tensor.grad * np.float32(grad_scale)
            grads[name] = g
            sq += float(np.sum(g.astype(np.float64) ** 2))
        norm = float(np.sqrt(sq))
        if not np.isfinite(norm):
            raise DivergenceError(f"non-finite gradient norm at optimizer step {self.t + 1}")
        if not grads:
            return norm
        factor = np.float32(1.0)
        if self.clip_norm > 0 and norm > self.clip_norm:
            factor = np.float32(self.clip_norm / norm)
        self.t += 1
        b1 = np.float32(self.beta1)
        b2 = np.float32(self.beta2)
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        step_size = np.float32(self.lr * np.sqrt(bias2) / bias1)
        eps = np.float32(self.eps)
        for name, g in grads.items():
            g = g * factor
            m, v = self._state[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            tensor = self.params[name]
            tensor.data -= step_size * m / (np.sqrt(v) + eps)
        return norm


# ---------------------------------------------------------------------------
# initialization


def init_uniform(shape: tuple[int, ...], rng: np.random.Generator, scale: float = 0.05, dtype=np.float32) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# checkpoint I/O


def config_digest(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: ParamStore, meta: dict) -> None:
    """Binary checkpoint: magic, version, JSON metadata, per-tensor records."""
    meta = dict(meta)
    meta.setdefault("groups", list(GROUPS))
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        names = params.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = params[name]
            group = params.group_of(name)
            nb = name.encode()
            gb = group.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<H", len(gb)))
            f.write(gb)
            shape = tensor.data.shape
            f.write(struct.pack("<I", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
            f.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode())
        (count,) = struct.unpack("<I", f.read(4))
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (glen,) = struct.unpack("<H", f.read(2))
            group = f.read(glen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n_values = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(f.read(4 * n_values), dtype="<f4").reshape(shape)
            store.add(name, Tensor(values.astype(np.float32), requires_grad=True), group)
    return store, meta
