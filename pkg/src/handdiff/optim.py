"""Parameter store, AdamW update and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"HDIFFCKP"
    uint32    format version (1)
    uint32    parameter count
    per parameter, in store order:
        uint32    name length in bytes
        bytes     UTF-8 name
        uint32    rank
        uint64    each dimension (rank entries)
        float64   values, row-major, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from handdiff.autodiff import Tensor

MAGIC = b"HDIFFCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named trainable tensors plus AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros(t.shape)
        self.v[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_values(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def adamw_step(store, grads, lr=1e-3, beta1=0.5, beta2=0.999, weight_decay=0.01, eps=1e-8):
    """One AdamW update (decoupled weight decay) in place; parameters without a
    gradient are left untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    unknown = set(grads) - set(store.params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters {sorted(unknown)}")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data * (1.0 - lr * weight_decay) - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


def save_checkpoint(store, path):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store.params))]
    for name, t in store.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Parse a checkpoint into an ordered ``{name: array}`` dict."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n, f"values of {name}"), dtype="<f8").astype(
            np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return out


def load_checkpoint(store, path):
    store.load_state(read_checkpoint(path))
    return store
