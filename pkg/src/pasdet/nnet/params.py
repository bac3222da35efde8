"""Named parameter storage, checkpoint files and the momentum-SGD update.

Checkpoint byte layout (all integers little-endian)::

    magic      8 bytes   b"PASDCKPT"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (free-form, may be "{}")
    count      u32       number of tensors
    then, per tensor, in name order:
        name_len  u32
        name      bytes   UTF-8
        ndim      u32
        dims      u64 * ndim
        payload   f64 little-endian, row-major, prod(dims) values
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"PASDCKPT"
VERSION = 1


class ParamStore:
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def glorot(self, name, fan_in, fan_out):
        """Uniform init in +-sqrt(6/(fan_in+fan_out)); stream keyed by name."""
        rng = np.random.default_rng([self.seed, _name_key(name)])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        """Gradients by name; parameters the last backward never reached get zeros."""
        return {n: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for n, t in self._params.items()}

    def state(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, arrays):
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n, t in self._params.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n}: {a.shape} vs {t.data.shape}")
            t.data = a.copy()

    def copy(self):
        other = ParamStore(self.seed)
        for n, t in self._params.items():
            other.add(n, t.data.copy())
        return other


def _name_key(name):
    # stable across runs and platforms, unlike hash()
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, store, lr, momentum=0.9):
        self.store = store
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self, grads=None):
        grads = self.store.grads() if grads is None else grads
        for n, t in self.store.items():
            v = self.velocity[n]
            v *= self.momentum
            v += grads[n]
            t.data = t.data - self.lr * v


def save_tensors(path, tensors, meta=None):
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_tensors(path):
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        return _parse(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse(buf, path):
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, meta
