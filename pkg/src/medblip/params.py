"""Named parameter registry with freeze flags, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"MBLP" | version u32 | rng_seed u64 | record count u32 | records...
    record: name_len u32 | name utf-8 | frozen u8 | rank u32 | dims u32*rank
            | dtype u8 | payload (little-endian floats, row-major)
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, NonFiniteError, ShapeError

MAGIC = b"MBLP"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class FreezeError(RuntimeError):
    """A frozen parameter was offered to something that would change it."""


class ParamStore:
    """Map from dotted name to a parameter tensor plus a frozen flag.

    Iteration is always in lexicographic name order so that anything derived
    from a store (optimizer updates, checkpoints, counts) is deterministic.
    """

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name, value, frozen=False):
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(value, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} has non-finite values")
        self._tensors[name] = Tensor(arr, requires_grad=not frozen)
        self._frozen[name] = bool(frozen)
        return self._tensors[name]

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self, prefix=""):
        return sorted(n for n in self._tensors if n.startswith(prefix))

    def items(self):
        for n in self.names():
            yield n, self._tensors[n]

    def is_frozen(self, name):
        return self._frozen[name]

    def set_frozen(self, name, frozen=True):
        self._frozen[name] = bool(frozen)
        self._tensors[name].requires_grad = not frozen

    def freeze(self, prefix):
        for n in self.names(prefix):
            self.set_frozen(n, True)

    def learnable_names(self):
        return [n for n in self.names() if not self._frozen[n]]

    def count(self, learnable_only=False, prefix=""):
        return sum(
            self._tensors[n].data.size
            for n in self.names(prefix)
            if not (learnable_only and self._frozen[n])
        )

    def assign(self, name, value):
        t = self._tensors[name]
        value = np.asarray(value, dtype=t.dtype)
        if value.shape != t.shape:
            raise ShapeError(f"assign {name!r}: shape {value.shape} != {t.shape}")
        t.data = value.copy()

    def astype(self, dtype):
        out = ParamStore(self.rng_seed)
        for n, t in self.items():
            out.add(n, t.data.astype(dtype), frozen=self._frozen[n])
        return out

    def copy(self):
        out = ParamStore(self.rng_seed)
        for n, t in self.items():
            out.add(n, t.data, frozen=self._frozen[n])
        return out

    def snapshot(self):
        """Copies of every array, keyed by name."""
        return {n: t.data.copy() for n, t in self.items()}

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    @property
    def dtype(self):
        for t in self._tensors.values():
            return t.dtype
        return np.dtype(np.float32)


def gradients(loss, store):
    """Reverse-mode gradients of scalar ``loss`` for every learnable entry.

    Learnable parameters the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"gradients: loss must be a scalar, got shape {loss.shape}")
    store.zero_grad()
    backward(loss)
    grads = {}
    for name in store.learnable_names():
        t = store[name]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name!r} is not finite")
        grads[name] = g
    store.zero_grad()
    return grads


# --------------------------------------------------------------------------
# checkpoint I/O


def _encode(store):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQI", VERSION, store.rng_seed & 0xFFFFFFFFFFFFFFFF, len(store)))
    for name, t in store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", int(store.is_frozen(name)), t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        code = _DTYPE_CODES[t.dtype]
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes())
    return buf.getvalue()


def save_checkpoint(store, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(store))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect=None):
    """Read a checkpoint into a new store.

    ``expect`` is an optional store whose names/shapes the file must match.
    Nothing is returned unless the whole file parses.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MBLP checkpoint")
    version, seed, count = r.unpack("<IQI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    store = ParamStore(seed)
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        frozen, rank = r.unpack("<BI")
        dims = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        store.add(name, arr.astype(dt.newbyteorder("="), copy=True), frozen=bool(frozen))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    if expect is not None:
        check_compatible(store, expect)
    return store


def check_compatible(store, expect):
    if store.names() != expect.names():
        missing = set(expect.names()) - set(store.names())
        extra = set(store.names()) - set(expect.names())
        raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
    for n in store.names():
        if store[n].shape != expect[n].shape:
            raise CheckpointError(f"shape mismatch for {n!r}: {store[n].shape} vs {expect[n].shape}")
