"""Named trainable parameters and the binary checkpoint format.

Checkpoint layout (little-endian):
    magic   4 bytes  b"INKW"
    version u32      currently 1
    count   u32      number of parameters
    then per parameter:
        id_len  u16
        id      id_len bytes, utf-8
        rank    u8
        dims    rank * u32
        data    prod(dims) * f32, raw
"""
from __future__ import annotations

import struct

import numpy as np

from .autograd import Tensor

MAGIC = b"INKW"
VERSION = 1


class CheckpointError(Exception):
    pass


class Parameter:
    __slots__ = ("id", "tensor")

    def __init__(self, pid, data):
        self.id = pid
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.ascontiguousarray(value, dtype=np.float32)

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.tensor.shape})"


class ParameterStore:
    """Ordered mapping of id -> Parameter plus the PRNG used for init."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)
        self._params = {}

    def __contains__(self, pid):
        return pid in self._params

    def __len__(self):
        return len(self._params)

    def get(self, pid):
        if pid not in self._params:
            raise KeyError(f"unbound parameter id: {pid!r}")
        return self._params[pid]

    def add(self, pid, data):
        if pid in self._params:
            raise ValueError(f"duplicate parameter id: {pid!r}")
        p = Parameter(pid, data)
        self._params[pid] = p
        return p

    def replace(self, pid, data):
        """Swap in fresh values under an existing id; returns the new Parameter."""
        if pid not in self._params:
            raise KeyError(f"unbound parameter id: {pid!r}")
        p = Parameter(pid, data)
        self._params[pid] = p
        return p

    def parameters(self):
        return list(self._params.values())

    def ids(self):
        return list(self._params.keys())

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.grad = None

    def count_values(self):
        return sum(p.data.size for p in self._params.values())

    # -- initializers ------------------------------------------------------

    def init_weight(self, pid, shape, fan_in):
        """Fan-in scaled normal: std = sqrt(2 / fan_in)."""
        std = np.sqrt(2.0 / fan_in)
        return self.add(pid, self.rng.normal(0.0, std, size=shape).astype(np.float32))

    def init_zeros(self, pid, shape):
        return self.add(pid, np.zeros(shape, dtype=np.float32))

    def init_ones(self, pid, shape):
        return self.add(pid, np.ones(shape, dtype=np.float32))


def save_checkpoint(store, path):
    params = store.parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            ident = p.id.encode("utf-8")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            shape = p.data.shape
            f.write(struct.pack("<B", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, seed=0):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        store = ParameterStore(seed=seed)
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            pid = blob[off : off + id_len].decode("utf-8")
            off += id_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            store.add(pid, data.reshape(dims).copy())
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated checkpoint at byte {off}: {e}") from e
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last parameter")
    return store
