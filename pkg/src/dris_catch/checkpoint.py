"""Named float64 tensors and a versioned binary container for them.

Layout (all integers little-endian)::

    magic      8 bytes  b"DRISCKPT"
    version    u32
    meta_len   u64, followed by meta_len bytes of UTF-8 JSON
    count      u32
    count x:   name_len u16, name bytes, ndim u8, ndim x u64 dims,
               prod(dims) x f64 payload (row-major)
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Iterator, Mapping

import numpy as np
import torch

MAGIC = b"DRISCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore(Mapping):
    """Ordered mapping of unique names to finite float64 arrays with fixed shapes."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None, metadata: dict | None = None):
        self._data: dict[str, np.ndarray] = {}
        self.metadata = dict(metadata or {})
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        arr = np.array(value, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in {name!r}")
        arr.flags.writeable = False
        self._data[name] = arr

    def update(self, name: str, value) -> None:
        """Replace values of an existing tensor; its shape cannot change."""
        arr = np.array(value, dtype=np.float64, order="C")
        if arr.shape != self._data[name].shape:
            raise CheckpointError(f"shape of {name!r} is fixed at {self._data[name].shape}, got {arr.shape}")
        del self._data[name]
        self.add(name, arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore) or list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self) \
            and self.metadata == other.metadata

    __hash__ = None

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", metadata: dict | None = None) -> "ParamStore":
        store = cls(metadata=metadata)
        for name, t in module.state_dict().items():
            store.add(prefix + name, t.detach().cpu().numpy())
        return store

    def load_into(self, module: torch.nn.Module, prefix: str = "") -> None:
        """Copy tensors into ``module``; names and shapes must match exactly."""
        own = module.state_dict()
        wanted = {prefix + k for k in own}
        missing = wanted - set(self)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        new = {}
        for k, t in own.items():
            arr = self[prefix + k]
            if tuple(t.shape) != arr.shape:
                raise CheckpointError(f"shape mismatch for {k}: model {tuple(t.shape)}, checkpoint {arr.shape}")
            new[k] = torch.from_numpy(arr.copy()).to(t.dtype)
        module.load_state_dict(new)

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)})


def save_checkpoint(params: ParamStore, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(params.metadata, sort_keys=True).encode()
    parts += [struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.astype("<f8").tobytes()]
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    store = ParamStore(metadata=metadata)
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        store.add(name, arr.astype(np.float64))
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return store
