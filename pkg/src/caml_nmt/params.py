"""Named parameter storage with exact snapshot/restore and a binary file format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"CAMLSNAP"
VERSION = 1

ROLE_PREFIXES = {"enc": "encoder", "dec": "decoder", "rec": "reconstruction"}


class SnapshotMismatch(ValueError):
    pass


class ParamSnapshot(dict):
    """Plain ``path -> ndarray`` copy of parameter values."""

    def save(self, path):
        write_snapshot(self, path)

    @classmethod
    def load(cls, path):
        return read_snapshot(path)


class ModelParams:
    """Ordered map of parameter path to leaf :class:`Tensor`.

    Paths start with a role prefix: ``enc.`` (encoder), ``dec.`` (decoder) or
    ``rec.`` (reconstruction head).
    """

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter path {name!r}")
        if name.split(".", 1)[0] not in ROLE_PREFIXES:
            raise KeyError(f"parameter path {name!r} lacks a role prefix")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, roles=None):
        if roles is None:
            return list(self._tensors)
        return [n for n in self._tensors if n.split(".", 1)[0] in roles]

    def num_parameters(self, roles=None):
        return int(sum(self._tensors[n].data.size for n in self.names(roles)))

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def snapshot(self):
        return ParamSnapshot((n, t.data.copy()) for n, t in self._tensors.items())

    def restore(self, snap):
        if set(snap) != set(self._tensors):
            missing = sorted(set(self._tensors) ^ set(snap))
            raise SnapshotMismatch(f"snapshot paths differ: {missing}")
        for n, t in self._tensors.items():
            if snap[n].shape != t.data.shape:
                raise SnapshotMismatch(f"{n}: shape {snap[n].shape} vs {t.data.shape}")
        for n, t in self._tensors.items():
            t.data = snap[n].copy()

    def clone(self):
        """Fresh parameter set with copied values and no gradients."""
        return ModelParams({n: Tensor(t.data.copy()) for n, t in self._tensors.items()})

    @classmethod
    def from_snapshot(cls, snap):
        return cls({n: Tensor(v.copy()) for n, v in snap.items()})


def snapshot(params):
    return params.snapshot()


def restore(params, snap):
    params.restore(snap)


def write_snapshot(snap, path):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(snap))]
    for name, value in snap.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_snapshot(path):
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise SnapshotMismatch(f"{path}: not a parameter snapshot")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise SnapshotMismatch(f"{path}: unsupported version {version}")
    pos = 16
    snap = ParamSnapshot()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        snap[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return snap
