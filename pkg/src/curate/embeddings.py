"""Embedding sets and the EMB1 flat file format.

EMB1 layout (little-endian)::

    0   4s  magic b"EMB1"
    4   u32 version (1)
    8   u64 N
    16  u32 D
    20  u8  dtype (0 = float32)
    21  u8  flags (bit0 = rows are unit-norm)
    22  14 reserved zero bytes
    36  N*D float32, row-major

Ids are 0..N-1 unless a sidecar file of N little-endian u64 values is present
(by default ``<path>.ids``).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatError, UnknownId, ZeroVector

MAGIC = b"EMB1"
VERSION = 1
HEADER = struct.Struct("<4sIQIBB14x")
NORM_ATOL = 1e-4
ZERO_NORM = 1e-12


@dataclass
class EmbeddingSet:
    """N row vectors with stable integer ids."""

    ids: np.ndarray
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionMismatch(f"expected an N x D matrix, got shape {self.data.shape}")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.ids) != len(self.data):
            raise DimensionMismatch(f"{len(self.ids)} ids for {len(self.data)} rows")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")
        if self.normalized and len(self.data):
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_ATOL)
            if len(bad):
                raise ValueError(f"row for id {self.ids[bad[0]]} is not unit-norm")

    @classmethod
    def from_array(cls, data, ids=None, normalized: bool = False) -> "EmbeddingSet":
        data = np.asarray(data, dtype=np.float32)
        if ids is None:
            ids = np.arange(len(data), dtype=np.int64)
        return cls(ids=ids, data=data, normalized=normalized)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def subset(self, ids) -> "EmbeddingSet":
        """Rows for ``ids`` (in the given order)."""
        pos = self.positions(ids)
        return EmbeddingSet(self.ids[pos], self.data[pos], self.normalized)

    def positions(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        loc = np.searchsorted(sorted_ids, ids)
        loc = np.clip(loc, 0, max(len(sorted_ids) - 1, 0))
        if len(ids) and (len(sorted_ids) == 0 or np.any(sorted_ids[loc] != ids)):
            missing = ids[sorted_ids[loc] != ids] if len(sorted_ids) else ids
            raise UnknownId(f"unknown id {int(missing[0])}")
        return order[loc]


def l2_normalize(es: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm (norm taken in float64)."""
    x = es.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms < ZERO_NORM)
    if len(zero):
        raise ZeroVector(int(es.ids[zero[0]]))
    return EmbeddingSet(es.ids.copy(), (x / norms[:, None]).astype(np.float32), normalized=True)


def sidecar_path(path) -> str:
    return os.fspath(path) + ".ids"


def write_emb(path, es: EmbeddingSet, ids_path=None) -> None:
    """Write ``es`` as EMB1; a sidecar id file is written unless ids are 0..N-1."""
    n, d = es.data.shape
    flags = 1 if es.normalized else 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, 0, flags))
        fh.write(np.ascontiguousarray(es.data, dtype="<f4").tobytes())
    implicit = np.array_equal(es.ids, np.arange(n))
    ids_path = ids_path or sidecar_path(path)
    if not implicit:
        with open(ids_path, "wb") as fh:
            fh.write(es.ids.astype("<u8").tobytes())
    elif os.path.exists(ids_path):
        os.remove(ids_path)


def read_header(fh) -> tuple[int, int, int]:
    raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise FormatError("truncated EMB1 header")
    magic, version, n, d, dtype, flags = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported EMB1 version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}")
    return n, d, flags


def read_emb(path, ids_path=None) -> EmbeddingSet:
    with open(path, "rb") as fh:
        n, d, flags = read_header(fh)
        payload = fh.read()
    if len(payload) != n * d * 4:
        raise FormatError(f"payload has {len(payload)} bytes, expected {n * d * 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    ids_path = ids_path or sidecar_path(path)
    if os.path.exists(ids_path):
        ids = np.fromfile(ids_path, dtype="<u8").astype(np.int64)
        if len(ids) != n:
            raise FormatError(f"id sidecar has {len(ids)} entries for {n} rows")
    else:
        ids = np.arange(n, dtype=np.int64)
    return EmbeddingSet(ids, data, normalized=bool(flags & 1))
