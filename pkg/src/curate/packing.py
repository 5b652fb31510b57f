"""Sequence packing under a block-diagonal attention mask, and slice-based
stochastic depth.

Packing concatenates variable-length token sequences along the token axis;
the mask forbids attention across sequence boundaries, so one forward over
the packed tokens equals separate forwards over each sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BadRate, DimensionMismatch, EmptyInput, LengthMismatch, ShapeMismatch
from .rng import permutation

LAYERSCALE_INIT = 1e-5


@dataclass(frozen=True)
class PackedBatch:
    tokens: np.ndarray
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"boundaries must start at 0 and strictly increase: {b}")
        if b[-1] != len(self.tokens):
            raise ValueError("last boundary must equal the total token count")

    @property
    def lengths(self) -> list[int]:
        return [y - x for x, y in zip(self.boundaries, self.boundaries[1:])]

    def unpack(self) -> list[np.ndarray]:
        return [self.tokens[x:y] for x, y in zip(self.boundaries, self.boundaries[1:])]


def pack(sequences: Sequence[np.ndarray]) -> PackedBatch:
    if not len(sequences):
        raise EmptyInput("nothing to pack")
    seqs = [np.atleast_2d(np.asarray(s)) for s in sequences]
    d = seqs[0].shape[1]
    for s in seqs:
        if s.shape[1] != d:
            raise DimensionMismatch(f"token dims {d} and {s.shape[1]} differ")
        if len(s) < 1:
            raise EmptyInput("sequences must have at least one token")
    bounds = np.concatenate([[0], np.cumsum([len(s) for s in seqs])])
    return PackedBatch(np.concatenate(seqs, axis=0), tuple(int(x) for x in bounds))


def unpack(batch: PackedBatch) -> list[np.ndarray]:
    return batch.unpack()


class BlockDiagonalMask:
    """Attention allowed iff query and key fall in the same block."""

    def __init__(self, boundaries: Sequence[int]):
        self.boundaries = tuple(int(b) for b in boundaries)
        self._starts = np.asarray(self.boundaries[:-1])

    def block_of(self, i) -> np.ndarray:
        return np.searchsorted(self._starts, i, side="right") - 1

    def __call__(self, i: int, j: int) -> bool:
        n = self.boundaries[-1]
        if not (0 <= i < n and 0 <= j < n):
            return False
        return bool(self.block_of(i) == self.block_of(j))

    @property
    def size(self) -> int:
        return self.boundaries[-1]

    def to_dense(self) -> np.ndarray:
        blocks = self.block_of(np.arange(self.size))
        return blocks[:, None] == blocks[None, :]

    def allowed_count(self) -> int:
        return sum((y - x) ** 2 for x, y in zip(self.boundaries, self.boundaries[1:]))


def block_diagonal_mask(boundaries: Sequence[int]) -> BlockDiagonalMask:
    return BlockDiagonalMask(boundaries)


@dataclass(frozen=True)
class AttentionParams:
    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ShapeMismatch("projection matrices must all be D x D")
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite projection weight")
        if d % self.heads:
            raise ShapeMismatch(f"D={d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def random(cls, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64) -> "AttentionParams":
        scale = 1.0 / math.sqrt(dim)
        w = [(rng.standard_normal((dim, dim)) * scale).astype(dtype) for _ in range(4)]
        return cls(heads, *w)

    @classmethod
    def identity(cls, dim: int, heads: int = 1, dtype=np.float64) -> "AttentionParams":
        eye = np.eye(dim, dtype=dtype)
        return cls(heads, eye, eye, eye, eye)


def attention_forward(params: AttentionParams, tokens, mask=None) -> np.ndarray:
    """Multi-head scaled dot-product attention with an optional boolean mask.

    ``mask`` is an ``L x L`` boolean array, a :class:`BlockDiagonalMask`, or
    ``None`` for full attention. Forbidden scores are set to ``-inf``.
    Projections use row vectors: ``q = x @ wq``.
    """
    x = np.atleast_2d(tokens)
    n, d = x.shape
    if d != params.dim:
        raise ShapeMismatch(f"tokens D={d}, params D={params.dim}")
    if isinstance(mask, BlockDiagonalMask):
        mask = mask.to_dense()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, n):
            raise ShapeMismatch(f"mask {mask.shape} does not cover {n} tokens")
    h, dh = params.heads, params.head_dim
    q = (x @ params.wq).reshape(n, h, dh).transpose(1, 0, 2)
    k = (x @ params.wk).reshape(n, h, dh).transpose(1, 0, 2)
    v = (x @ params.wv).reshape(n, h, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    if mask is not None:
        scores = np.where(mask[None], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = (w @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ params.wo


def packed_forward(params: AttentionParams, batch: PackedBatch) -> PackedBatch:
    out = attention_forward(params, batch.tokens, block_diagonal_mask(batch.boundaries))
    return PackedBatch(out, batch.boundaries)


@dataclass(frozen=True)
class StochasticDepthConfig:
    drop_rate: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise BadRate(f"drop rate {self.drop_rate} outside [0, 1)")


def keep_count(batch_size: int, drop_rate: float) -> int:
    """round((1 - d) * B) with halves rounded up, at least 1."""
    return max(1, int(math.floor((1.0 - drop_rate) * batch_size + 0.5)))


def kept_indices(batch_size: int, config: StochasticDepthConfig) -> np.ndarray:
    """Samples that receive the residual: the head of a seeded shuffle."""
    if not 0.0 <= config.drop_rate < 1.0:
        raise BadRate(f"drop rate {config.drop_rate} outside [0, 1)")
    perm = permutation(batch_size, config.seed)
    return perm[: keep_count(batch_size, config.drop_rate)]


def stochastic_depth_slice(x, config: StochasticDepthConfig, residual_fn: Callable[[np.ndarray], np.ndarray]):
    """Residual branch evaluated only on the kept slice of the batch.

    Kept samples get ``x + residual_fn(x) / (1 - d)``; dropped samples pass
    through unchanged. ``residual_fn`` is called once, on the kept rows only.
    """
    x = np.asarray(x)
    keep = kept_indices(len(x), config)
    out = x.copy()
    out[keep] = x[keep] + residual_fn(x[keep]) / (1.0 - config.drop_rate)
    return out


def layerscale_apply(gamma, residual) -> np.ndarray:
    gamma = np.asarray(gamma)
    residual = np.asarray(residual)
    if gamma.ndim != 1 or residual.shape[-1] != len(gamma):
        raise LengthMismatch(f"gamma length {gamma.shape} vs residual width {residual.shape[-1]}")
    return residual * gamma
