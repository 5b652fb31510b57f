"""Reproducible randomness.

Shuffles and without-replacement samples are drawn from a Philox4x64-10
counter-based generator (numpy's ``Philox`` bit generator, keyed directly by
the 64-bit seed, counter starting at zero) and consumed by a forward
Fisher-Yates loop written here. Only raw 64-bit outputs of the bit generator
are used, so results do not depend on numpy's ``Generator`` sampling
algorithms, which are not stable across numpy releases.

Seeds for pipeline stages are derived from a global seed by hashing the stage
name into it (:func:`derive_seed`).
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = 1 << 64
MASK64 = _U64 - 1


def derive_seed(seed: int, stream: str) -> int:
    """Split a 64-bit seed into an independent per-stage stream seed."""
    digest = hashlib.sha256(f"{seed & MASK64}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def philox(seed: int) -> np.random.Philox:
    return np.random.Philox(key=seed & MASK64)


def generator(seed: int) -> np.random.Generator:
    """numpy Generator over the keyed Philox stream (for float draws)."""
    return np.random.Generator(philox(seed))


class _RawStream:
    def __init__(self, seed: int, chunk: int = 1024):
        self._bg = philox(seed)
        self._chunk = chunk
        self._buf: list[int] = []

    def next_u64(self) -> int:
        if not self._buf:
            self._buf = [int(v) for v in self._bg.random_raw(self._chunk)][::-1]
        return self._buf.pop()

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        limit = _U64 - (_U64 % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n


def partial_shuffle(n: int, m: int, seed: int) -> np.ndarray:
    """First ``m`` entries of a forward Fisher-Yates shuffle of ``range(n)``.

    Position ``i`` is swapped with ``i + U[0, n - i)``. With ``m = n`` this is a
    uniform random permutation; with ``m < n`` the prefix is a uniform sample
    without replacement, in random order.
    """
    m = min(m, n)
    perm = list(range(n))
    stream = _RawStream(seed, chunk=max(1, min(m, 4096)))
    for i in range(m):
        j = i + stream.below(n - i)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm[:m], dtype=np.int64)


def permutation(n: int, seed: int) -> np.ndarray:
    return partial_shuffle(n, n, seed)


def sample_without_replacement(items, m: int, seed: int) -> np.ndarray:
    items = np.asarray(items)
    return items[partial_shuffle(len(items), m, seed)]
