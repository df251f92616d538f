"""Deterministic randomness: xoshiro256** streams and stable sub-seed derivation.

Every stochastic choice in the package (subset selection, permutations,
synthetic data, weight init, batch order, probe subsampling) draws from its
own named stream, so adding one consumer never perturbs another and reruns
with the same master seed reproduce every artifact bit for bit.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(master_seed: int, *parts: object) -> int:
    """Stable 64-bit sub-seed for a named purpose.

    Defined as the first 8 bytes (big-endian) of
    ``sha256("seed:<master>|<repr(part)>|...")``.  Parts are rendered with
    ``repr`` so strings, ints and floats all format unambiguously.
    """
    text = "seed:%d|%s" % (master_seed, "|".join(repr(p) for p in parts))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** 1.0, seeded by splitmix64 expansion of a 64-bit seed."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        words = []
        for _ in range(4):
            state, w = _splitmix64(state)
            words.append(w)
        if not any(words):  # the all-zero state is a fixed point
            words[0] = _GOLDEN
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1, got %d" % n)
        span = 1 << 64
        limit = span - span % n
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices drawn uniformly from range(n), returned sorted."""
        if not 0 <= k <= n:
            raise ValueError("cannot sample %d indices from range(%d)" % (k, n))
        pool = list(range(n))
        for i in range(k):  # partial Fisher-Yates: first k slots are the sample
            j = i + self.randrange(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])
