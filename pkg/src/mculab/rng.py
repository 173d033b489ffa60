"""Portable seeded random streams.

All randomness in mculab flows through :class:`Xoshiro256`, the
xoshiro256** generator (Blackman & Vigna) whose 256-bit state is filled by
four successive SplitMix64 outputs of the seed. Every derived quantity is
defined bit-for-bit so another implementation can replay a run:

* ``random()``      -- ``(next_u64() >> 11) * 2**-53``, uniform on [0, 1)
* ``randbelow(n)``  -- draw ``x``; ``r = x % n``; reject while ``x - r > 2**64 - n``
* ``normal()``      -- Box-Muller cosine branch on ``u1 = 1 - random()``, ``u2 = random()``
* ``permutation(n)``-- Fisher-Yates from the top: for i = n-1..1 swap i with randbelow(i+1)
* ``rademacher(n)`` -- bits of successive outputs, least significant first; 1 -> +1, 0 -> -1

Independent streams for one experiment seed are obtained with
:func:`derive_seed`, which mixes the seed with the FNV-1a hash of a label.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *labels) -> int:
    """Seed for an independent stream named by ``labels`` under ``seed``."""
    key = "/".join(str(label) for label in labels).encode()
    return splitmix64((seed ^ fnv1a64(key)) & MASK64)[1]


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** with SplitMix64 seeding."""

    def __init__(self, seed: int):
        state = seed & MASK64
        words = []
        for _ in range(4):
            state, out = splitmix64(state)
            words.append(out)
        self._s = words

    @classmethod
    def derived(cls, seed: int, *labels) -> "Xoshiro256":
        return cls(derive_seed(seed, *labels))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - n
        while True:
            x = self.next_u64()
            r = x % n
            if x - r <= limit:
                return r

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return np.array([self.uniform(low, high) for _ in range(n)], dtype=np.float64)

    def normal_array(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def shuffled(self, items) -> np.ndarray:
        items = np.asarray(items)
        return items[self.permutation(len(items))]

    def rademacher(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float32)
        i = 0
        while i < n:
            word = self.next_u64()
            for bit in range(min(64, n - i)):
                out[i] = 1.0 if (word >> bit) & 1 else -1.0
                i += 1
        return out
