"""Named, portable random streams keyed by (seed, rank, label).

The generator is xoshiro256** with its 256-bit state expanded by SplitMix64
from ``seed ^ (rank * 0x9E3779B97F4A7C15) ^ fnv1a64(label)``. Nothing here
touches process-global state: every draw is a function of the key and the
number of draws taken so far.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import BadLabel, BadRange

GENERATOR_ID = "xoshiro256**+splitmix64/v1"

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_M53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (output, next_state)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), x


def stream_key(seed: int, rank: int, label: str) -> int:
    return (seed & _MASK64) ^ ((rank * _GOLDEN) & _MASK64) ^ fnv1a64(label)


class RngStream:
    """A xoshiro256** generator bound to one (seed, rank, label) key."""

    __slots__ = ("seed", "rank", "label", "_s", "draws")

    def __init__(self, seed: int, rank: int, label: str):
        if not isinstance(label, str) or not label:
            raise BadLabel("stream label must be a non-empty string")
        try:
            encoded = label.encode("ascii")
        except UnicodeEncodeError:
            raise BadLabel(f"stream label must be ASCII: {label!r}") from None
        if len(encoded) > 32:
            raise BadLabel(f"stream label longer than 32 bytes: {label!r}")
        if not 0 <= seed <= _MASK64 or not 0 <= rank < 2**32:
            raise BadRange("seed must fit in u64 and rank in u32")
        self.seed = seed
        self.rank = rank
        self.label = label
        x = stream_key(seed, rank, label)
        words = []
        for _ in range(4):
            out, x = splitmix64(x)
            words.append(out)
        self._s = words
        self.draws = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, rank={self.rank}, label={self.label!r}, draws={self.draws})"

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        r = (s1 * 5) & _MASK64
        r = ((((r << 7) | (r >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        self.draws += 1
        return r

    def next_double(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _TWO_M53

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit draws as a uint64 array (bulk path)."""
        state = np.array(self._s, dtype=np.uint64)
        out = _kernels.xoshiro_fill(state, n)
        self._s = [int(v) for v in state]
        self.draws += n
        return out

    def doubles(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def uniform(self, a: float = 0.0, b: float = 1.0) -> float:
        if not a < b:
            raise BadRange(f"uniform requires a < b, got [{a}, {b})")
        v = a + (b - a) * self.next_double()
        # rounding can land exactly on b for wide ranges
        return v if v < b else math.nextafter(b, a)

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if sigma < 0:
            raise BadRange(f"sigma must be >= 0, got {sigma}")
        u1 = self.next_double()
        u2 = self.next_double()
        z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(_TWO_PI * u2)
        return mu + sigma * z

    def normal_array(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """``n`` draws identical to ``n`` successive :meth:`normal` calls."""
        if sigma < 0:
            raise BadRange(f"sigma must be >= 0, got {sigma}")
        u = self.doubles(2 * n).tolist()
        log, sqrt, cos = math.log, math.sqrt, math.cos
        z = [sqrt(-2.0 * log(1.0 - u[2 * i])) * cos(_TWO_PI * u[2 * i + 1]) for i in range(n)]
        return mu + sigma * np.array(z, dtype=np.float64)

    def randbelow(self, n: int) -> int:
        return int(self.next_double() * n)

    def shuffle(self, n: int) -> list[int]:
        """Fisher-Yates permutation of ``range(n)``; consumes ``max(n - 1, 0)`` draws."""
        if n < 0:
            raise BadRange("shuffle size must be >= 0")
        if n > 64:
            return self.shuffles(1, n)[0].tolist()
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = int(self.next_double() * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffles(self, reps: int, n: int) -> np.ndarray:
        """``reps`` successive shuffles as an int64 array of shape (reps, n)."""
        state = np.array(self._s, dtype=np.uint64)
        out = _kernels.batch_shuffle(state, reps, n)
        self._s = [int(v) for v in state]
        self.draws += reps * max(n - 1, 0)
        return out

    def skip(self, n: int) -> None:
        if n > 0:
            self.raw(n)


def stream(seed: int, rank: int, label: str) -> RngStream:
    return RngStream(seed, rank, label)


def replay(seed: int, rank: int, label: str, draws: int) -> RngStream:
    """Fresh stream fast-forwarded by ``draws`` raw outputs."""
    s = RngStream(seed, rank, label)
    s.skip(draws)
    return s


def uniform(s: RngStream, a: float, b: float) -> float:
    return s.uniform(a, b)


def normal(s: RngStream, mu: float, sigma: float) -> float:
    return s.normal(mu, sigma)


def shuffle(s: RngStream, n: int) -> list[int]:
    return s.shuffle(n)
