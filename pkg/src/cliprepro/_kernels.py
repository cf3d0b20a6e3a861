"""Hot inner loops: sequential-order reductions and the xoshiro256** generator.

Every kernel exists twice, a numba ``@njit`` version and a pure-numpy
version, and the two must agree bit for bit. The numpy path is selected when
numba is missing or when ``CLIPREPRO_DISABLE_NUMBA=1`` is set before import.
The flag changes speed only, never results (see ``tests/test_kernels.py``).

Accumulation rule shared by every reduction: start from +0.0 and add terms
strictly in index order, one IEEE operation at a time (no FMA contraction,
no pairwise or blocked summation).
"""

from __future__ import annotations

import os

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_M53 = 1.0 / 9007199254740992.0

_disabled = os.environ.get("CLIPREPRO_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError("numba disabled by CLIPREPRO_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None

BACKEND = "numba" if njit is not None else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy reference path
# ---------------------------------------------------------------------------

def _np_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _np_rowsum(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[0], dtype=a.dtype)
    for j in range(a.shape[1]):
        out += a[:, j]
    return out


def _np_sum(x: np.ndarray):
    acc = x.dtype.type(0.0)
    for v in x:
        acc = acc + v
    return acc


def _py_next(s: list) -> int:
    s0, s1, s2, s3 = s
    r = (s1 * 5) & _MASK64
    r = (((r << 7) | (r >> 57)) & _MASK64) * 9 & _MASK64
    t = (s1 << 17) & _MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3
    return r


def _np_fill(state: np.ndarray, n: int) -> np.ndarray:
    s = [int(v) for v in state]
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = _py_next(s)
    state[:] = np.array(s, dtype=np.uint64)
    return out


def _np_batch_shuffle(state: np.ndarray, reps: int, n: int) -> np.ndarray:
    perms = np.tile(np.arange(n, dtype=np.int64), (reps, 1))
    if n < 2:
        return perms
    raw = _np_fill(state, reps * (n - 1)).reshape(reps, n - 1)
    u = (raw >> np.uint64(11)).astype(np.float64) * _TWO_M53
    rows = np.arange(reps)
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = (u[:, step] * (i + 1)).astype(np.int64)
        tmp = perms[rows, i].copy()
        perms[rows, i] = perms[rows, j]
        perms[rows, j] = tmp
    return perms


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if njit is not None:

    @njit(cache=True)
    def _nb_matmul(a, b):
        n, kk = a.shape
        m = b.shape[1]
        out = np.zeros((n, m), dtype=a.dtype)
        for i in range(n):
            for k in range(kk):
                aik = a[i, k]
                for j in range(m):
                    out[i, j] += aik * b[k, j]
        return out

    @njit(cache=True)
    def _nb_rowsum(a):
        out = np.zeros(a.shape[0], dtype=a.dtype)
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                out[i] += a[i, j]
        return out

    @njit(cache=True)
    def _nb_sum(x):
        acc = np.zeros(1, dtype=x.dtype)
        for i in range(x.shape[0]):
            acc[0] += x[i]
        return acc[0]

    @njit(cache=True)
    def _nb_next(s):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        r = s1 * np.uint64(5)
        r = ((r << np.uint64(7)) | (r >> np.uint64(57))) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3
        return r

    @njit(cache=True)
    def _nb_fill(state, n):
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            out[i] = _nb_next(state)
        return out

    @njit(cache=True)
    def _nb_batch_shuffle(state, reps, n):
        perms = np.empty((reps, n), dtype=np.int64)
        for r in range(reps):
            for i in range(n):
                perms[r, i] = i
            for i in range(n - 1, 0, -1):
                x = _nb_next(state)
                u = np.float64(x >> np.uint64(11)) * 1.1102230246251565e-16
                j = np.int64(u * (i + 1))
                tmp = perms[r, i]
                perms[r, i] = perms[r, j]
                perms[r, j] = tmp
        return perms


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _use_numba(backend: str | None) -> bool:
    name = backend or BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and njit is None:
        raise ValueError("numba backend requested but numba is unavailable")
    return name == "numba"


def matmul(a: np.ndarray, b: np.ndarray, *, backend: str | None = None) -> np.ndarray:
    """``a @ b`` with every inner product accumulated in index order."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    if _use_numba(backend):
        return _nb_matmul(a, b)
    return _np_matmul(a, b)


def rowsum(a: np.ndarray, *, backend: str | None = None) -> np.ndarray:
    """Sum along the last axis of a 2-D array, left to right."""
    a = np.ascontiguousarray(a)
    if _use_numba(backend):
        return _nb_rowsum(a)
    return _np_rowsum(a)


def seqsum(x: np.ndarray, *, backend: str | None = None):
    x = np.ascontiguousarray(x).reshape(-1)
    if _use_numba(backend):
        return x.dtype.type(_nb_sum(x))
    return _np_sum(x)


def xoshiro_fill(state: np.ndarray, n: int, *, backend: str | None = None) -> np.ndarray:
    """Draw ``n`` raw 64-bit outputs, advancing ``state`` (uint64[4]) in place."""
    if _use_numba(backend):
        return _nb_fill(state, n)
    return _np_fill(state, n)


def batch_shuffle(state: np.ndarray, reps: int, n: int, *, backend: str | None = None) -> np.ndarray:
    """``reps`` consecutive Fisher-Yates permutations of ``range(n)``.

    Row ``r`` is exactly what ``reps`` successive scalar shuffles would give.
    """
    if _use_numba(backend):
        return _nb_batch_shuffle(state, reps, n)
    return _np_batch_shuffle(state, reps, n)


def available_backends() -> list[str]:
    return ["numba", "numpy"] if njit is not None else ["numpy"]
