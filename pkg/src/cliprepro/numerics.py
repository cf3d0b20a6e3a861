"""Small dense tensors with reverse-mode autodiff and fixed-order reductions.

Only what the toy encoders and the contrastive loss need is here. All sums
(matmul inner products, row sums, bias gradients) go through the sequential
kernels in :mod:`cliprepro._kernels`, so a forward/backward pass is a pure
function of its inputs down to the last bit.
"""

from __future__ import annotations

import io
import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import CheckpointError, NotScalar, ShapeMismatch, ZeroNorm

EPS_NORM = 1e-12

DTYPES = {"f32": np.float32, "f64": np.float64}

# creation counter; only relative order matters, so sharing it across runs is harmless
_order = itertools.count()


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Tensor:
    """Immutable n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64):
            dt = data.dtype
        else:
            dt = resolve_dtype(dtype)
        arr = np.array(data, dtype=dt)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._order = next(_order)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reductions and broadcasting helpers (plain ndarrays)
# ---------------------------------------------------------------------------

def deterministic_sum(values: Iterable[float], dtype="f32"):
    """Left-to-right sum in ``dtype``; empty input gives 0.0."""
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=resolve_dtype(dtype))
    if arr.size == 0:
        return arr.dtype.type(0.0)
    return _kernels.seqsum(arr)


def _colsum(g: np.ndarray) -> np.ndarray:
    # sum over rows, each column accumulated in row order
    return _kernels.rowsum(np.ascontiguousarray(g.T))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(_kernels.seqsum(g), dtype=g.dtype)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return _colsum(g)
    raise ShapeMismatch(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return np.broadcast_shapes(sa, sb)
    if len(sb) == 1 and len(sa) == 2 and sa[1] == sb[0]:
        return sa
    if len(sa) == 1 and len(sb) == 2 and sb[1] == sa[0]:
        return sb
    raise ShapeMismatch(f"incompatible shapes {sa} and {sb}")


class _Ctx:
    """Per-backward-pass settings; ``unordered`` exists only to inject nondeterminism in tests."""

    def __init__(self, reduction: str = "sequential"):
        if reduction not in ("sequential", "unordered"):
            raise ValueError(f"unknown reduction mode {reduction!r}")
        self.reduction = reduction
        # unseeded on purpose: emulates atomics / split-K accumulation order
        self._rng = np.random.default_rng() if reduction == "unordered" else None

    def mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self._rng is not None and a.shape[1] > 2:
            perm = self._rng.permutation(a.shape[1])
            return _kernels.matmul(a[:, perm], b[perm])
        return _kernels.matmul(a, b)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def backward(g, ctx):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def backward(g, ctx):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g, ctx):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    c = a.dtype.type(c)

    def backward(g, ctx):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"matmul dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data

    def backward(g, ctx):
        ga = ctx.mm(g, bd.T) if a.requires_grad else None
        gb = ctx.mm(ad.T, g) if b.requires_grad else None
        return ga, gb

    return _result(_kernels.matmul(ad, bd), (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g, ctx):
        return (np.ascontiguousarray(g.T),)

    return _result(np.ascontiguousarray(a.data.T), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape

    def backward(g, ctx):
        return (g.reshape(src),)

    return _result(a.data.reshape(shape), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g, ctx):
        return (g * (1 - y * y),)

    return _result(y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0

    def backward(g, ctx):
        return (np.where(mask, g, x.dtype.type(0)),)

    return _result(np.where(mask, x, x.dtype.type(0)), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g, ctx):
        return (g * y,)

    return _result(y, (a,), backward)


def clamp_max(a: Tensor, hi: float) -> Tensor:
    hi = a.dtype.type(hi)
    keep = a.data <= hi

    def backward(g, ctx):
        return (np.where(keep, g, a.dtype.type(0)),)

    return _result(np.minimum(a.data, hi), (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements in row-major order, as a rank-0 tensor."""
    shape = a.shape

    def backward(g, ctx):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(_kernels.seqsum(a.data), dtype=a.dtype), (a,), backward)


def mean_groups(a: Tensor, group: int) -> Tensor:
    """Average each run of ``group`` consecutive rows of a 2-D tensor."""
    n, h = a.shape
    if n % group:
        raise ShapeMismatch(f"{n} rows not divisible into groups of {group}")
    blocks = np.ascontiguousarray(a.data.reshape(n // group, group, h).transpose(0, 2, 1))
    summed = _kernels.rowsum(blocks.reshape(-1, group)).reshape(n // group, h)
    inv = a.dtype.type(group)

    def backward(g, ctx):
        return (np.repeat(g / inv, group, axis=0),)

    return _result(summed / inv, (a,), backward)


def l2_normalize(a) -> Tensor:
    """Scale each row to unit Euclidean norm.

    A 1-D input is treated as a single row. Raises ZeroNorm when any row has
    norm at or below ``EPS_NORM``.
    """
    a = _as_tensor(a)
    x = a.data
    flat = x.reshape(1, -1) if x.ndim == 1 else x
    norms = np.sqrt(_kernels.rowsum(flat * flat))
    if np.any(norms <= EPS_NORM) or not np.all(np.isfinite(norms)):
        raise ZeroNorm("row with zero (or non-finite) norm cannot be normalized")
    y = flat / norms[:, None]

    def backward(g, ctx):
        g2 = g.reshape(flat.shape)
        dot = _kernels.rowsum(g2 * y)
        return (((g2 - y * dot[:, None]) / norms[:, None]).reshape(x.shape),)

    return _result(y.reshape(x.shape), (a,), backward)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=1, keepdims=True)
    return z - np.log(_kernels.rowsum(np.exp(z)))[:, None]


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable log-softmax of a 2-D tensor along ``axis``."""
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeMismatch("log_softmax expects a 2-D tensor and axis 0 or 1")
    x = a.data if axis == 1 else np.ascontiguousarray(a.data.T)
    y = _log_softmax_rows(x)
    p = np.exp(y)

    def backward(g, ctx):
        gx = g if axis == 1 else np.ascontiguousarray(g.T)
        dx = gx - p * _kernels.rowsum(gx)[:, None]
        return (dx if axis == 1 else np.ascontiguousarray(dx.T),)

    return _result(y if axis == 1 else np.ascontiguousarray(y.T), (a,), backward)


def pick(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` into a 1-D tensor."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)

    def backward(g, ctx):
        out = np.zeros(a.shape, dtype=a.dtype)
        for k in range(len(r)):
            out[r[k], c[k]] += g[k]
        return (out,)

    return _result(a.data[r, c], (a,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Row-wise concatenation in the given order."""
    parts = list(parts)
    if len({p.shape[1:] for p in parts}) != 1 or len({p.dtype for p in parts}) != 1:
        raise ShapeMismatch("concat parts must share trailing shape and dtype")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g, ctx):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# bfloat16 emulation
# ---------------------------------------------------------------------------

def _bf16_array(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float32:
        bits = x.view(np.uint32).astype(np.uint64)
        lsb = (bits >> np.uint64(16)) & np.uint64(1)
        bits = (bits + np.uint64(0x7FFF) + lsb) & np.uint64(0xFFFF0000)
        return bits.astype(np.uint32).view(np.float32).reshape(x.shape)
    # f64: drop 45 of 52 fraction bits, keeping bf16's 7 stored bits
    bits = x.view(np.uint64)
    lsb = (bits >> np.uint64(45)) & np.uint64(1)
    rounded = ((bits + np.uint64((1 << 44) - 1) + lsb) & ~np.uint64((1 << 45) - 1)).view(np.float64)
    # below float32's normal range bf16 goes subnormal; route through float32
    tiny = np.abs(x) < np.float64(2.0**-126)
    if np.any(tiny):
        rounded = np.where(tiny, _bf16_array(x.astype(np.float32)).astype(np.float64), rounded)
    return rounded.reshape(x.shape)


def quantize_bf16(x):
    """Round to the nearest bfloat16 value (ties to even) and widen back.

    Accepts Python floats, ndarrays or Tensors. Tensor gradients pass
    straight through the rounding.
    """
    if isinstance(x, Tensor):
        def backward(g, ctx):
            return (g,)

        return _result(_bf16_array(np.ascontiguousarray(x.data)), (x,), backward)
    if isinstance(x, np.ndarray):
        return _bf16_array(np.ascontiguousarray(x))
    if isinstance(x, np.floating):
        return x.dtype.type(_bf16_array(np.array([x]))[0])
    return float(_bf16_array(np.array([x], dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def grad(loss: Tensor, params: Sequence[Tensor], *, reduction: str = "sequential") -> list[np.ndarray]:
    """Return d loss / d p for each of ``params``.

    Recorded operations are replayed in exact reverse creation order. A
    parameter the loss does not depend on gets a zero gradient.
    """
    if loss.ndim != 0:
        raise NotScalar(f"loss must be rank-0, got shape {loss.shape}")
    ctx = _Ctx(reduction)
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    tape = sorted(nodes.values(), key=lambda t: t._order, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in tape:
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g, ctx)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return [np.array(grads.get(id(p), np.zeros(p.shape, dtype=p.dtype)), dtype=p.dtype) for p in params]


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"RPCK"
FORMAT_VERSION = 1
_DTYPE_TAGS = {"f32": 1, "f64": 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def checkpoint_bytes(tensors: Mapping[str, np.ndarray], dtype="f32") -> bytes:
    """Serialize named arrays: header, then name/rank/dims/little-endian payload per tensor."""
    name = dtype_name(resolve_dtype(dtype))
    np_dt = np.dtype(DTYPES[name]).newbyteorder("<")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IBI", FORMAT_VERSION, _DTYPE_TAGS[name], len(tensors)))
    for key, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = key.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=np_dt).tobytes())
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic; not an RPCK file")
    try:
        version, tag, count = struct.unpack_from("<IBI", view, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        name = _TAG_DTYPES[tag]
        np_dt = np.dtype(DTYPES[name]).newbyteorder("<")
        pos = 4 + struct.calcsize("<IBI")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            key = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * np_dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated payload for tensor {key!r}")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=np_dt).reshape(dims)
            out[key] = arr.astype(np_dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out, name


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], dtype="f32") -> bytes:
    blob = checkpoint_bytes(tensors, dtype)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    return parse_checkpoint(Path(path).read_bytes())
