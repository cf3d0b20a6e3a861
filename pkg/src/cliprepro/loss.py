"""Symmetric InfoNCE and its simulated multi-worker variants.

Workers are simulated one after another in ascending rank order inside a
single process. Two switches mirror the distributed options of contrastive
pretraining code:

* ``gather_with_grad``: remote feature shards stay attached to the graph.
  When off, each rank sees detached copies of the other ranks' features and
  the per-rank gradients are averaged, as data-parallel training would.
* ``local_loss``: each rank scores only its own rows against the gathered
  columns instead of the full N x N matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import BadTau, IndivisibleBatch, OffsetMismatch, ShapeMismatch
from .numerics import Tensor

AGGREGATIONS = ("single", "gather_global", "local_loss")
PRECISION_STAGES = ("none", "emulate_bf16_on_gather")


@dataclass(frozen=True)
class LossConfig:
    aggregation: str = "single"
    world_size: int = 1
    gather_with_grad: bool = True
    precision_stage: str = "none"
    tau_mode: str = "learnable"  # or "fixed"
    tau: float = 1.0 / 0.07  # used when tau_mode == "fixed"
    tau_max: float = 100.0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.precision_stage not in PRECISION_STAGES:
            raise ValueError(f"precision_stage must be one of {PRECISION_STAGES}")
        if self.tau_mode not in ("fixed", "learnable"):
            raise ValueError("tau_mode must be 'fixed' or 'learnable'")
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if self.tau_mode == "fixed" and not self.tau > 0:
            raise BadTau(f"fixed tau must be positive, got {self.tau}")


@dataclass
class LossOutput:
    total: Tensor
    i2t: Tensor
    t2i: Tensor
    logits: np.ndarray | None = None

    @property
    def value(self) -> float:
        return self.total.item()


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else None)


def _tau_tensor(tau, like: Tensor) -> Tensor:
    t = tau if isinstance(tau, Tensor) else Tensor(tau, dtype=like.dtype)
    value = float(t.data)
    if t.ndim != 0 or not math.isfinite(value) or value <= 0:
        raise BadTau(f"temperature must be a positive finite scalar, got {value}")
    return t


def similarity_matrix(U, V) -> Tensor:
    """S[i, j] = u_i . v_j for unit-norm rows."""
    U, V = _tensor(U), _tensor(V)
    if U.ndim != 2 or U.shape != V.shape:
        raise ShapeMismatch(f"U {U.shape} and V {V.shape} must be matching N x d matrices")
    return U @ V.T


def _combine(i2t: Tensor, t2i: Tensor, n: int, logits) -> LossOutput:
    total = nx.scale(i2t + t2i, -1.0)
    total = _divide(total, 2 * n)
    return LossOutput(total, i2t, t2i, logits)


def _divide(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def backward(g, ctx):
        return (g / c,)

    return nx._result(a.data / c, (a,), backward)


def info_nce(U, V, tau) -> LossOutput:
    """Bidirectional InfoNCE over an N x N batch.

    ``i2t`` and ``t2i`` are the signed sums of matched-index log-softmax
    entries (rows and columns of tau * U V^T); ``total = -(i2t + t2i) / 2N``.
    """
    U, V = _tensor(U), _tensor(V, U)
    S = similarity_matrix(U, V)
    n = U.shape[0]
    if n < 2:
        raise ShapeMismatch("info_nce needs a batch of at least 2 pairs")
    logits = _tau_tensor(tau, U) * S
    idx = np.arange(n)
    i2t = nx.sum(nx.pick(nx.log_softmax(logits, axis=1), idx, idx))
    t2i = nx.sum(nx.pick(nx.log_softmax(logits, axis=0), idx, idx))
    return _combine(i2t, t2i, n, logits.data)


def shard(batch, world_size: int) -> list:
    """Split rows into ``world_size`` contiguous, equal shards in rank order."""
    n = batch.shape[0] if hasattr(batch, "shape") else len(batch)
    if world_size < 1 or n % world_size:
        raise IndivisibleBatch(f"batch of {n} rows cannot be split across {world_size} workers")
    per = n // world_size
    if isinstance(batch, Tensor):
        return [_slice_rows(batch, r * per, (r + 1) * per) for r in range(world_size)]
    return [batch[r * per : (r + 1) * per] for r in range(world_size)]


def _slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    shape = a.shape

    def backward(g, ctx):
        out = np.zeros(shape, dtype=g.dtype)
        out[lo:hi] = g
        return (out,)

    return nx._result(a.data[lo:hi], (a,), backward)


def gather_features(
    shards: Sequence[Tensor],
    *,
    rank: int = 0,
    with_grad: bool = True,
    bf16: bool = False,
) -> Tensor:
    """Concatenate shards in ascending rank order as seen from ``rank``.

    The local shard is always live and exact. Remote shards are detached
    unless ``with_grad`` and rounded to bfloat16 when ``bf16`` is set.
    """
    shards = [_tensor(s) for s in shards]
    if len({s.shape[1:] for s in shards}) != 1:
        raise ShapeMismatch("feature shards have inconsistent shapes")
    parts = []
    for q, s in enumerate(shards):
        if q != rank:
            if not with_grad:
                s = nx.detach(s)
            if bf16:
                s = nx.quantize_bf16(s)
        parts.append(s)
    return parts[0] if len(parts) == 1 else nx.concat(parts)


def local_loss_contribution(rank: int, U_r, V_global, V_r, U_global, tau) -> tuple[Tensor, Tensor]:
    """Partial sums (i2t, t2i) for the rows owned by ``rank``.

    Local image rows are scored against every gathered text column and vice
    versa; the target is the matched index at the rank's row offset.
    """
    U_r, V_r = _tensor(U_r), _tensor(V_r)
    U_global, V_global = _tensor(U_global), _tensor(V_global)
    n_r = U_r.shape[0]
    if V_r.shape != U_r.shape or U_global.shape != V_global.shape or U_global.shape[1:] != U_r.shape[1:]:
        raise ShapeMismatch("local/global feature shapes disagree")
    off = rank * n_r
    if off + n_r > U_global.shape[0]:
        raise OffsetMismatch(f"rank {rank} offset {off} beyond gathered batch of {U_global.shape[0]}")
    if not (np.array_equal(U_global.data[off : off + n_r], U_r.data) and np.array_equal(V_global.data[off : off + n_r], V_r.data)):
        raise OffsetMismatch(f"local rows of rank {rank} not found at offset {off} of the gathered batch")
    t = _tau_tensor(tau, U_r)
    rows = np.arange(n_r)
    cols = rows + off
    i2t = nx.sum(nx.pick(nx.log_softmax(t * (U_r @ V_global.T), axis=1), rows, cols))
    t2i = nx.sum(nx.pick(nx.log_softmax(t * (V_r @ U_global.T), axis=1), rows, cols))
    return i2t, t2i


def combine_local(parts: Sequence[tuple[Tensor, Tensor]], n: int, logits=None) -> LossOutput:
    """Total loss from per-rank partial sums, accumulated in rank order."""
    i2t, t2i = parts[0]
    for a, b in parts[1:]:
        i2t = i2t + a
        t2i = t2i + b
    return _combine(i2t, t2i, n, logits)


def distributed_loss(U_shards: Sequence[Tensor], V_shards: Sequence[Tensor], tau, cfg: LossConfig) -> LossOutput:
    """InfoNCE over per-rank feature shards according to ``cfg``."""
    w = len(U_shards)
    if w != len(V_shards) or w != cfg.world_size:
        raise ShapeMismatch(f"expected {cfg.world_size} shards per modality, got {w}/{len(V_shards)}")
    n = sum(s.shape[0] for s in U_shards)
    bf16 = cfg.precision_stage == "emulate_bf16_on_gather"
    if w == 1 or cfg.aggregation == "single":
        if w != 1:
            raise ShapeMismatch("aggregation 'single' requires world_size 1")
        return info_nce(U_shards[0], V_shards[0], tau)

    def views(r):
        return (
            gather_features(U_shards, rank=r, with_grad=cfg.gather_with_grad, bf16=bf16),
            gather_features(V_shards, rank=r, with_grad=cfg.gather_with_grad, bf16=bf16),
        )

    if cfg.aggregation == "local_loss":
        parts = []
        for r in range(w):
            Ug, Vg = views(r)
            parts.append(local_loss_contribution(r, U_shards[r], Vg, V_shards[r], Ug, tau))
        return combine_local(parts, n)

    # gather_global: every rank evaluates the full matrix from its own view
    if cfg.gather_with_grad and not bf16:
        Ug, Vg = views(0)
        return info_nce(Ug, Vg, tau)
    outs = [info_nce(*views(r), tau) for r in range(w)]
    i2t, t2i = outs[0].i2t, outs[0].t2i
    for o in outs[1:]:
        i2t = i2t + o.i2t
        t2i = t2i + o.t2i
    return _combine(_divide(i2t, w), _divide(t2i, w), n, outs[0].logits)
