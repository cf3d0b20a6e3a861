from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cliprepro import loss as L
from cliprepro import numerics as nx
from cliprepro.errors import BadTau, IndivisibleBatch, OffsetMismatch, ShapeMismatch
from cliprepro.numerics import Tensor


def unit_rows(n, d, seed, dtype=np.float64):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(dtype)


def oracle(U, V, tau):
    """Symmetric InfoNCE in plain float64 with a stable logsumexp."""
    S = tau * (np.asarray(U, np.float64) @ np.asarray(V, np.float64).T)

    def ce(M):
        m = M.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(M - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(np.mean(lse - np.diag(M)))

    return 0.5 * (ce(S) + ce(S.T))


@pytest.mark.parametrize("n", [2, 4, 8, 32])
def test_uniform_similarity_gives_log_n(n):
    U = np.tile(unit_rows(1, 5, 0), (n, 1))
    assert abs(L.info_nce(U, U, 3.0).value - math.log(n)) < 1e-12


def test_two_orthonormal_pairs():
    U = np.eye(2)
    assert abs(L.info_nce(U, U, 1.0).value - 0.31326168751822286) < 1e-15
    assert abs(0.31326168751822286 - math.log1p(math.exp(-1))) < 1e-16


@given(n=st.integers(2, 12), d=st.integers(2, 8), seed=st.integers(0, 2**32 - 1), tau=st.floats(0.1, 100))
def test_matches_float64_oracle(n, d, seed, tau):
    U, V = unit_rows(n, d, seed), unit_rows(n, d, seed + 1)
    assert math.isclose(L.info_nce(U, V, tau).value, oracle(U, V, tau), rel_tol=1e-12, abs_tol=1e-12)


@given(n=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
def test_swap_symmetry(n, seed):
    U, V = unit_rows(n, 6, seed), unit_rows(n, 6, seed + 7)
    a, b = L.info_nce(U, V, 5.0), L.info_nce(V, U, 5.0)
    assert abs(a.value - b.value) < 1e-12
    assert abs(a.i2t.item() - b.t2i.item()) < 1e-12


def test_loss_gradients_match_finite_differences():
    U0, V0 = unit_rows(6, 4, 1), unit_rows(6, 4, 2)

    def f(u, v, t):
        return L.info_nce(Tensor(u, "f64"), Tensor(v, "f64"), Tensor(t, "f64")).value

    U, V, t = Tensor(U0, "f64", requires_grad=True), Tensor(V0, "f64", requires_grad=True), Tensor(4.0, "f64", requires_grad=True)
    gU, gV, gt = nx.grad(L.info_nce(U, V, t).total, [U, V, t])
    h = 1e-6
    for arr, g, which in ((U0, gU, 0), (V0, gV, 1)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, V0) if which == 0 else (U0, up)
            args_dn = (dn, V0) if which == 0 else (U0, dn)
            num[idx] = (f(*args_up, 4.0) - f(*args_dn, 4.0)) / (2 * h)
        assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-7
    num_t = (f(U0, V0, 4.0 + h) - f(U0, V0, 4.0 - h)) / (2 * h)
    assert abs(gt - num_t) / abs(num_t) < 1e-7


def _distributed(U, V, tau, cfg):
    Ut, Vt = Tensor(U, requires_grad=True), Tensor(V, requires_grad=True)
    out = L.distributed_loss(L.shard(Ut, cfg.world_size), L.shard(Vt, cfg.world_size), tau, cfg)
    return out.value, nx.grad(out.total, [Ut, Vt])


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1), w=st.sampled_from([1, 2, 4]))
def test_local_loss_equals_global_loss_f64(seed, w):
    U, V = unit_rows(8, 16, seed), unit_rows(8, 16, seed + 1)
    ref, (gu, gv) = _distributed(U, V, 10.0, L.LossConfig("single" if w == 1 else "gather_global", w))
    got, (hu, hv) = _distributed(U, V, 10.0, L.LossConfig("single" if w == 1 else "local_loss", w))
    assert abs(got - ref) < 1e-12
    assert np.max(np.abs(hu - gu)) < 1e-12 and np.max(np.abs(hv - gv)) < 1e-12


def test_local_loss_equals_global_loss_f32():
    for seed in range(10):
        U, V = unit_rows(8, 16, seed, np.float32), unit_rows(8, 16, seed + 1, np.float32)
        ref, _ = _distributed(U, V, 10.0, L.LossConfig("gather_global", 4))
        got, _ = _distributed(U, V, 10.0, L.LossConfig("local_loss", 4))
        assert abs(got - ref) < 1e-5


def test_gather_without_grad_keeps_value_and_scales_gradient():
    U, V = unit_rows(8, 4, 3), unit_rows(8, 4, 4)
    ref, (gu, gv) = _distributed(U, V, 2.0, L.LossConfig("gather_global", 4, gather_with_grad=True))
    got, (hu, hv) = _distributed(U, V, 2.0, L.LossConfig("gather_global", 4, gather_with_grad=False))
    assert abs(got - ref) < 1e-12
    # each rank only back-propagates into its own rows and rank gradients are averaged
    assert np.allclose(hu, gu / 4, atol=1e-14) and np.allclose(hv, gv / 4, atol=1e-14)


def test_bf16_gather_rounds_only_remote_shards():
    U = unit_rows(4, 4, 5, np.float32)
    parts = L.shard(Tensor(U), 2)
    g = L.gather_features(parts, rank=1, bf16=True).data
    assert np.array_equal(g[2:], U[2:])
    assert np.array_equal(g[:2], nx.quantize_bf16(U[:2]))
    exact, _ = _distributed(U, U, 10.0, L.LossConfig("gather_global", 2))
    rounded, _ = _distributed(U, U, 10.0, L.LossConfig("gather_global", 2, precision_stage="emulate_bf16_on_gather"))
    assert rounded != exact and abs(rounded - exact) < 0.05


def test_shard_errors():
    with pytest.raises(IndivisibleBatch):
        L.shard(np.zeros((6, 2)), 4)
    assert [s.tolist() for s in L.shard(np.arange(4), 2)] == [[0, 1], [2, 3]]


def test_offset_mismatch():
    U, V = unit_rows(4, 3, 0), unit_rows(4, 3, 1)
    with pytest.raises(OffsetMismatch):
        L.local_loss_contribution(1, U[:2], V, V[:2], U, 1.0)
    with pytest.raises(OffsetMismatch):
        L.local_loss_contribution(2, U[:2], V, V[:2], U, 1.0)


@pytest.mark.parametrize("tau", [0.0, -1.0, float("nan"), float("inf")])
def test_bad_tau(tau):
    U = np.eye(2)
    with pytest.raises(BadTau):
        L.info_nce(U, U, tau)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        L.info_nce(np.eye(2), np.eye(3), 1.0)
    with pytest.raises(ShapeMismatch):
        L.info_nce(np.eye(1), np.eye(1), 1.0)


def test_hand_computed_local_partials():
    # four unit vectors at right angles, tau 1: every row sees logits (1, 0, -1, 0)
    U = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    row = 1.0 - math.log(math.e + 2.0 + 1.0 / math.e)
    i2t, t2i = L.local_loss_contribution(0, U[:2], U, U[:2], U, 1.0)
    assert abs(i2t.item() - 2 * row) < 1e-15 and abs(t2i.item() - 2 * row) < 1e-15
    parts = [(i2t, t2i), L.local_loss_contribution(1, U[2:], U, U[2:], U, 1.0)]
    assert abs(L.combine_local(parts, 4).value - (-row)) < 1e-15


def test_gather_order_and_identity():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))
    g = L.gather_features([a, b]).data
    assert g.shape == (4, 3) and not g[:2].any() and g[2:].all()
    assert L.gather_features([a]) is a


@given(seed=st.integers(0, 2**32 - 1))
def test_rotation_and_joint_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    U, V = unit_rows(6, 4, seed), unit_rows(6, 4, seed + 1)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    perm = rng.permutation(6)
    base = L.info_nce(U, V, 9.0).value
    assert abs(L.info_nce(U @ Q, V @ Q, 9.0).value - base) < 1e-6
    assert abs(L.info_nce(U[perm], V[perm], 9.0).value - base) < 1e-12


def test_large_temperature_stays_finite():
    U, V = unit_rows(8, 4, 0), unit_rows(8, 4, 1)
    out = L.info_nce(U, V, 1e4)
    assert math.isfinite(out.value) and np.all(np.isfinite(out.logits))


def test_total_is_computed_from_parts():
    out = L.info_nce(unit_rows(5, 3, 0), unit_rows(5, 3, 1), 3.0)
    assert out.value == -(out.i2t.item() + out.t2i.item()) / 10
