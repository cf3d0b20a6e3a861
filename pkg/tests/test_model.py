from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cliprepro import model as M
from cliprepro import numerics as nx
from cliprepro.errors import BadDims, ShapeMismatch, ZeroNorm
from cliprepro.rng import stream

SMALL = M.ModelDims(image_size=8, patch_size=4, vocab_size=7, width=6, hidden=5, embed_dim=4)


def small_params(seed=0, dtype="f64"):
    return M.init_params(stream(seed, 0, "init"), SMALL, dtype)


def images(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 8, 8, 3))


def test_init_is_deterministic_and_follows_recipe():
    a, b = small_params(1, "f32"), small_params(1, "f32")
    assert a.checkpoint_bytes() == b.checkpoint_bytes()
    for name, t in a.tensors.items():
        if M.is_bias(name):
            assert not t.data.any()
    assert math.isclose(float(np.exp(a["log_tau"].data)), 1 / 0.07, rel_tol=1e-6)
    assert math.isclose(M.temperature(a).item(), 14.2857142857, rel_tol=1e-6)
    big = M.init_params(stream(0, 0, "init"), M.ModelDims(), "f64")
    w = big["theta.mlp1.weight"].data
    assert abs(w.std() - 0.02) < 0.001 and abs(w.mean()) < 0.001
    assert a.names()[-1] == "log_tau" and a.names()[0] == "theta.patch.weight"


def test_temperature_is_clamped():
    p = small_params()
    arrays = p.arrays()
    arrays["log_tau"] = np.array(math.log(500.0))
    assert math.isclose(M.temperature(p.replace(arrays)).item(), 100.0, rel_tol=1e-12)


@pytest.mark.parametrize(
    "kw", [dict(image_size=10, patch_size=4), dict(embed_dim=0), dict(vocab_size=2), dict(width=1.5)]
)
def test_bad_dims(kw):
    with pytest.raises(BadDims):
        M.init_params(stream(0, 0, "init"), M.ModelDims(**kw))


def test_embeddings_are_unit_norm_and_duplicates_match():
    p = small_params(dtype="f32")
    x = images(4)
    x[3] = x[1]
    U = M.encode_image(p, x).data
    assert np.allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(U[1], U[3])
    V = M.encode_text(p, [[2, 3], [4], [2, 3]]).data
    assert np.allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(V[0], V[2])


def test_batch_encode_equals_rowwise_encode():
    p = small_params(dtype="f32")
    x = images(5, seed=2)
    U = M.encode_image(p, x).data
    for i in range(5):
        assert np.array_equal(M.encode_image(p, x[i : i + 1]).data[0], U[i])
    toks = [[2, 3, 4], [5], [6, 6, 2]]
    V = M.encode_text(p, toks).data
    for i, t in enumerate(toks):
        assert np.array_equal(M.encode_text(p, [t]).data[0], V[i])


def test_text_pad_and_order_invariance():
    p = small_params()
    base = M.encode_text(p, [[2, 3, 5]]).data
    assert np.array_equal(M.encode_text(p, [[2, 3, 5, 0, 0, 0]]).data, base)
    assert np.array_equal(M.encode_text(p, [[0, 5, 0, 2, 3]]).data, base)
    assert np.allclose(M.encode_text(p, [[5, 3, 2]]).data, base, rtol=0, atol=1e-15)
    assert not np.allclose(M.encode_text(p, [[5, 3, 3]]).data, base)


def test_text_input_errors():
    p = small_params()
    with pytest.raises(ShapeMismatch):
        M.encode_text(p, [[0, 0]])
    with pytest.raises(ShapeMismatch):
        M.encode_text(p, [[99]])
    with pytest.raises(ShapeMismatch):
        M.encode_image(p, np.zeros((1, 9, 9, 3)))


def generic_params(seed):
    """Random dense parameters. Init puts ReLU inputs at or near 0, where finite differences break down."""
    rng = np.random.default_rng(seed)
    p = small_params(seed)
    return p.replace({k: v if k == "log_tau" else rng.normal(0, 0.5, v.shape) for k, v in p.arrays().items()})


def _fd_check(p, loss_fn, names, h=1e-5):
    arrays = p.arrays()
    grads = dict(zip(p.names(), nx.grad(loss_fn(p), p.values())))
    worst = 0.0
    for name in names:
        num = np.zeros_like(arrays[name])
        for idx in np.ndindex(num.shape):
            up = {k: v.copy() for k, v in arrays.items()}
            dn = {k: v.copy() for k, v in arrays.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            num[idx] = (loss_fn(p.replace(up)).item() - loss_fn(p.replace(dn)).item()) / (2 * h)
        scale = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
        worst = max(worst, np.linalg.norm(grads[name] - num) / scale)
    return worst


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_image_tower_gradient_matches_finite_differences(seed):
    p = generic_params(seed)
    x = images(3, seed)
    try:
        M.encode_image(p, x)
    except ZeroNorm:  # every hidden unit dead: no embedding to differentiate
        assume(False)
    theta = [n for n in p.names() if n.startswith("theta.")]
    assert _fd_check(p, lambda q: nx.sum(M.encode_image(q, x)), theta) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_text_tower_gradient_matches_finite_differences(seed):
    p = generic_params(seed)
    toks = [[2, 3], [4, 5, 5], [6]]
    phi = [n for n in p.names() if n.startswith("phi.")]
    assert _fd_check(p, lambda q: nx.sum(M.encode_text(q, toks)), phi) < 1e-5


def test_params_checkpoint_round_trip():
    p = small_params(dtype="f32")
    tensors, dtype = nx.parse_checkpoint(p.checkpoint_bytes())
    q = M.EncoderParams.from_checkpoint(tensors, dtype, SMALL)
    assert q.checkpoint_bytes() == p.checkpoint_bytes()
    with pytest.raises(BadDims):
        M.EncoderParams.from_checkpoint(tensors, dtype, M.ModelDims())
