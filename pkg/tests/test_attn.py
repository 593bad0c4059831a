import numpy as np
import pytest
from hypothesis import given, strategies as st

from corredit.attn import (
    AttnParams, GateConfig, attention_weights, corr_attention, gate, guided_attention,
    project_qkv, standard_attention, warp_outputs, warp_queries,
)
from corredit.corrfield import CorrField
from corredit.errors import ConfigError, ShapeError


def labeled(h, w, d=3):
    return np.arange(h * w * d, dtype=float).reshape(h, w, d)


def test_identity_projection():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    q, k, v = project_qkv(x, AttnParams.identity(5))
    assert np.array_equal(q, x) and np.array_equal(k, x) and np.array_equal(v, x)


def test_zero_input_projection():
    p = AttnParams(*(np.random.default_rng(i).normal(size=(4, 4)) for i in range(4)))
    assert all(np.all(a == 0) for a in project_qkv(np.zeros((2, 2, 4)), p))


def test_hand_projection():
    x = np.array([[[1.0, 2.0]]])
    fq = np.array([[1.0, 0.0], [1.0, 1.0]])
    fk = np.array([[0.0, 1.0], [1.0, 0.0]])
    fv = np.array([[2.0, 0.0], [0.0, 3.0]])
    q, k, v = project_qkv(x, AttnParams(fq, fk, fv, np.eye(2)))
    np.testing.assert_array_equal(q[0, 0], [3.0, 2.0])
    np.testing.assert_array_equal(k[0, 0], [2.0, 1.0])
    np.testing.assert_array_equal(v[0, 0], [2.0, 6.0])


def test_projection_shape_errors():
    with pytest.raises(ShapeError):
        project_qkv(np.zeros((2, 2, 3)), AttnParams.identity(4))
    with pytest.raises(ShapeError):
        AttnParams(np.eye(2), np.eye(3), np.eye(2), np.eye(2))


def test_warp_queries_identity():
    q = labeled(3, 3)
    assert np.array_equal(warp_queries(q, q.copy(), CorrField.identity(3, 3)), q)


def test_warp_queries_single_cell():
    qi, qj = labeled(2, 2), -labeled(2, 2)
    valid = np.zeros((2, 2), bool)
    valid[0, 0] = True
    corr = CorrField(np.ones((2, 2, 2)), valid, np.ones((2, 2)))
    out = warp_queries(qi, qj, corr)
    assert np.array_equal(out[0, 0], qi[1, 1])
    mask = ~valid
    assert np.array_equal(out[mask], qj[mask])


@given(st.integers(-3, 3), st.integers(-3, 3))
def test_warp_queries_constant_offset(dx, dy):
    h = w = 6
    qi, qj = labeled(h, w), np.full((h, w, 3), -1.0)
    corr = CorrField.translation(h, w, dx, dy)
    out = warp_queries(qi, qj, corr)
    for y in range(h):
        for x in range(w):
            sx, sy = x - dx, y - dy
            ref = qi[sy, sx] if (0 <= sx < w and 0 <= sy < h) else qj[y, x]
            assert np.array_equal(out[y, x], ref)


def test_single_token_attention():
    v = np.array([[[4.0, -2.0]]])
    out = corr_attention(np.array([[[100.0, 3.0]]]), np.array([[[-5.0, 1.0]]]), v)
    np.testing.assert_array_equal(out, v)


def test_orthogonal_query_uniform():
    q = np.zeros((1, 1, 2))
    q[0, 0] = [0.0, 1.0]
    k = np.zeros((2, 2, 2))
    k[..., 0] = np.arange(4).reshape(2, 2)
    v = labeled(2, 2, 2)
    out = corr_attention(q, k, v)
    np.testing.assert_allclose(out[0, 0], v.reshape(-1, 2).mean(0), atol=1e-12)


def test_hand_softmax_two_tokens():
    a, b = 0.7, -3.0
    q = np.ones((1, 1, 1))
    k = np.array([[[10.0], [-10.0]]])
    v = np.array([[[a], [b]]])
    out = corr_attention(q, k, v)
    assert abs(out[0, 0, 0] - a) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_normalized(seed):
    r = np.random.default_rng(seed)
    w = attention_weights(r.normal(size=(3, 4, 5)) * 5, r.normal(size=(2, 3, 5)) * 5)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
    assert np.all(w >= 0)


def test_standard_is_corr_attention_with_identity():
    r = np.random.default_rng(1)
    q, k, v = r.normal(size=(3, 3, 4)), r.normal(size=(3, 3, 4)), r.normal(size=(3, 3, 4))
    a = standard_attention(q, k, v)
    b = corr_attention(warp_queries(q, q, CorrField.identity(3, 3)), k, v)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    q, k, v = (r.normal(size=(6, 4)) for _ in range(3))
    perm = r.permutation(6)
    out = standard_attention(q[:, None], k[:, None], v[:, None])[:, 0]
    outp = standard_attention(q[perm, None], k[perm, None], v[perm, None])[:, 0]
    np.testing.assert_allclose(outp, out[perm], atol=1e-12)


def test_dim_mismatch():
    with pytest.raises(ShapeError):
        attention_weights(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)))


def test_warp_outputs_cases():
    fi = labeled(3, 3)
    assert np.array_equal(warp_outputs(fi, fi.copy(), CorrField.identity(3, 3)), fi)
    fj = -labeled(3, 3)
    valid = np.zeros((3, 3), bool)
    valid[1, 2] = True
    corr = CorrField(np.zeros((3, 3, 2)), valid, np.ones((3, 3)))
    out = warp_outputs(fi, fj, corr)
    assert np.array_equal(out[1, 2], fi[0, 0])
    assert np.array_equal(out[~valid], fj[~valid])


def test_guided_attention_dispatch():
    r = np.random.default_rng(2)
    qi, ki, vi, qj, kj, vj = (r.normal(size=(3, 3, 4)) for _ in range(6))
    corr = CorrField.translation(3, 3, 1, 0)
    q_path = guided_attention(qj, kj, vj, qi, ki, vi, corr, "queries")
    o_path = guided_attention(qj, kj, vj, qi, ki, vi, corr, "outputs")
    np.testing.assert_array_equal(q_path, corr_attention(warp_queries(qi, qj, corr), ki, vi))
    np.testing.assert_array_equal(
        o_path, warp_outputs(standard_attention(qi, ki, vi), standard_attention(qj, kj, vj), corr))
    assert not np.allclose(q_path, o_path)
    with pytest.raises(ConfigError):
        guided_attention(qj, kj, vj, qi, ki, vi, corr, "keys")


def test_gate_defaults():
    g = GateConfig()
    assert (g.step_lo, g.step_hi, g.layer_threshold) == (4, 40, 8)
    assert gate(8, 10, g)
    assert not any(gate(7, s, g) for s in range(1, 51))
    assert not gate(8, 41, g) and not gate(8, 3, g)
    assert gate(8, 4, g) and gate(16, 40, g)
    assert not gate(8, 10, GateConfig(enabled=False))


def test_gate_config_validation():
    with pytest.raises(ConfigError):
        GateConfig(step_lo=10, step_hi=5)
    with pytest.raises(ConfigError):
        GateConfig(warp_target="values")
