import numpy as np
import pytest
from hypothesis import given, strategies as st

from corredit.corrfield import CorrField, gather_source
from corredit.denoise import AnalyticScoreModel, analytic_eps
from corredit.errors import ConfigError, ShapeError
from corredit.guidance import (
    CfgConfig, EpsPair, fuse_uncond, guided_eps, guided_eps_both, inj, injection_mask,
    predict_branches, step_rng,
)
from corredit.schedule import make_schedule


def grids(seed=0, h=4, w=4, c=2):
    r = np.random.default_rng(seed)
    return r.normal(size=(h, w, c)), r.normal(size=(h, w, c))


def test_defaults():
    c = CfgConfig()
    assert (c.scale, c.lam, c.gamma, c.branch_mode) == (7.5, 0.8, 0.9, "uncond")


@pytest.mark.parametrize("kw", [{"lam": 1.2}, {"gamma": 0.0}, {"scale": -1}, {"branch_mode": "x"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        CfgConfig(**kw)


def test_branches_equal_for_condition_blind_denoiser():
    den = lambda z, t, c: z * 0.5 + t
    p = predict_branches(den, np.ones(3), 2, "cat")
    assert np.array_equal(p.cond, p.uncond)


def test_branches_differ_on_asymmetric_mixture():
    m = AnalyticScoreModel([0.3, 0.7], [[-1.0], [2.0]], [0.5, 0.2], {"a": [0]})
    s = make_schedule()
    den = lambda z, t, c: analytic_eps(z, t, c, m, s)
    p = predict_branches(den, np.array([[0.4]]), 500, "a")
    q = predict_branches(den, np.array([[0.4]]), 500, "a")
    assert not np.allclose(p.cond, p.uncond)
    assert np.array_equal(p.cond, q.cond)


def test_epspair_shape_check():
    with pytest.raises(ShapeError):
        EpsPair(np.zeros(2), np.zeros(3))


def test_full_injection_identity():
    ei, ej = grids()
    out = inj(ei, ej, CorrField.identity(4, 4), 1.0, np.random.default_rng(0))
    assert np.array_equal(out, ei)


@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_invalid_corr_never_injects(gamma, seed):
    ei, ej = grids(seed)
    out = inj(ei, ej, CorrField.invalid(4, 4), gamma, np.random.default_rng(seed))
    assert np.array_equal(out, ej)


def test_injected_fraction_monte_carlo():
    corr = CorrField.identity(16, 16)
    frac = np.mean([injection_mask(corr, 0.9, step_rng(7, 1, k)).mean() for k in range(1000)])
    assert 0.88 <= frac <= 0.92


def test_fuse_lambda_zero_is_plain():
    ei, ej = grids(1)
    out = fuse_uncond(ei, ej, CorrField.translation(4, 4, 1, 0), CfgConfig(lam=0.0), np.random.default_rng(0))
    assert np.array_equal(out, ej)


def test_fuse_full_transfer():
    ei, ej = grids(2)
    out = fuse_uncond(ei, ej, CorrField.identity(4, 4), CfgConfig(lam=1.0, gamma=1.0), np.random.default_rng(0))
    assert np.array_equal(out, ei)


@given(st.integers(0, 10_000))
def test_fuse_per_cell_convex_identity(seed):
    ei, ej = grids(seed, 5, 5, 3)
    corr = CorrField.translation(5, 5, 1, -1)
    out = fuse_uncond(ei, ej, corr, CfgConfig(lam=0.8, gamma=0.9), np.random.default_rng(seed))
    warped = gather_source(ei, ej, corr)
    for y in range(5):
        for x in range(5):
            mixed = 0.2 * ej[y, x] + 0.8 * warped[y, x]
            plain = np.allclose(out[y, x], ej[y, x], rtol=0, atol=1e-15)
            injected = np.allclose(out[y, x], mixed, rtol=0, atol=1e-15)
            assert plain or injected
            if not corr.valid[y, x]:
                assert plain


def test_guided_eps_hand():
    pair = EpsPair(np.array([3.0]), np.array([2.0]))
    np.testing.assert_allclose(guided_eps(np.array([1.0]), pair, 7.5), [8.5])
    assert np.array_equal(guided_eps(np.array([1.0]), pair, 0.0), [1.0])
    assert np.array_equal(guided_eps(pair.uncond, pair, 1.0), pair.cond)


def test_guided_both():
    pair = EpsPair(np.array([3.0, 1.0]), np.array([2.0, -1.0]))
    np.testing.assert_array_equal(guided_eps_both(pair.uncond, pair.cond, 7.5),
                                  guided_eps(pair.uncond, pair, 7.5))
    fu, fc = np.array([1.0, 0.0]), np.array([2.0, 4.0])
    np.testing.assert_allclose(guided_eps_both(fu, fc, 2.0), [3.0, 8.0])
    with pytest.raises(ShapeError):
        guided_eps_both(fu, fc[:1], 1.0)


def test_step_rng_streams():
    a = step_rng(0, 1, 5).random(4)
    assert np.array_equal(a, step_rng(0, 1, 5).random(4))
    assert not np.array_equal(a, step_rng(0, 2, 5).random(4))
    assert not np.array_equal(a, step_rng(0, 1, 6).random(4))
