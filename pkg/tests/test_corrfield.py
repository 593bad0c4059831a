import numpy as np
import pytest
from hypothesis import given, strategies as st

from corredit.corrfield import (
    STATS, Affine, CorrField, DescriptorConfig, Jitter, MatchConfig, ThinPlate, compute_descriptors,
    cyclic_filter, downsample_corr, extract_correspondence, gather_source, match_correspondence,
    pck, random_warp, synth_pair,
)
from corredit.errors import ConfigError, MetricError, ParameterError, ShapeError
from corredit.imageio import builtin_pattern, smooth_texture


def shifted(image, dx):
    """Target whose content is ``image`` moved right by ``dx`` pixels."""
    return synth_pair(image, Affine.translation(dx, 0.0))


# --- CorrField ---------------------------------------------------------------


def test_out_of_bounds_cells_invalidated():
    f = CorrField.translation(4, 4, 1.0, 0.0)
    assert not f.valid[:, 0].any() and f.valid[:, 1:].all()
    assert np.all(f.confidence[:, 0] == 0)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        CorrField(np.zeros((2, 2, 2)), np.ones((2, 3), bool), np.ones((2, 2)))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_bytes_round_trip(h, w, seed):
    r = np.random.default_rng(seed)
    f = CorrField(r.uniform(0, 5, (h, w, 2)), r.random((h, w)) < 0.7, r.random((h, w)), (6, 6))
    g = CorrField.from_bytes(f.to_bytes())
    assert f.equals(g)


def test_from_bytes_rejects_garbage():
    with pytest.raises(ParameterError):
        CorrField.from_bytes(b"nope")
    blob = CorrField.identity(2, 2).to_bytes()
    with pytest.raises(ParameterError):
        CorrField.from_bytes(blob[:-1])


def test_gather_source_forced_case():
    src = np.arange(4.0).reshape(2, 2, 1)
    tgt = np.full((2, 2, 1), -1.0)
    corr = CorrField(np.array([[[1, 1], [0, 0]], [[0, 0], [0, 0]]], float),
                     np.array([[True, False], [False, False]]), np.ones((2, 2)))
    out = gather_source(src, tgt, corr)
    assert out[0, 0, 0] == 3.0 and np.all(out.ravel()[1:] == -1.0)


# --- descriptors -------------------------------------------------------------


def test_uniform_image_descriptors_equal():
    d = compute_descriptors(np.full((32, 32, 3), 0.4), DescriptorConfig(levels=2))
    for lvl in d.levels:
        assert np.allclose(lvl, lvl[0, 0], atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(lvl, axis=2), 1.0, atol=1e-12)


def test_copy_descriptors_identical():
    img = smooth_texture(32, 1)
    a, b = compute_descriptors(img), compute_descriptors(img.copy())
    for x, y in zip(a.levels, b.levels):
        assert np.max(np.linalg.norm(x - y, axis=2)) == 0.0


def test_shift_nearest_neighbour_brute_force():
    img = smooth_texture(48, 2)
    tgt, _ = shifted(img, 3)
    cfg = DescriptorConfig(levels=1)
    ds, dt = compute_descriptors(img, cfg).levels[0], compute_descriptors(tgt, cfg).levels[0]
    flat = ds.reshape(-1, ds.shape[2])
    hits = total = 0
    for y in range(8, 40, 3):
        for x in range(11, 40, 3):
            best = int(np.argmin(np.linalg.norm(flat - dt[y, x], axis=1)))
            total += 1
            hits += (best % 48, best // 48) == (x - 3, y)
    assert hits / total > 0.95


def test_small_image_rejected():
    with pytest.raises(ParameterError):
        compute_descriptors(np.zeros((20, 20, 1)))


# --- matching and filtering --------------------------------------------------


def test_identical_images_identity_field():
    img = smooth_texture(48, 3)
    fwd, bwd = extract_correspondence(img, img)
    ident = CorrField.identity(48, 48)
    assert fwd.valid.all() and bwd.valid.all()
    assert np.array_equal(fwd.src_xy, ident.src_xy)


def test_translation_recovered():
    img = smooth_texture(64, 4)
    tgt, gt = shifted(img, 5)
    fwd, _ = extract_correspondence(img, tgt)
    inner = np.zeros((64, 64), bool)
    inner[8:-8, 13:-8] = True
    sel = inner & fwd.valid
    assert sel.sum() > 0.9 * inner.sum()
    err = np.abs(fwd.src_xy[sel] - gt.src_xy[sel])
    assert np.max(err) <= 1.0


def test_independent_noise_mostly_rejected():
    fracs = []
    for seed in range(20):
        a = builtin_pattern("noise", 48, seed)
        b = builtin_pattern("noise", 48, 1000 + seed)
        fracs.append(extract_correspondence(a, b)[0].valid_fraction())
    assert max(fracs) < 0.1


def test_mismatched_pyramids_rejected():
    img = smooth_texture(64, 0)
    a = compute_descriptors(img, DescriptorConfig(levels=2))
    b = compute_descriptors(img, DescriptorConfig(levels=3))
    with pytest.raises(ConfigError):
        match_correspondence(a, b)


def test_cyclic_identity_survives():
    ident = CorrField.identity(8, 8)
    assert cyclic_filter(ident, ident, 0.0).valid.all()


def test_cyclic_collapse_to_origin():
    collapse = CorrField(np.zeros((6, 6, 2)), np.ones((6, 6), bool), np.ones((6, 6)))
    out = cyclic_filter(collapse, CorrField.identity(6, 6), 1.0)
    yy, xx = np.mgrid[0:6, 0:6]
    assert np.array_equal(out.valid, np.hypot(xx, yy) <= 1.0)


def test_cyclic_translation_pair():
    fwd = CorrField.translation(32, 32, 5, 0)
    bwd = CorrField.translation(32, 32, -5, 0)
    out = cyclic_filter(fwd, bwd, 0.5)
    interior = fwd.valid
    assert out.valid[interior].mean() >= 0.95


# --- downsampling --------------------------------------------------------------


def test_downsample_identity():
    out = downsample_corr(CorrField.identity(64, 64), 16, 16)
    assert out.valid.all() and out.src_shape == (16, 16)
    np.testing.assert_allclose(out.src_xy, CorrField.identity(16, 16).src_xy, atol=1e-12)


def test_downsample_all_invalid():
    out = downsample_corr(CorrField.invalid(64, 64), 8, 8)
    assert not out.valid.any()


def test_downsample_translation_scales():
    out = downsample_corr(CorrField.translation(64, 64, 8, 0), 8, 8)
    ref = CorrField.translation(8, 8, 1, 0)
    assert out.valid[:, 1:].all() and not out.valid[:, 0].any()
    np.testing.assert_allclose(out.src_xy[out.valid], ref.src_xy[out.valid], atol=1e-12)


def test_downsample_rejects_upsampling():
    with pytest.raises(ConfigError):
        downsample_corr(CorrField.identity(4, 4), 8, 8)


# --- synthetic pairs and PCK ---------------------------------------------------


def test_synth_identity():
    img = smooth_texture(32, 5)
    tgt, gt = synth_pair(img, Affine())
    np.testing.assert_allclose(tgt, img, atol=1e-12)
    assert gt.valid.all() and np.allclose(gt.src_xy, CorrField.identity(32, 32).src_xy)


def test_synth_translation_offset_and_border():
    tgt, gt = shifted(smooth_texture(32, 6), 5)
    assert not gt.valid[:, :5].any() and gt.valid[:, 5:].all()
    yy, xx = np.mgrid[0:32, 0:32]
    np.testing.assert_allclose(gt.src_xy[..., 0][gt.valid], (xx - 5)[gt.valid])
    np.testing.assert_allclose(gt.src_xy[..., 1][gt.valid], yy[gt.valid])


def test_synth_deterministic():
    img = smooth_texture(32, 7)
    w = random_warp(np.random.default_rng(1), 32)
    a = synth_pair(img, w, Jitter(1.1, -0.05, 0.02), seed=9)
    b = synth_pair(img, w, Jitter(1.1, -0.05, 0.02), seed=9)
    assert np.array_equal(a[0], b[0]) and a[1].equals(b[1])


def test_synth_rejects_bad_warps():
    img = smooth_texture(32, 8)
    with pytest.raises(ParameterError):
        synth_pair(img, Affine(((1.0, 2.0, 0.0), (2.0, 4.0, 0.0))))
    with pytest.raises(ParameterError):
        synth_pair(img, Affine.translation(40, 0))


def test_thin_plate_zero_displacement_is_identity():
    pts = ((0.0, 0.0), (31.0, 0.0), (0.0, 31.0), (31.0, 31.0))
    _, gt = synth_pair(smooth_texture(32, 9), ThinPlate(pts, ((0.0, 0.0),) * 4))
    np.testing.assert_allclose(gt.src_xy, CorrField.identity(32, 32).src_xy, atol=1e-9)


def test_thin_plate_interpolates_control_points():
    pts = ((4.0, 4.0), (27.0, 5.0), (6.0, 26.0), (25.0, 24.0), (16.0, 16.0))
    disp = ((1.0, 0.5), (-1.0, 0.0), (0.5, -1.0), (0.0, 1.0), (1.5, 1.5))
    tps = ThinPlate(pts, disp)
    p = np.array(pts)
    xs, ys = tps.target_to_source(p[:, 0], p[:, 1])
    np.testing.assert_allclose(np.stack([xs, ys], 1), p + np.array(disp), atol=1e-8)


def test_pck_cases():
    gt = CorrField.identity(10, 10)
    assert pck(gt, gt, 0.5) == 1.0
    assert pck(CorrField.invalid(10, 10), gt, 5.0) == 0.0
    off = CorrField(gt.src_xy + np.array([3.0, 0.0]), np.ones((10, 10), bool), np.ones((10, 10)), (10, 13))
    gt13 = CorrField(gt.src_xy, gt.valid, gt.confidence, (10, 13))
    assert pck(off, gt13, 2.0) == 0.0
    assert pck(off, gt13, 4.0) == 1.0
    with pytest.raises(MetricError):
        pck(gt, CorrField.invalid(10, 10), 1.0)


def test_extractor_on_benchmark_warps():
    r = np.random.default_rng(0)
    scores = []
    for s in range(4):
        img = smooth_texture(64, 40 + s)
        tgt, gt = synth_pair(img, random_warp(r, 64), Jitter(1.0, 0.0, 0.01), seed=s)
        scores.append(pck(extract_correspondence(img, tgt)[0], gt, 2.0))
    assert min(scores) > 0.5


def test_stats_count_work():
    img = smooth_texture(32, 10)
    d0, m0 = STATS["descriptors"], STATS["matches"]
    extract_correspondence(img, img, DescriptorConfig(levels=2), MatchConfig())
    assert STATS["descriptors"] - d0 == 2 and STATS["matches"] - m0 == 2
