"""Mask generation: kernels, ratio targeting, geometry statistics, corruption."""

import math

import numpy as np
import pytest

from eegmoe.masking import (GEOMETRIES, KernelRecord, MaskGenerationError,
                            MaskMap, MaskPolicy, apply_kernel, corrupt,
                            gaussian_kernel, generate_mask, generate_rect_mask,
                            rect_kernel)
from eegmoe.signal import StftConfig, band_partition, band_to_bins, stft

F, TT = 201, 31


def test_kernel_peak_is_one():
    g = gaussian_kernel(12, 7, 3.0, 2.0, F, TT)
    assert g[12, 7] == 1.0


def test_kernel_one_sigma_point():
    g = gaussian_kernel(12, 7, 3.0, 2.0, F, TT)
    assert g[15, 7] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert g[12, 9] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_infinite_sigma_t_gives_constant_column():
    g = gaussian_kernel(30, 5, 4.0, math.inf, F, TT)
    np.testing.assert_array_equal(g[30], np.ones(TT))
    assert g.max() == 1.0


def test_kernel_center_bounds():
    with pytest.raises(ValueError):
        gaussian_kernel(F, 0, 1.0, 1.0, F, TT)
    with pytest.raises(ValueError):
        gaussian_kernel(0, -1, 1.0, 1.0, F, TT)
    with pytest.raises(ValueError):
        gaussian_kernel(1, 1, -2.0, 1.0, F, TT)


def test_apply_kernel_frequency_column_zeroed():
    mask = MaskMap(np.ones((F, TT)), "frequency")
    g = gaussian_kernel(40, 0, 1e-9, math.inf, F, TT)  # ~delta row, all t
    out = apply_kernel(mask, g)
    np.testing.assert_allclose(out.values[40], 0.0, atol=1e-12)


def test_apply_kernel_twice_squares_factor():
    rng = np.random.default_rng(0)
    m0 = rng.uniform(size=(F, TT))
    g = gaussian_kernel(50, 10, 5.0, 3.0, F, TT)
    once = apply_kernel(MaskMap(m0.copy(), "joint-tf"), g)
    twice = apply_kernel(once, g)
    np.testing.assert_allclose(twice.values, m0 * (1 - g) ** 2, atol=1e-15)
    assert twice.values.min() >= 0.0 and twice.values.max() <= 1.0


def test_apply_kernel_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    m0 = rng.uniform(size=(F, TT))
    g = rng.uniform(size=(F, TT))
    out = apply_kernel(MaskMap(m0.copy(), "joint-tf"), g)
    want = np.array([[m0[i, j] * (1.0 - g[i, j]) for j in range(TT)]
                     for i in range(F)])
    assert np.abs(out.values - want).max() < 1e-15


def test_apply_kernel_shape_mismatch():
    with pytest.raises(ValueError):
        apply_kernel(MaskMap(np.ones((F, TT)), "time"), np.ones((F, TT + 1)))


# ---------------------------------------------------------------------------
# generation: ratio band, bounds, monotonicity, determinism
# ---------------------------------------------------------------------------

def test_ratio_lands_in_band_for_each_geometry():
    pol = MaskPolicy()
    for geom in GEOMETRIES:
        for seed in range(50):
            m = generate_mask(pol, F, TT, rng=np.random.default_rng(seed),
                              geometry=geom)
            assert pol.ratio - 1e-9 <= m.ratio <= pol.ratio + pol.eps_ratio
            assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_mask_monotone_under_replay():
    pol = MaskPolicy()
    m = generate_mask(pol, F, TT, rng=np.random.default_rng(3))
    # replay the kernel log: partial products never increase anywhere
    cur = np.ones((F, TT))
    for rec in m.kernel_log:
        g = rec.amplitude * gaussian_kernel(rec.f0, rec.t0, rec.sigma_f,
                                            rec.sigma_t, F, TT)
        nxt = cur * (1.0 - g)
        assert np.all(nxt <= cur + 1e-15)
        cur = nxt
    np.testing.assert_allclose(cur, m.values, atol=1e-12)


def test_determinism_same_seed_same_mask():
    pol = MaskPolicy()
    a = generate_mask(pol, F, TT, rng=np.random.default_rng(42))
    b = generate_mask(pol, F, TT, rng=np.random.default_rng(42))
    assert a.geometry == b.geometry
    np.testing.assert_array_equal(a.values, b.values)


def test_geometry_frequencies_within_3_sigma():
    pol = MaskPolicy()
    n = 3000
    counts = {g: 0 for g in GEOMETRIES}
    for seed in range(n):
        m = generate_mask(pol, F, TT, rng=np.random.default_rng([1, seed]))
        counts[m.geometry] += 1
    for g, p in zip(GEOMETRIES, pol.geometry_probs):
        bound = 3.0 * math.sqrt(p * (1 - p) / n)
        assert abs(counts[g] / n - p) <= bound, (g, counts[g] / n)


def test_band_biased_center_fraction():
    pol = MaskPolicy()
    cfg = StftConfig()
    in_band = total = 0
    ranges = [band_to_bins(b, cfg) for b in ("delta", "theta", "alpha", "beta")]
    for seed in range(400):
        m = generate_mask(pol, F, TT, cfg, np.random.default_rng([2, seed]))
        for rec in m.kernel_log:
            total += 1
            if any(lo <= rec.f0 <= hi for lo, hi in ranges):
                in_band += 1
    assert in_band / total >= 0.5


def test_unreachable_ratio_fails_cleanly():
    # all centers band-biased into bins 2..60: frequency kernels can never
    # erode the top bins, so a 90% target exhausts the kernel budget
    pol = MaskPolicy(ratio=0.9, band_bias=1.0)
    with pytest.raises(MaskGenerationError):
        generate_mask(pol, F, TT, rng=np.random.default_rng(0),
                      geometry="frequency")
    with pytest.raises(ValueError):
        generate_mask(MaskPolicy(), 1, 5)


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(ratio=1.5)
    with pytest.raises(ValueError):
        MaskPolicy(geometry_probs=(0.5, 0.2, 0.1))
    with pytest.raises(ValueError):
        MaskPolicy(band_bias=1.5)


# ---------------------------------------------------------------------------
# rectangular variant
# ---------------------------------------------------------------------------

def test_rect_mask_binary_values():
    pol = MaskPolicy()
    for seed in range(20):
        m = generate_rect_mask(pol, F, TT, rng=np.random.default_rng(seed))
        assert set(np.unique(m.values)) <= {0.0, 1.0}
        assert pol.ratio - 1e-12 <= m.ratio <= pol.ratio + pol.eps_ratio


def test_single_time_rectangle_exact_area():
    g = rect_kernel(0, 15, math.inf, 1.55, F, TT)
    m = apply_kernel(MaskMap(np.ones((F, TT)), "rect-time"), g)
    width = np.flatnonzero(g[0]).size
    assert m.ratio == pytest.approx(width / TT, abs=1e-12)


def test_rect_geometry_draw_probabilities():
    pol = MaskPolicy()
    seen = set()
    for seed in range(60):
        m = generate_rect_mask(pol, F, TT, rng=np.random.default_rng(seed))
        seen.add(m.geometry)
    assert seen == {"rect-frequency", "rect-time", "rect-joint"}


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def test_corrupt_identity_mask():
    x = np.random.default_rng(5).normal(size=(3, 6000))
    ones = MaskMap(np.ones((F, TT)), "frequency")
    assert np.abs(corrupt(x, ones) - x).max() < 1e-6


def test_corrupt_zero_mask():
    x = np.random.default_rng(6).normal(size=(2, 6000))
    zeros = MaskMap(np.zeros((F, TT)), "frequency")
    assert np.abs(corrupt(x, zeros)).max() == 0.0


def test_corrupt_alpha_band_sine_suppressed():
    cfg = StftConfig()
    t = np.arange(6000) / cfg.fs
    x = np.sin(2 * np.pi * 10.0 * t)[None]
    lo, hi = band_to_bins("alpha", cfg)
    mvals = np.ones((F, TT))
    mvals[lo:hi + 1] = 0.0
    out = corrupt(x, MaskMap(mvals, "frequency"), cfg)
    # interior excludes reflect-padding splash at the segment edges
    core = slice(cfg.n_fft, 6000 - cfg.n_fft)
    rms_in = np.sqrt(np.mean(x[:, core] ** 2))
    rms_out = np.sqrt(np.mean(out[:, core] ** 2))
    assert rms_out < 0.05 * rms_in


def test_corrupt_channel_equivariance():
    x = np.random.default_rng(7).normal(size=(4, 2000))
    cfg = StftConfig()
    m = generate_mask(MaskPolicy(), cfg.n_bins, cfg.n_frames(2000), cfg,
                      np.random.default_rng(8))
    perm = np.array([2, 0, 3, 1])
    a = corrupt(x, m, cfg)[perm]
    b = corrupt(x[perm], m, cfg)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_corrupt_mask_shape_mismatch():
    x = np.random.default_rng(9).normal(size=(1, 2000))
    with pytest.raises(ValueError):
        corrupt(x, MaskMap(np.ones((F, TT)), "frequency"))


def test_corrupt_preserves_length():
    x = np.random.default_rng(10).normal(size=(2, 999))
    cfg = StftConfig()
    m = generate_mask(MaskPolicy(), cfg.n_bins, cfg.n_frames(999), cfg,
                      np.random.default_rng(11))
    assert corrupt(x, m, cfg).shape == x.shape


def test_kernel_log_serialization():
    rec = KernelRecord(3, 4, 2.0, math.inf, 0.7)
    d = rec.to_dict()
    assert d["sigma_t"] is None and d["amplitude"] == 0.7
