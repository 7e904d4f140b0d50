import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condnoise.errors import EmptyPatch, RankDeficient, TooFewPatches
from condnoise.image_io import ColorImage, ImagePlane, partition_patches
from condnoise.imagery import natural_plane
from condnoise.lonpe import (
    LonpeConfig, PatchStats, estimate, fit_prior, patch_stats, plane_stats, select_smooth, smoothness,
)
from condnoise.noise_model import NoisePrior, add_noise, make_rng, pixel_variance


def exact_stats(prior, L):
    return [PatchStats(float(l), float(pixel_variance(l, prior)), 0.0, i, 0) for i, l in enumerate(L)]


def flat(mean, var=0.0, x=0, y=0):
    return PatchStats(mean, var, smoothness(mean, var), x, y)


class TestPatchStats:
    def test_constant(self):
        s = patch_stats(np.full((4, 4), 0.25))
        assert (s.mean, s.variance, s.smoothness) == (0.25, 0.0, 0.0)

    def test_two_pixels(self):
        s = patch_stats(np.array([0.0, 0.5]))
        assert s.mean == 0.25 and s.variance == 0.0625 and s.smoothness == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(EmptyPatch):
            patch_stats(np.array([]))

    def test_nonpositive_mean(self):
        assert patch_stats(np.zeros(4)).smoothness == math.inf

    def test_monte_carlo_variance(self):
        x = 0.5 + 0.01 * make_rng(5).standard_normal((16, 16))
        s = patch_stats(x)
        n = x.size
        assert abs(s.variance - 1e-4) < 3 * 1e-4 * math.sqrt(2 / n)

    @given(st.floats(0.01, 1.0), st.floats(0.0, 0.5), st.floats(1e-4, 0.5))
    def test_smoothness_monotone_in_variance(self, mean, v, dv):
        assert smoothness(mean, v + dv) > smoothness(mean, v)

    def test_plane_stats_agree_with_partition(self):
        data = make_rng(1).random((50, 37))
        stats = plane_stats(ImagePlane(data), 8)
        views = partition_patches(ImagePlane(data), 8)
        assert len(stats) == len(views)
        for s, v in zip(stats, views):
            ref = patch_stats(v.data)
            assert (s.grid_y, s.grid_x) == (v.grid_y, v.grid_x)
            assert s.mean == pytest.approx(ref.mean, abs=1e-14)
            assert s.variance == pytest.approx(ref.variance, abs=1e-14)


class TestSelect:
    def test_ties_row_major(self):
        stats = [flat(0.5, 0.0, x=i % 10, y=i // 10) for i in range(100)]
        chosen = select_smooth(stats, LonpeConfig(select_ratio=0.1))
        assert chosen == stats[:10]

    def test_edge_excluded(self):
        stats = [flat(0.5, 1e-4, x=i) for i in range(99)] + [flat(0.5, 0.2, x=99)]
        chosen = select_smooth(stats, LonpeConfig(select_ratio=0.1))
        assert len(chosen) == 10
        assert all(s.grid_x != 99 for s in chosen)

    def test_dark_dropped(self):
        stats = [flat(0.0, 0.0, x=i) for i in range(50)] + [flat(0.5, 0.01, x=50 + i) for i in range(80)]
        chosen = select_smooth(stats, LonpeConfig(select_ratio=0.1))
        assert len(chosen) == 8 and all(s.mean > 0 for s in chosen)

    def test_too_few(self):
        with pytest.raises(TooFewPatches):
            select_smooth([flat(0.5, x=i) for i in range(20)], LonpeConfig(select_ratio=0.1))

    def test_random_arm_seeded(self):
        stats = [flat(0.5, 1e-3 * i, x=i) for i in range(200)]
        cfg = LonpeConfig(use_smoothness_filter=False, seed=3)
        a, b = select_smooth(stats, cfg), select_smooth(stats, cfg)
        assert a == b and len(a) == 20
        assert a != stats[:20]

    def test_selected_beats_random_on_mixed_scene(self):
        rng = make_rng(0)
        y, x = np.mgrid[0:256, 0:256] / 255.0
        clean = 0.1 + 0.8 * x
        clean[:, 128:] += 0.1 * np.sin(40 * y[:, 128:])  # textured half
        clean = np.clip(clean, 0, 1)
        prior = NoisePrior(0.1, 0.02)
        err_on, err_off = [], []
        for seed in range(5):
            noisy = ImagePlane(add_noise(clean, "poisson_gaussian", prior, make_rng(seed)))
            on = estimate(noisy, LonpeConfig(seed=seed)).prior
            off = estimate(noisy, LonpeConfig(use_smoothness_filter=False, seed=seed)).prior
            err_on.append(abs(on.sigma_s - 0.1) / 0.1)
            err_off.append(abs(off.sigma_s - 0.1) / 0.1)
        assert np.mean(err_on) <= np.mean(err_off)


class TestFit:
    def test_two_point_hand_example(self):
        est = fit_prior(exact_stats(NoisePrior(math.sqrt(0.004), math.sqrt(0.003)), [0.2, 0.8]))
        assert est.prior.sigma_s == pytest.approx(0.0632455532, rel=1e-9)
        assert est.prior.sigma_r == pytest.approx(0.0547722558, rel=1e-9)
        assert est.residual_rms == pytest.approx(0.0, abs=1e-15)
        assert est.clamped == "none"

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            fit_prior([flat(0.4, 0.01, x=i) for i in range(10)])

    def test_too_few(self):
        with pytest.raises(TooFewPatches):
            fit_prior([flat(0.4, 0.01)])

    def test_hundred_points(self):
        est = fit_prior(exact_stats(NoisePrior(0.2, 0.01), np.linspace(0.05, 0.95, 100)))
        assert est.prior.sigma_s == pytest.approx(0.2, rel=1e-9)
        assert est.prior.sigma_r == pytest.approx(0.01, rel=1e-9)

    @settings(max_examples=200)
    @given(st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.integers(0, 2 ** 32 - 1))
    def test_exact_recovery(self, s, r, seed):
        L = np.random.default_rng(seed).uniform(0.0, 1.0, 30)
        est = fit_prior(exact_stats(NoisePrior(s, r), L))
        assert abs(est.prior.sigma_s - s) / s <= 1e-9
        assert abs(est.prior.sigma_r - r) / r <= 1e-9

    def test_residual_orthogonal(self):
        rng = np.random.default_rng(4)
        L = rng.uniform(0.1, 0.9, 40)
        v = 0.01 * L + 0.002 + 1e-3 * rng.standard_normal(40)
        stats = [PatchStats(l, max(x, 0.0), 0.0, i, 0) for i, (l, x) in enumerate(zip(L, v))]
        est = fit_prior(stats)
        a, b = est.prior.sigma_s ** 2, est.prior.sigma_r ** 2
        res = np.array([s.variance for s in stats]) - (a * L + b)
        assert abs(res @ L) < 1e-10 and abs(res.sum()) < 1e-10

    def test_negative_intercept_clamped(self):
        L = np.linspace(0.2, 0.9, 20)
        stats = [PatchStats(l, 0.01 * l - 0.001, 0.0, i, 0) for i, l in enumerate(L)]
        est = fit_prior(stats)
        assert est.prior.sigma_r == 0.0 and est.clamped == "sigma_r"
        ref = float(np.dot(L, 0.01 * L - 0.001) / np.dot(L, L))  # refit slope alone
        assert est.prior.sigma_s == pytest.approx(math.sqrt(ref), rel=1e-12)

    def test_negative_slope_clamped(self):
        L = np.linspace(0.2, 0.9, 20)
        stats = [PatchStats(l, 0.01 - 0.005 * l, 0.0, i, 0) for i, l in enumerate(L)]
        est = fit_prior(stats)
        assert est.prior.sigma_s == 0.0 and est.clamped == "sigma_s"
        assert not math.isnan(est.prior.sigma_r)

    def test_all_negative(self):
        L = np.linspace(0.2, 0.9, 20)
        est = fit_prior([PatchStats(l, 0.0, 0.0, i, 0) for i, l in enumerate(L)])
        assert est.prior.as_tuple() == (0.0, 0.0)

    def test_json(self):
        est = fit_prior(exact_stats(NoisePrior(0.1, 0.02), [0.1, 0.5, 0.9]))
        assert set(json.loads(est.to_json())) == {"sigma_s", "sigma_r", "residual_rms", "patches_used", "clamped"}


class TestEstimate:
    def test_constant_image(self):
        with pytest.raises(RankDeficient):
            estimate(ImagePlane(np.full((256, 256), 0.4)))

    def test_natural_mild(self):
        clean = natural_plane("astronaut").data
        noisy = ImagePlane(add_noise(clean, "poisson_gaussian", NoisePrior(0.05, 0.02), make_rng(0)))
        est = estimate(noisy).prior
        assert abs(est.sigma_s - 0.05) <= 0.02
        assert abs(est.sigma_r - 0.02) <= 0.02

    def test_deterministic(self):
        noisy = ImagePlane(add_noise(natural_plane("camera").data, "poisson_gaussian",
                                     NoisePrior(0.1, 0.04), make_rng(1)))
        assert estimate(noisy) == estimate(noisy)
        cfg = LonpeConfig(use_smoothness_filter=False, seed=9)
        assert estimate(noisy, cfg) == estimate(noisy, cfg)

    def test_color_pools_channels(self):
        rng = make_rng(2)
        clean = np.stack([natural_plane(n).data for n in ("astronaut", "camera", "coffee")])
        noisy = ColorImage(add_noise(clean, "poisson_gaussian", NoisePrior(0.1, 0.03), rng))
        est = estimate(noisy)
        usable = sum(s.mean >= 1e-4 for p in noisy.planes for s in plane_stats(p, 16))
        assert usable > 400
        assert est.patches_used == math.ceil(0.1 * usable - 1e-9)
