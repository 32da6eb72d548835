"""Region loss share, multi-scale perceptual loss and lip-sync loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headmotion.losses import (
    avg_pool2,
    perceptual_loss,
    pyramid_features,
    region_loss_fraction,
    sync_loss,
    sync_similarity,
)


class TestRegionLossFraction:
    def test_full_region(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
        assert region_loss_fraction(a, b, np.ones((10, 10), int)) == pytest.approx(1.0, abs=1e-9)

    def test_four_percent(self):
        gt = np.zeros((50, 50))
        gen = np.full((50, 50), 0.3)
        region = np.zeros((50, 50), int)
        region[:10, :10] = 1
        assert abs(region_loss_fraction(gen, gt, region) - 0.04) < 1e-9

    def test_identical_images(self):
        x = np.random.default_rng(1).random((8, 8))
        assert region_loss_fraction(x, x, np.ones((8, 8), int)) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        small = (rng.random((12, 12)) < 0.3).astype(int)
        big = np.maximum(small, (rng.random((12, 12)) < 0.3).astype(int))
        fs, fb = region_loss_fraction(a, b, small), region_loss_fraction(a, b, big)
        assert 0.0 <= fs <= fb <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            region_loss_fraction(np.zeros((4, 4)), np.zeros((4, 5)), np.ones((4, 4)))
        with pytest.raises(ValueError):
            region_loss_fraction(np.zeros((4, 4)), np.zeros((4, 4)), np.full((4, 4), 0.5))


def direct_perceptual(gen, gt, weight=10.0, levels=3):
    total = 0.0
    for a, b in zip(gen, gt):
        fa, fb = [a], [b]
        for _ in range(levels - 1):
            fa.append(fa[-1].reshape(fa[-1].shape[0] // 2, 2, fa[-1].shape[1] // 2, 2, -1).mean(axis=(1, 3)))
            fb.append(fb[-1].reshape(fb[-1].shape[0] // 2, 2, fb[-1].shape[1] // 2, 2, -1).mean(axis=(1, 3)))
        total += sum(np.abs(x - y).sum() for x, y in zip(fa, fb))
    return weight * total / len(gen)


class TestPerceptualLoss:
    def test_identical(self):
        x = [np.random.default_rng(0).random((8, 8, 3))]
        assert perceptual_loss(x, x) == 0.0

    def test_unreduced_sum_convention(self):
        H, W, C = 8, 6, 3
        gen, gt = [np.ones((H, W, C))], [np.zeros((H, W, C))]
        assert perceptual_loss(gen, gt, phi=pyramid_features(1)) == pytest.approx(10.0 * H * W * C, abs=1e-9)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(2)
        gen = [rng.random((16, 16, 3)) for _ in range(4)]
        gt = [rng.random((16, 16, 3)) for _ in range(4)]
        assert abs(perceptual_loss(gen, gt) - direct_perceptual(gen, gt)) < 1e-6

    def test_pluggable_extractor_and_mismatch(self):
        phi = lambda img: [img.sum(axis=-1)]  # noqa: E731
        gen, gt = [np.ones((4, 4, 2))], [np.zeros((4, 4, 2))]
        assert perceptual_loss(gen, gt, phi=phi, weight=1.0) == pytest.approx(32.0)
        calls = iter([[np.zeros(3)], [np.zeros(4)]])
        with pytest.raises(ValueError):
            perceptual_loss([0], [0], phi=lambda _: next(calls))
        with pytest.raises(ValueError):
            perceptual_loss([], [])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = [rng.random((8, 8))], [rng.random((8, 8))]
        assert perceptual_loss(a, b) > 0.0

    def test_pool_needs_even_size(self):
        with pytest.raises(ValueError):
            avg_pool2(np.zeros((5, 4)))


class TestSyncLoss:
    def test_identical_unit(self):
        v = np.array([0.6, 0.8])
        assert sync_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
        assert abs(sync_loss([(v, v)])) < 1e-9

    def test_orthogonal_clamps(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert abs(sync_loss([(e1, e2)]) - (-math.log(1e-7))) < 1e-9
        assert -math.log(1e-7) == pytest.approx(16.118, abs=1e-3)

    def test_antiparallel_floored(self):
        e1 = np.array([1.0, 0.0])
        assert abs(sync_loss([(e1, -e1)]) - (-math.log(1e-7))) < 1e-9

    def test_zero_vector_uses_eps_denominator(self):
        assert sync_similarity(np.zeros(3), np.ones(3)) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_mean_over_pairs_non_negative(self, seed, n):
        rng = np.random.default_rng(seed)
        pairs = [(rng.standard_normal(5), rng.standard_normal(5)) for _ in range(n)]
        loss = sync_loss(pairs)
        direct = -np.mean([math.log(min(max(sync_similarity(v, a), 1e-7), 1.0)) for v, a in pairs])
        assert loss >= 0.0 and abs(loss - direct) < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            sync_similarity(np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            sync_similarity(np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            sync_loss([])
