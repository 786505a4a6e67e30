"""Brownian increments, the noise coefficient and the Ito isometry check."""
import math

import numpy as np
import pytest

from snse.noise import (
    NoiseCoefficient,
    WienerBasis,
    apply_sigma,
    calibrate_lipschitz,
    hs_norm,
    ito_integral_check,
    path_seed,
    sample_increment,
    shell_columns,
)
from snse.spectral import SpectralField, lattice, random_solenoidal, sobolev_norm


@pytest.fixture(scope="module")
def lat16():
    return lattice(16)


@pytest.fixture(scope="module")
def sigma16(lat16):
    return NoiseCoefficient("linear-convolution", lat16, K=16, eps=0.7)


class TestWienerBasis:
    def test_replay_by_seed(self):
        a = sample_increment(WienerBasis(8, 42), 0.01)
        b = sample_increment(WienerBasis(8, 42), 0.01)
        assert a.shape == (8,) and np.array_equal(a, b)

    def test_batched_draw_equals_sequential(self):
        one = WienerBasis(4, 3).increments(50, 0.02)
        basis = WienerBasis(4, 3)
        seq = np.array([sample_increment(basis, 0.02) for _ in range(50)])
        assert np.array_equal(one, seq)
        assert basis.t == pytest.approx(1.0)
        np.testing.assert_allclose(basis.W, seq.sum(axis=0))

    def test_increment_variance(self):
        dt = 0.01
        dW = WienerBasis(10, 5).increments(10_000, dt)
        assert abs(dW.var() / dt - 1) < 0.03
        assert abs(dW.mean()) < 3 * math.sqrt(dt / dW.size)

    def test_brownian_additivity(self):
        dW = WienerBasis(8, 6).increments(2000 * 100, 0.01).reshape(2000, 100, 8)
        W1 = dW.sum(axis=1)
        assert abs(W1.var() - 1) < 0.05

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            WienerBasis(2, 0).increments(3, 0.0)
        with pytest.raises(ValueError):
            WienerBasis(0, 0)

    def test_path_seeds(self):
        assert path_seed(7, 3) == path_seed(7, 3)
        seeds = {path_seed(7, i) for i in range(200)}
        assert len(seeds) == 200
        assert path_seed(8, 0) != path_seed(7, 0)

    def test_distinct_paths_uncorrelated(self):
        a = WienerBasis(1, path_seed(1, 0)).increments(20_000, 1.0)[:, 0]
        b = WienerBasis(1, path_seed(1, 1)).increments(20_000, 1.0)[:, 0]
        assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(20_000)


class TestNoiseCoefficient:
    def test_zero_state_gives_zero_columns(self, sigma16, lat16):
        cols = apply_sigma(sigma16, 0.0, SpectralField.zeros(lat16))
        assert cols.is_zero()

    def test_zero_scale(self, lat16):
        s = NoiseCoefficient("linear-convolution", lat16, K=4, eps=0.0)
        u = random_solenoidal(lat16, np.random.default_rng(0))
        assert s.is_zero and not s.columns(0.0, u.coeffs).any()
        assert not s.increment(0.0, u.coeffs, np.ones(4)).any()

    def test_unknown_kind(self, lat16):
        with pytest.raises(ValueError, match="unknown noise kind"):
            NoiseCoefficient("multiplicative", lat16)
        with pytest.raises(ValueError, match="callable"):
            NoiseCoefficient("user", lat16)

    def test_columns_solenoidal_and_mean_free(self, sigma16, lat16):
        u = random_solenoidal(lat16, np.random.default_rng(1), slope=1.0)
        cols = sigma16.columns(0.0, u.coeffs)
        assert cols.shape == (16, 3) + lat16.shape
        f = SpectralField(lat16, cols)
        assert f.divergence_defect() < 1e-12
        assert f.mean_defect() == 0.0

    def test_shells_partition_modes(self, lat16):
        col = shell_columns(lat16, 5)
        assert col.min() >= 0 and col.max() < 5
        assert np.array_equal(col, np.floor(lat16.kmag + 1e-12).astype(int) % 5)

    def test_increment_matches_columns(self, sigma16, lat16):
        u = random_solenoidal(lat16, np.random.default_rng(2))
        dW = np.random.default_rng(3).standard_normal(16)
        direct = np.einsum("kc...,k->c...", sigma16.columns(0.0, u.coeffs), dW)
        fast = sigma16.increment(0.0, u.coeffs, dW)
        np.testing.assert_allclose(fast, direct, atol=1e-15)
        np.testing.assert_allclose(sigma16.increment(0.0, u.coeffs, dW, solenoidal=True), direct,
                                   atol=1e-14)

    def test_lipschitz_on_random_pairs(self, sigma16, lat16):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(300):
            d = random_solenoidal(lat16, rng, slope=rng.uniform(0, 4), dealiased=False)
            num = math.sqrt(sigma16.hs_norm_sq(0.0, d.coeffs, 0.5))
            worst = max(worst, num / sobolev_norm(d, 0.5))
        assert worst <= 0.7 * (1 + 1e-12)
        assert worst > 0.5  # the calibration is not loose

    def test_calibration_is_cached_and_at_most_one(self):
        assert calibrate_lipschitz(8) is calibrate_lipschitz(8)
        assert 0.9 < calibrate_lipschitz(8) <= 1.0

    def test_user_kind(self, lat16):
        base = random_solenoidal(lat16, np.random.default_rng(5)).coeffs
        s = NoiseCoefficient("user", lat16, K=2,
                             fn=lambda t, c: np.stack([base, 2 * base]))
        dW = np.array([1.0, -0.5])
        assert np.abs(s.increment(0.0, base, dW)).max() < 1e-15


class TestHilbertSchmidt:
    def test_single_column(self, lat16):
        f = random_solenoidal(lat16, np.random.default_rng(6))
        cols = np.zeros((4, 3) + lat16.shape, complex)
        cols[2] = f.coeffs
        assert hs_norm(SpectralField(lat16, cols), 0.5) == pytest.approx(sobolev_norm(f, 0.5), rel=1e-14)

    def test_identical_columns(self, lat16):
        f = random_solenoidal(lat16, np.random.default_rng(7))
        cols = SpectralField(lat16, np.stack([f.coeffs] * 9))
        assert hs_norm(cols, 1.0) == pytest.approx(3 * sobolev_norm(f, 1.0), rel=1e-14)

    def test_double_sum(self, sigma16, lat16):
        u = random_solenoidal(lat16, np.random.default_rng(8), slope=1.0)
        cols = sigma16.columns(0.0, u.coeffs)
        w = lat16.weight * (1 + lat16.k2) ** 0.75
        direct = 0.0
        for k in range(cols.shape[0]):
            for j in range(3):
                direct += float((np.abs(cols[k, j]) ** 2 * w).sum())
        assert hs_norm(SpectralField(lat16, cols), 0.75) ** 2 == pytest.approx(direct, rel=1e-12)
        assert sigma16.hs_norm_sq(0.0, u.coeffs, 0.75) == pytest.approx(direct, rel=1e-12)


class TestItoIsometry:
    def test_zero_operator(self, lat16):
        rep = ito_integral_check(SpectralField.zeros(lat16, (3,)), 1.0, 100)
        assert rep.mean_sq == 0 and rep.expected_sq == 0 and rep.passed

    def test_single_mode_single_column(self):
        lat = lattice(8)
        g = SpectralField.single_mode(lat, (1, 0, 0), 1, 0.5)
        rep = ito_integral_check(SpectralField(lat, g.coeffs[None]), 1.0, 4000, n_steps=50, seed=1)
        assert rep.expected_sq == pytest.approx(2 * 0.25)
        assert rep.passed, rep

    def test_maximal_inequality_constant(self, sigma16, lat16):
        u = random_solenoidal(lat16, np.random.default_rng(9))
        g = SpectralField(lat16, sigma16.columns(0.0, u.coeffs))
        rep = ito_integral_check(g, 2.0, 2000, n_steps=100, seed=2)
        assert rep.passed
        # E sup |M| lies between E|M_T| and Doob's L2 bound 2 (E|M_T|^2)^(1/2)
        assert 0.7 < rep.bdg_constant <= 2.0

    def test_needs_paths(self, lat16):
        with pytest.raises(ValueError):
            ito_integral_check(SpectralField.zeros(lat16, (1,)), 1.0, 10)
