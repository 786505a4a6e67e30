"""Heat-equation stepping, ledgers and the energy-estimate fit."""
import math

import numpy as np
import pytest

from snse.heat import (
    EnergyLedger,
    HeatStepPlan,
    energy_identity_defect,
    heat_step,
    ratio_of_means,
    solve_heat,
    trajectory_records,
    verify_energy_estimate,
)
from snse.noise import WienerBasis
from snse.spectral import SpectralField, lattice, random_solenoidal


def ou_variance(amp, k2, dt, T):
    """Continuous-time variance of du = -k2 u dt + amp dW started at 0."""
    return amp**2 * (1 - math.exp(-2 * k2 * T)) / (2 * k2)


def single_mode_columns(lat, amp):
    g = SpectralField.single_mode(lat, (1, 0, 0), 1, amp).coeffs
    return g[None]


class TestPlan:
    def test_validation(self):
        lat = lattice(8)
        with pytest.raises(ValueError):
            HeatStepPlan(lat, 0.0, 1.0)
        with pytest.raises(ValueError):
            HeatStepPlan(lat, 0.1, -1.0)
        with pytest.raises(ValueError, match="scheme"):
            HeatStepPlan(lat, 0.1, 1.0, scheme="crank-nicolson")

    def test_grid(self):
        plan = HeatStepPlan(lattice(8), 0.01, 1.0)
        assert plan.n_steps == 100
        assert plan.times()[-1] == pytest.approx(1.0)
        assert plan.stiffness == pytest.approx(0.16)


class TestHeatStep:
    @pytest.mark.parametrize("scheme,decay", [
        ("exponential-euler", lambda k2, dt: math.exp(-k2 * dt)),
        ("semi-implicit", lambda k2, dt: 1 / (1 + k2 * dt)),
    ])
    @pytest.mark.parametrize("n", [(1, 0, 0), (1, 2, 0), (0, 3, -2)])
    def test_single_mode_decay(self, scheme, decay, n):
        lat = lattice(8)
        dt, m = 0.05, 40
        plan = HeatStepPlan(lat, dt, m * dt, scheme)
        u = SpectralField.single_mode(lat, n, 0, 0.3 - 0.1j)
        u0 = u.coeffs.copy()
        for _ in range(m):
            u = heat_step(u, None, None, None, plan)
        k2 = sum(x * x for x in n)
        np.testing.assert_allclose(u.coeffs, decay(k2, dt) ** m * u0, rtol=1e-13, atol=1e-300)

    def test_steady_state_under_constant_forcing(self):
        lat = lattice(8)
        dt = 0.01
        plan = HeatStepPlan(lat, dt, 30.0)
        f = SpectralField.single_mode(lat, (1, 1, 0), 2, 0.5)
        res = solve_heat(SpectralField.zeros(lat), lambda t, c: f.coeffs, None, plan,
                         keep_states=False)
        # fixed point of u = e^{-k2 dt}(u + dt f)
        k2 = 2.0
        q = math.exp(-k2 * dt)
        exact = dt * q / (1 - q) * f.coeffs
        np.testing.assert_allclose(res.states[-1], exact, atol=1e-12)
        np.testing.assert_allclose(res.states[-1], f.coeffs / k2, rtol=0, atol=0.5 * k2 * dt * 0.5 / k2)

    def test_noise_enters_before_semigroup(self):
        lat = lattice(8)
        plan = HeatStepPlan(lat, 0.1, 0.1)
        g = SpectralField(lat, single_mode_columns(lat, 1.0), True)
        out = heat_step(SpectralField.zeros(lat), None, g, np.array([0.5]), plan)
        np.testing.assert_allclose(out.coeffs, math.exp(-0.1) * 0.5 * g.coeffs[0])

    def test_noise_without_increments(self):
        lat = lattice(8)
        plan = HeatStepPlan(lat, 0.1, 1.0)
        g = SpectralField(lat, single_mode_columns(lat, 1.0), True)
        with pytest.raises(ValueError):
            heat_step(SpectralField.zeros(lat), None, g, None, plan)

    def test_preserves_solenoidal(self):
        lat = lattice(8)
        rng = np.random.default_rng(0)
        plan = HeatStepPlan(lat, 0.1, 1.0)
        u = random_solenoidal(lat, rng)
        f = random_solenoidal(lat, rng)
        out = heat_step(u, f, None, None, plan)
        assert out.solenoidal and out.divergence_defect() < 1e-13 and out.mean_defect() == 0


class TestSolveHeat:
    def test_zero_run(self):
        lat = lattice(8)
        res = solve_heat(SpectralField.zeros(lat), None, None, HeatStepPlan(lat, 0.1, 1.0))
        assert not res.states.any()
        led = res.ledgers[0.0]
        assert (led.sup, led.dissipation, led.forcing, led.noise) == (0, 0, 0, 0)

    def test_stride_and_records(self):
        lat = lattice(8)
        u0 = random_solenoidal(lat, np.random.default_rng(1))
        res = solve_heat(u0, None, None, HeatStepPlan(lat, 0.1, 1.0), save_stride=3)
        np.testing.assert_allclose(res.times, [0, 0.3, 0.6, 0.9, 1.0])
        recs = trajectory_records(res, 0.25)
        assert len(recs) == 5
        assert recs[0]["h_half"] <= recs[0]["h_half_delta"] <= recs[0]["h_three_half"]
        assert all(a["h_half"] >= b["h_half"] for a, b in zip(recs, recs[1:]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failure_recorded(self):
        lat = lattice(8)
        bad = np.full((3,) + lat.shape, np.inf + 0j)
        res = solve_heat(SpectralField.zeros(lat), lambda t, c: bad, None, HeatStepPlan(lat, 0.1, 1.0))
        assert res.failure and "non-finite" in res.failure

    def test_needs_increments(self):
        lat = lattice(8)
        with pytest.raises(ValueError, match="increments"):
            solve_heat(SpectralField.zeros(lat), None, lambda t, c: single_mode_columns(lat, 1.0),
                       HeatStepPlan(lat, 0.1, 1.0))

    def test_deterministic_per_seed(self):
        lat = lattice(8)
        plan = HeatStepPlan(lat, 0.05, 1.0)
        cols = single_mode_columns(lat, 0.3)
        runs = [
            solve_heat(SpectralField.zeros(lat), None, lambda t, c: cols, plan,
                       WienerBasis(1, 9).increments(20, 0.05)).states
            for _ in range(2)
        ]
        assert np.array_equal(*runs)

    def test_ou_variance(self):
        lat = lattice(4)
        amp, dt, T, P = 0.8, 0.005, 1.0, 10_000
        plan = HeatStepPlan(lat, dt, T)
        cols = single_mode_columns(lat, amp)
        dW = WienerBasis(1, 2024).increments(P * plan.n_steps, dt).reshape(P, plan.n_steps, 1)
        u0 = SpectralField.zeros(lat, (P,))
        res = solve_heat(u0, None, lambda t, c: cols, plan, dW, keep_states=False)
        c = res.states[-1][:, 1, 1, 0, 0]
        assert np.abs(c.imag).max() == 0
        x = c.real
        var, se = x.var(), x.var() * math.sqrt(2 / (P - 1))
        assert abs(var - ou_variance(amp, 1.0, dt, T)) <= 3 * se


class TestEnergyIdentity:
    def test_free_decay_is_exact_in_the_limit(self):
        lat = lattice(8)
        u0 = random_solenoidal(lat, np.random.default_rng(3))
        d1 = energy_identity_defect(u0, None, HeatStepPlan(lat, 0.01, 0.5))
        d2 = energy_identity_defect(u0, None, HeatStepPlan(lat, 0.005, 0.5))
        assert abs(d2) < abs(d1)

    def test_defect_halves_with_the_step(self):
        lat = lattice(8)
        f = random_solenoidal(lat, np.random.default_rng(4), norm=1.0).coeffs
        defects = [
            energy_identity_defect(SpectralField.zeros(lat), lambda t, c: f, HeatStepPlan(lat, dt, 1.0))
            for dt in (0.02, 0.01, 0.005)
        ]
        ratios = [b / a for a, b in zip(defects, defects[1:])]
        assert all(0.4 <= r <= 0.6 for r in ratios), ratios


class TestEnergyEstimate:
    def test_ledger_bookkeeping(self):
        led = EnergyLedger(0.0)
        led.start(1.0, 2.0, 0.0, 1.0)
        led.advance(0.5, 0.5, 4.0, 2.0, 1.0)
        assert led.sup == 1.0 and led.dissipation == pytest.approx(1.5)
        assert led.forcing == pytest.approx(0.5) and led.noise == pytest.approx(0.5)
        assert led.lhs == pytest.approx(1.5) and led.rhs == pytest.approx(1.0)
        assert led.snapshot()["t"] == 0.5

    def test_all_zero_ensemble(self):
        led = EnergyLedger(0.0)
        led.start(np.zeros(100), np.zeros(100), np.zeros(100), np.zeros(100))
        rep = verify_energy_estimate(led, 0.0)
        assert rep.ratio == 0 and rep.passed

    def test_deterministic_ensemble_ratio_is_path_count_free(self):
        lat = lattice(8)
        f = random_solenoidal(lat, np.random.default_rng(5), norm=0.3).coeffs
        plan = HeatStepPlan(lat, 0.02, 1.0)
        ratios = []
        for P in (100, 150):
            u0 = SpectralField.zeros(lat, (P,))
            res = solve_heat(u0, lambda t, c: f, None, plan, keep_states=False)
            ratios.append(verify_energy_estimate(res.ledgers[0.0], 0.0).ratio)
        assert ratios[0] == pytest.approx(ratios[1], rel=1e-12)
        assert 0 < ratios[0] < 20

    def test_too_few_paths(self):
        led = EnergyLedger(0.0)
        led.start(np.zeros(5), np.zeros(5), np.zeros(5), np.zeros(5))
        with pytest.raises(ValueError):
            verify_energy_estimate(led, 0.0)
        with pytest.raises(ValueError):
            verify_energy_estimate(led, 0.5)

    def test_ratio_of_means_interval(self):
        rng = np.random.default_rng(6)
        rhs = rng.uniform(1, 2, 4000)
        lhs = 0.5 * rhs + rng.normal(0, 0.05, 4000)
        r, lo, hi = ratio_of_means(lhs, rhs)
        assert lo < 0.5 < hi and hi - lo < 0.01
