"""Noise coefficients, the stochastic integral and the heat equation ledger.

The noise is linear in the state and Lipschitz with constant eps_sigma.
Driving the heat equation with it, or with additive noise, shows the energy
estimate holding with a constant that does not grow with the horizon.
"""
import math

import numpy as np

from snse.heat import HeatStepPlan, solve_heat, verify_energy_estimate
from snse.noise import NoiseCoefficient, WienerBasis, apply_sigma, hs_norm, ito_integral_check
from snse.spectral import SpectralField, lattice, random_solenoidal, sobolev_norm


def main():
    lat = lattice(16)
    rng = np.random.default_rng(0)
    sigma = NoiseCoefficient("linear-convolution", lat, K=16, eps=0.7)

    u1 = random_solenoidal(lat, rng, slope=2.0)
    u2 = random_solenoidal(lat, rng, slope=3.0)
    cols = apply_sigma(sigma, 0.0, u1 - u2)
    ratio = hs_norm(cols, 0.5) / sobolev_norm(u1 - u2, 0.5)
    print(f"Lipschitz ratio on one random pair: {ratio:.3f} (bound eps_sigma = 0.7)")
    print(f"sigma(0) is zero: {apply_sigma(sigma, 0.0, SpectralField.zeros(lat)).is_zero()}")

    # Ito isometry and the maximal inequality for a frozen operator.
    rep = ito_integral_check(apply_sigma(sigma, 0.0, u1), T=1.0, paths=2000, seed=3)
    print(f"\nE||int g dW||^2 = {rep.mean_sq:.4e} +- {rep.se_sq:.1e}, T ||g||_HS^2 = {rep.expected_sq:.4e}"
          f" (z = {rep.z_score:+.2f})")
    print(f"E sup ||int g dW|| / (T ||g||_HS^2)^(1/2) = {rep.bdg_constant:.3f}")

    # Energy estimate for du = Delta u dt + f dt + G dW, from rest.
    F = 0.3 * random_solenoidal(lat, rng, slope=3.0, norm=1.0).coeffs
    G = np.stack([random_solenoidal(lat, rng, slope=3.0, norm=0.3).coeffs for _ in range(4)])
    paths = 100
    print(f"\nheat equation with constant forcing and additive noise, {paths} paths:")
    fitted = []
    for T in (1.0, 2.0):
        plan = HeatStepPlan(lat, 0.01, T)
        dW = math.sqrt(plan.dt) * rng.standard_normal((paths, plan.n_steps, 4))
        res = solve_heat(
            SpectralField.zeros(lat, (paths,)), lambda t, c: F,
            lambda t, c: np.broadcast_to(G, c.shape[:-4] + G.shape),
            plan, dW, alphas=(0.0,), keep_states=False,
        )
        r = verify_energy_estimate(res.ledgers[0.0], 0.0, min_paths=paths)
        fitted.append(r.ratio)
        print(f"  T={T}: E[lhs] = {r.lhs_mean:.4f}, E[rhs] = {r.rhs_mean:.4f}, "
              f"C = {r.ratio:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]")
    print(f"  relative change of C from T to 2T: {abs(fitted[1] - fitted[0]) / fitted[0]:.1%}")

    # A single noise path is reproducible from its seed alone.
    a = WienerBasis(16, 42).increments(5, 0.01)
    b = WienerBasis(16, 42).increments(5, 0.01)
    print(f"\nsame seed, same increments: {np.array_equal(a, b)}")


if __name__ == "__main__":
    main()
