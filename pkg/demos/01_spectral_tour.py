"""A tour of the Fourier lattice: projection, Sobolev norms, the quadratic term.

Everything lives on the periodic box [0, 2pi)^3 as real-FFT coefficients.
Run with ``python demos/01_spectral_tour.py``.
"""
import numpy as np

from snse.spectral import (
    SpectralField,
    advective_term,
    calibrate_product_constant,
    convective_term,
    inner,
    lambda_power,
    lattice,
    leray_project,
    random_solenoidal,
    sobolev_norm,
)


def taylor_green(lat):
    x = 2 * np.pi * np.arange(lat.N) / lat.N
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    u = np.stack([
        np.sin(X) * np.cos(Y) * np.cos(Z),
        -np.cos(X) * np.sin(Y) * np.cos(Z),
        np.zeros_like(X),
    ])
    return SpectralField.from_physical(lat, u, solenoidal=True)


def main():
    lat = lattice(16)
    rng = np.random.default_rng(1)
    print(f"lattice N={lat.N}: coefficient grid {lat.shape}, "
          f"{int(lat.dealias.sum())} modes kept by the 2/3 rule")

    # Projection removes the gradient part and nothing else.
    f = SpectralField.from_physical(lat, rng.standard_normal((3, 16, 16, 16)))
    Pf = leray_project(f)
    print(f"\nrandom field: divergence {f.divergence_defect():.2e} -> {Pf.divergence_defect():.2e} after projection")
    print(f"projecting twice changes it by {sobolev_norm(leray_project(Pf) - Pf, 0):.1e}")

    # The norm ladder, and the Lambda^beta shift that moves along it.
    u = taylor_green(lat)
    print("\nTaylor-Green vortex (every mode has |n|^2 = 3, so (1+|n|^2)^(a/2) = 2^a):")
    for a in (0.0, 0.5, 1.0, 1.5):
        print(f"  ||u||_H^{a:<3} = {sobolev_norm(u, a):.6f}")
    print(f"  ||Lambda^1 u||_H^0.5 = {sobolev_norm(lambda_power(u, 1.0), 0.5):.6f} (equals the H^1.5 norm)")

    # The quadratic term: divergence form and convective form agree, and it
    # does no work on u.
    w = random_solenoidal(lat, rng, slope=2.0)
    a, b = advective_term(u, w), convective_term(u, w)
    print(f"\ndivergence vs convective form: relative gap {sobolev_norm(a - b, 0) / sobolev_norm(b, 0):.1e}")
    v = random_solenoidal(lat, rng, slope=1.0)
    nl = convective_term(v, v)
    print(f"<P(v.grad v), v> / (|P(v.grad v)| |v|) = {inner(nl, v) / (sobolev_norm(nl, 0) * sobolev_norm(v, 0)):.1e}")

    # The fractional product estimate holds with a lattice constant we can
    # only measure, not derive.
    for alpha in (0.0, 0.25):
        C, ratios = calibrate_product_constant(lat, alpha, n_samples=60, seed=2)
        print(f"product estimate at alpha={alpha}: max ratio {C:.3f} over 60 random pairs "
              f"(median {np.median(ratios):.3f})")


if __name__ == "__main__":
    main()
