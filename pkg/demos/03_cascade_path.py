"""One path of the cascade: split the datum, step the levels, check the pieces.

The datum is split into dyadic frequency bands.  Each band evolves as its own
cut-off difference equation driven by the partial sum below it, and the sum
of all levels is a solution of the stochastic Navier-Stokes equations for as
long as no cutoff is active.
"""
import numpy as np

from snse.cascade import CascadeSimulator, monolithic_run, picard_solve, picard_window, reassemble
from snse.harness import RunConfig, build_experiment
from snse.noise import WienerBasis, path_seed
from snse.spectral import SpectralField
from snse.stopping import detect_stops


def main():
    config = RunConfig(T=0.5)
    exp = build_experiment(config)
    dec = exp.decomposition
    print("datum split into bands (radius, ||v_k||_H^1/2, allowed, M_k):")
    for k, R in enumerate(dec.radii):
        print(f"  k={k}: |n| <= {R:<4} {dec.half_norms[k]:.3e}  {dec.bound(k):.3e}  {exp.setup.M[k]:.3e}")
    print(f"reconstruction defect {dec.defect:.1e}")

    n = config.n_steps
    dW = WienerBasis(config.K, path_seed(config.seed, 0)).increments(n, config.dt)
    run = CascadeSimulator(exp.setup, dec.pieces).run(dW, n, keep_states=True)

    Q0 = run.Q0
    print(f"\nafter {n} steps, sup_t Q_k0 / (eps_bar / 2^k) per level:")
    for k in range(4):
        print(f"  k={k}: {Q0[:, k].max() / (config.eps_bar / 2**k):.3f}   min psi {run.series['psi'][:, k].min():.3f}")
    stops = detect_stops(run, exp.thresholds)
    print(f"stopping time: {stops.stop} (inf means no threshold was reached)")

    # While every cutoff equals 1 the levels add up to the uncut solution.
    mono = monolithic_run(exp.datum, exp.setup.plan, exp.setup.noise, dW)
    gap = np.abs(run.states.sum(axis=1) - mono).max() / np.abs(mono).max()
    print(f"\nsum of levels vs one solve of the full equation: relative gap {gap:.1e}")
    _, tele = reassemble(SpectralField(exp.setup.lattice, run.states[-1]))
    print(f"level-by-level nonlinear terms vs the nonlinear term of the sum: {tele.relative:.1e}")

    # Each level is also the fixed point of a contraction on short windows.
    for k in range(3):
        _, rep = picard_solve(picard_window(exp.setup, run, k, 0, 32, dW))
        print(f"Picard on level {k}, 32 steps: {rep.iterations} iterates, "
              f"largest contraction ratio {rep.max_ratio:.3f}")


if __name__ == "__main__":
    main()
