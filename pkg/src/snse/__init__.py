"""Stochastic Navier-Stokes on the 3-torus, solved as a cascade of frequency levels.

Modules:

* ``spectral``  Fourier lattice, Sobolev norms, Leray projection, nonlinear terms
* ``noise``     cylindrical Wiener increments and the noise coefficient
* ``heat``      stochastic heat equation stepping and energy ledgers
* ``cascade``   data decomposition, cutoffs, the level system and Picard windows
* ``stopping``  stopping times and ensemble statistics
* ``harness``   configs, path records, ensembles and replay
"""
from .spectral import ModeLattice, SpectralField, lattice
from .noise import NoiseCoefficient, WienerBasis
from .heat import HeatStepPlan, solve_heat
from .cascade import CascadeSetup, CascadeSimulator, decompose
from .stopping import StoppingRecord, detect_stops
from .harness import PathRecord, RunConfig, replay, run_ensemble, run_path

__version__ = "0.1.0"

__all__ = [
    "ModeLattice", "SpectralField", "lattice", "NoiseCoefficient", "WienerBasis",
    "HeatStepPlan", "solve_heat", "CascadeSetup", "CascadeSimulator", "decompose",
    "StoppingRecord", "detect_stops", "PathRecord", "RunConfig", "replay",
    "run_ensemble", "run_path",
]
