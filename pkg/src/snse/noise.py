"""Truncated cylindrical Wiener process and multiplicative noise coefficients.

A noise operator evaluated at a state u is a set of K fields (columns), one per
retained Brownian direction.  Columns are stored as a :class:`SpectralField`
with a trailing batch axis of length K, so a single state gives coefficients of
shape ``(K, 3, N, N, N//2+1)``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spectral import ModeLattice, SpectralField, energy_density, lattice, leray

NOISE_KINDS = ("zero", "linear-convolution", "user")


def path_seed(master_seed: int, path_id: int) -> int:
    """Seed of one path, derived so paths are independent of scheduling."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(path_id),))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def path_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class WienerBasis:
    """K independent Brownian motions driven by one counter-based generator."""

    K: int
    seed: int
    t: float = 0.0
    W: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one Brownian direction")
        self._rng = path_generator(self.seed)
        if self.W is None:
            self.W = np.zeros(self.K)

    def increments(self, n_steps: int, dt: float) -> np.ndarray:
        """Draw ``n_steps`` increments at once; identical to repeated single draws."""
        if dt <= 0:
            raise ValueError(f"time step must be positive, got {dt}")
        dW = math.sqrt(dt) * self._rng.standard_normal((n_steps, self.K))
        self.W = self.W + dW.sum(axis=0)
        self.t += n_steps * dt
        return dW


def sample_increment(basis: WienerBasis, dt: float) -> np.ndarray:
    """One increment vector (Delta W_1, ..., Delta W_K), each N(0, dt)."""
    return basis.increments(1, dt)[0]


def gaussian_kernel(lat: ModeLattice) -> np.ndarray:
    """Smoothing multiplier exp(-|n|^2 / N^2)."""
    return np.exp(-lat.k2 / lat.N**2)


def shell_columns(lat: ModeLattice, K: int) -> np.ndarray:
    """Column index of each mode: floor(|n|) mod K, a partition of the lattice."""
    return (np.floor(lat.kmag + 1e-12).astype(int) % K).astype(np.intp)


@functools.lru_cache(maxsize=None)
def calibrate_lipschitz(N: int, n_random: int = 1000, seed: int = 12345) -> float:
    """Largest gain of u -> P(kernel * u) in any H^s norm, by brute force.

    The map is a Fourier multiplier, so the H^s gain does not depend on s.  We
    scan every divergence-free basis direction (two polarizations per mode)
    and then ``n_random`` random difference fields; the max ratio found is the
    normalisation that makes sigma Lipschitz with constant exactly eps.
    """
    lat = lattice(N)
    kern = gaussian_kernel(lat)
    # solenoidal basis directions: the multiplier scales each by kern(n)
    best = float(kern[lat.resolved].max())
    rng = np.random.default_rng(seed)
    shape = (3,) + lat.shape
    for _ in range(n_random):
        d = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * lat.resolved
        out = leray(lat, kern * d)
        num = np.tensordot(energy_density(out), lat.weight, axes=3)
        den = np.tensordot(energy_density(d), lat.weight, axes=3)
        best = max(best, math.sqrt(num / den))
    return best


@dataclass(frozen=True, eq=False)
class NoiseCoefficient:
    """sigma(t, u): a map from states to K noise columns.

    ``linear-convolution`` uses column k = (eps/C) P(kernel * Pi_k u) with Pi_k
    the modes whose radius falls in shell class k (mod K).  ``user`` wraps a
    callable ``fn(t, coeffs) -> (..., K, 3, grid)`` array.
    """

    kind: str
    lattice: ModeLattice
    K: int = 16
    eps: float = 0.0
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")
        if self.eps < 0:
            raise ValueError("noise scale must be non-negative")
        if self.kind == "user" and self.fn is None:
            raise ValueError("user noise needs a callable")
        if self.kind == "linear-convolution":
            object.__setattr__(self, "C_sigma", calibrate_lipschitz(self.lattice.N))
            object.__setattr__(self, "kernel", gaussian_kernel(self.lattice))
            object.__setattr__(self, "column_of", shell_columns(self.lattice, self.K))
        else:
            object.__setattr__(self, "C_sigma", 1.0)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "linear-convolution" and self.eps == 0)

    @property
    def is_linear(self) -> bool:
        return self.kind != "user"

    def _gain(self, coeffs: np.ndarray, solenoidal: bool = False) -> np.ndarray:
        """(eps/C) P(kernel * u): the sum of all linear-convolution columns.

        The kernel is radial, so P commutes with it and can be skipped when u
        is already divergence-free.
        """
        out = coeffs * (self.kernel * (self.eps / self.C_sigma))
        return out if solenoidal else leray(self.lattice, out)

    def columns(self, t: float, coeffs: np.ndarray) -> np.ndarray:
        lat = self.lattice
        batch = coeffs.shape[:-4]
        if self.is_zero:
            return np.zeros(batch + (self.K, 3) + lat.shape, complex)
        if self.kind == "user":
            return np.asarray(self.fn(t, coeffs), dtype=complex)
        g = self._gain(coeffs)
        masks = self.column_of == np.arange(self.K).reshape(-1, 1, 1, 1)
        return np.expand_dims(g, -5) * masks[:, None]

    def increment(
        self, t: float, coeffs: np.ndarray, dW: np.ndarray, solenoidal: bool = False
    ) -> np.ndarray:
        """sum_k sigma_k(t, u) dW_k, with dW of shape ``batch + (K,)``.

        ``solenoidal`` promises that u is divergence-free, which lets the
        linear kind skip its projection.
        """
        if self.is_zero:
            return np.zeros_like(coeffs)
        if self.kind == "user":
            cols = self.columns(t, coeffs)
            return np.einsum("...kcxyz,...k->...cxyz", cols, dW)
        g = self._gain(coeffs, solenoidal)
        scale = np.asarray(dW)[..., self.column_of]
        return g * np.expand_dims(scale, -4)

    def hs_norm_sq(self, t: float, coeffs: np.ndarray, alpha: float):
        """||sigma(t, u)||^2 in the Hilbert-Schmidt norm into H^alpha."""
        w = self.lattice.sobolev_weight(alpha)
        if self.is_zero:
            return np.zeros(coeffs.shape[:-4])
        if self.kind == "user":
            cols = self.columns(t, coeffs)
            return np.tensordot(energy_density(cols), w, axes=3).sum(axis=-1)
        return np.tensordot(energy_density(self._gain(coeffs)), w, axes=3)


def apply_sigma(coef: NoiseCoefficient, t: float, u: SpectralField) -> SpectralField:
    """The K noise columns at state u, as a field batched over the last axis."""
    return SpectralField(coef.lattice, coef.columns(t, u.coeffs), True)


def hs_norm(columns: SpectralField, alpha: float):
    """(sum_k ||column_k||_{H^alpha}^2)^(1/2)."""
    lat = columns.lattice
    per_col = np.tensordot(energy_density(columns.coeffs), lat.sobolev_weight(alpha), axes=3)
    out = np.sqrt(np.sum(per_col, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class IsometryReport:
    paths: int
    T: float
    mean_sq: float
    se_sq: float
    expected_sq: float
    z_score: float
    sup_mean: float
    sup_se: float
    bdg_constant: float

    @property
    def passed(self) -> bool:
        return abs(self.z_score) <= 3.0


def ito_integral_check(
    g: SpectralField, T: float, paths: int, n_steps: int = 200, seed: int = 0
) -> IsometryReport:
    """Monte Carlo check of E||int_0^T g dW||^2 = T ||g||_HS^2 for constant g.

    Also estimates E sup_{s<=T} ||int_0^s g dW||_{L2} and its ratio to
    (T ||g||_HS^2)^(1/2), the constant of the first-moment maximal inequality.
    """
    if paths < 100:
        raise ValueError("at least 100 paths are needed for a meaningful estimate")
    lat = g.lattice
    cols = g.coeffs.reshape((-1, 3) + lat.shape)
    K = cols.shape[0]
    # Gram matrix of the columns in L2: ||sum_k c_k W_k||^2 = W^T G W
    flat = cols.reshape(K, -1)
    wflat = np.broadcast_to(lat.weight, (3,) + lat.shape).reshape(-1)
    gram = ((np.conj(flat) * wflat) @ flat.T).real
    expected = T * float(np.trace(gram))

    rng = path_generator(seed)
    dt = T / n_steps
    W = np.cumsum(math.sqrt(dt) * rng.standard_normal((paths, n_steps, K)), axis=1)
    sq = np.einsum("psk,kl,psl->ps", W, gram, W)
    final = sq[:, -1]
    sup = np.sqrt(np.maximum(sq, 0).max(axis=1))
    mean_sq = float(final.mean())
    se_sq = float(final.std(ddof=1) / math.sqrt(paths))
    if expected == 0 and mean_sq == 0:
        z = 0.0
    else:
        z = (mean_sq - expected) / se_sq if se_sq > 0 else math.inf
    sup_mean = float(sup.mean())
    sup_se = float(sup.std(ddof=1) / math.sqrt(paths))
    bdg = sup_mean / math.sqrt(expected) if expected > 0 else 0.0
    return IsometryReport(paths, T, mean_sq, se_sq, expected, z, sup_mean, sup_se, bdg)
