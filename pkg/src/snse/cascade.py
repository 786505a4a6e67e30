"""Cascade construction of a small-data solution.

The datum u0 is split into frequency pieces v0^(k) of geometrically decaying
size.  Level k solves a cut-off stochastic Navier-Stokes system for the
difference v^(k) = u^(k) - u^(k-1), driven by the partial sum u^(k-1) of the
levels below; summing the levels telescopes back to the full nonlinearity.

All levels advance in lockstep on one time grid with one Brownian path.  Level
arrays have a leading axis of length ``k_max + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heat import HeatStepPlan
from .noise import NoiseCoefficient
from .spectral import (
    ModeLattice,
    SpectralField,
    convective_derivative,
    div_symmetric,
    energy_density,
    norm_sq,
    norms_sq,
    symmetric_product,
    to_physical,
)


def theta(x):
    """Smooth cutoff: 1 on [0, 1], 0 on [2, inf), quintic smoothstep between."""
    s = np.clip(np.asarray(x, float) - 1.0, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


# ---------------------------------------------------------------------------
# Decomposition of the datum
# ---------------------------------------------------------------------------


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DataDecomposition:
    """Pieces v0^(k), k = 0..k_max, stacked along a leading axis."""

    pieces: SpectralField
    radii: tuple  # outer radius of each piece; inf for the last
    eps0: float
    delta: float
    half_norms: np.ndarray  # ||v0^(k)||_{H^{1/2}}
    data_bounds: np.ndarray  # ||v0^(k)||_{H^{1/2+delta}}
    defect: float  # ||u0 - sum_k v0^(k)||_{H^{1/2}}

    @property
    def k_max(self) -> int:
        return len(self.radii) - 1

    def bound(self, k: int) -> float:
        """Size allowed for piece k: 2 eps0 at the bottom, eps0 / 4^k above."""
        return 2 * self.eps0 if k == 0 else self.eps0 / 4**k

    def bounds_hold(self) -> bool:
        return all(self.half_norms[k] <= self.bound(k) for k in range(self.k_max + 1))

    def manifest(self) -> dict:
        return {
            "eps0": self.eps0,
            "delta": self.delta,
            "k_max": self.k_max,
            "radii": [r if math.isfinite(r) else None for r in self.radii],
            "half_norms": self.half_norms.tolist(),
            "data_bounds": self.data_bounds.tolist(),
            "defect": self.defect,
        }


def _tail_norm(lat: ModeLattice, dens: np.ndarray, R: float) -> float:
    w = lat.sobolev_weight(0.5)
    return math.sqrt(float((dens * w)[lat.kmag > R].sum()))


def decompose(u0: SpectralField, eps0: float, delta: float, k_max: int) -> DataDecomposition:
    """Split u0 into dyadic frequency bands with geometrically small tails.

    Candidate band edges are the radii 2^j, j >= 1.  Edge R_k is the smallest
    candidate (not below R_{k-1}) whose H^{1/2} tail |n| > R_k is at most
    eps0 / 4^(k+1); piece k holds the modes R_{k-1} < |n| <= R_k and the last
    piece takes everything beyond R_{k_max - 1}.  The pieces partition the
    modes, so they sum to u0 exactly, and piece k is bounded by the tail
    beyond R_{k-1}.
    """
    if eps0 <= 0:
        raise DecompositionError("eps0 must be positive")
    if k_max < 0:
        raise DecompositionError("k_max must be non-negative")
    lat = u0.lattice
    if u0.divergence_defect() > 1e-10 or u0.mean_defect() > 0:
        raise DecompositionError("datum must be divergence-free and mean-free")
    total = math.sqrt(float(norm_sq(lat, u0.coeffs, 0.5)))
    if total > eps0 * (1 + 1e-12):
        raise DecompositionError(
            f"||u0||_H^1/2 = {total:.6g} exceeds eps0 = {eps0:.6g}"
        )
    dens = energy_density(u0.coeffs)
    r_top = float(lat.kmag[lat.resolved].max())
    candidates = [2.0**j for j in range(1, int(math.ceil(math.log2(r_top))) + 1)]
    radii = []
    prev = 0.0
    for k in range(k_max):
        target = eps0 / 4 ** (k + 1)
        R = next(
            (r for r in candidates if r >= prev and _tail_norm(lat, dens, r) <= target),
            candidates[-1],
        )
        radii.append(R)
        prev = R
    radii.append(math.inf)

    pieces = np.zeros((k_max + 1,) + u0.coeffs.shape, complex)
    lower = 0.0
    for k, R in enumerate(radii):
        band = (lat.kmag > lower) & (lat.kmag <= R)
        pieces[k] = u0.coeffs * band
        lower = R
    half = np.sqrt(norm_sq(lat, pieces, 0.5))
    data_bounds = np.sqrt(norm_sq(lat, pieces, 0.5 + delta))
    defect = math.sqrt(float(norm_sq(lat, u0.coeffs - pieces.sum(axis=0), 0.5)))
    dec = DataDecomposition(
        SpectralField(lat, pieces, True), tuple(radii), float(eps0), float(delta),
        half, data_bounds, defect,
    )
    if not dec.bounds_hold():
        raise DecompositionError("piece bounds fail after regrouping; eps0 too small")
    return dec


def dyadic_datum(
    lat: ModeLattice,
    rng: np.random.Generator,
    eps0: float,
    ratio: float = 0.2,
    slope: float = 2.0,
) -> SpectralField:
    """Random divergence-free datum whose dyadic shells shrink geometrically.

    The shell 2^(j-1) < |n| <= 2^j (with |n| <= 2 as the first shell) carries
    H^{1/2} norm proportional to ratio^j; the whole field is scaled to
    ||u0||_{H^{1/2}} = eps0.  Inside each shell amplitudes fall off like
    (1+|n|^2)^(-slope/2).
    """
    from .spectral import random_solenoidal

    base = random_solenoidal(lat, rng, slope=slope).coeffs
    out = np.zeros_like(base)
    lower, j = 0.0, 0
    r_top = float(lat.kmag[lat.resolved].max())
    while lower < r_top:
        upper = 2.0 ** (j + 1)
        band = base * ((lat.kmag > lower) & (lat.kmag <= upper))
        size = math.sqrt(float(norm_sq(lat, band, 0.5)))
        if size > 0:
            out += band * (ratio**j / size)
        lower, j = upper, j + 1
    total = math.sqrt(float(norm_sq(lat, out, 0.5)))
    return SpectralField(lat, out * (eps0 / total), True)


def thresholds(data_bounds, m_factor: float = 8.0) -> np.ndarray:
    """M_k = m_factor * max_{j<=k} data_bound_j; inf while that is zero.

    The running max keeps the sequence non-decreasing, and an empty piece never
    gets a zero threshold.
    """
    running = np.maximum.accumulate(np.asarray(data_bounds, float))
    M = m_factor * running
    return np.where(M > 0, M, np.inf)


# ---------------------------------------------------------------------------
# Cutoffs and one lockstep step
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CascadeSetup:
    """Everything a level needs besides its own state."""

    plan: HeatStepPlan
    noise: NoiseCoefficient
    delta: float
    eps_bar: float
    M: np.ndarray  # thresholds, one per level

    @property
    def lattice(self) -> ModeLattice:
        return self.plan.lattice

    @property
    def n_levels(self) -> int:
        return len(self.M)


@dataclass
class CutoffState:
    """Q_{k,0}, Q_{k,delta} and the cutoff values, one entry per level."""

    Q0: np.ndarray
    Qd: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        """(psi phi)^2, the factor in front of the nonlinearity and noise."""
        return (self.psi * self.phi) ** 2


def cutoff_state(setup: CascadeSetup, levels, norm0, normd, int0, intd) -> CutoffState:
    """Cutoffs for the listed level indices from norms and dissipation integrals."""
    levels = np.asarray(levels)
    Q0 = norm0 + np.sqrt(int0)
    Qd = normd + np.sqrt(intd)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = theta(np.where(np.isfinite(setup.M[levels]), Qd / setup.M[levels], 0.0))
        phi = theta(2.0**levels * Q0 / setup.eps_bar)
    zeta = np.concatenate([[1.0], np.cumprod(psi)[:-1]]) if len(levels) else psi
    return CutoffState(Q0, Qd, psi, phi, zeta)


def level_terms(setup: CascadeSetup, t, v, w, zeta, weight, dW, stacked=False):
    """Forcing and noise increment of the level equations.

    ``v``, ``w`` are stacked level states and the matching partial sums below;
    returns (f, noise) with f = -weight P div(v v + zeta (w v + v w)) and
    noise = weight zeta (sigma(v + w) - sigma(w)) dW.  With ``stacked`` the
    levels are consecutive and w is the running sum of v below each level, so
    it is summed on the grid instead of transformed again.
    """
    lat = setup.lattice
    vp = to_physical(lat, v)
    wp = partial_sums_below(vp) if stacked else to_physical(lat, w)
    z = np.reshape(zeta, (-1, 1, 1, 1, 1))
    # v v + z (w v + v w) = a a - z^2 w w with a = v + z w
    tensor = symmetric_product(vp + z * wp)
    tensor -= (z * z) * symmetric_product(wp)
    wt = np.reshape(weight, (-1, 1, 1, 1, 1))
    f = div_symmetric(lat, tensor)
    f *= -wt
    if setup.noise.is_zero or dW is None:
        return f, None
    if setup.noise.is_linear:
        nz = setup.noise.increment(t, v, dW, solenoidal=True)
    else:
        if w is None:
            w = partial_sums_below(v)
        nz = setup.noise.increment(t, v + w, dW) - setup.noise.increment(t, w, dW)
    return f, (wt * z) * nz


def partial_sums_below(v: np.ndarray) -> np.ndarray:
    """u^(k-1) for each level k (zero for k = 0) from stacked level states."""
    out = np.zeros_like(v)
    np.cumsum(v[:-1], axis=0, out=out[1:])
    return out


@dataclass
class CascadeLevel:
    """Level k with its driving partial sum and accumulators."""

    k: int
    v: SpectralField
    w: SpectralField
    zeta: float
    int0: float = 0.0
    intd: float = 0.0
    t: float = 0.0


def step_level(level: CascadeLevel, setup: CascadeSetup, dW) -> CascadeLevel:
    """Advance a single level one step, with w and zeta held at their current values."""
    lat = setup.lattice
    v, w = level.v.coeffs[None], level.w.coeffs[None]
    k = np.array([level.k])
    d = setup.delta
    cut = cutoff_state(
        setup, k,
        np.sqrt(norm_sq(lat, v, 0.5)), np.sqrt(norm_sq(lat, v, 0.5 + d)),
        np.array([level.int0]), np.array([level.intd]),
    )
    dW_b = None if dW is None else np.asarray(dW)[None]
    f, nz = level_terms(setup, level.t, v, w, np.array([level.zeta]), cut.weight, dW_b)
    rhs = v + setup.plan.dt * f
    if nz is not None:
        rhs = rhs + nz
    new = setup.plan.factor * rhs
    dt = setup.plan.dt
    int0 = level.int0 + 0.5 * dt * float(norm_sq(lat, v, 1.5)[0] + norm_sq(lat, new, 1.5)[0])
    intd = level.intd + 0.5 * dt * float(
        norm_sq(lat, v, 1.5 + d)[0] + norm_sq(lat, new, 1.5 + d)[0]
    )
    return CascadeLevel(
        level.k, SpectralField(lat, new[0], True), level.w, level.zeta, int0, intd,
        level.t + dt,
    )


# ---------------------------------------------------------------------------
# Lockstep simulation of all levels
# ---------------------------------------------------------------------------


SERIES = ("norm0", "normd", "int0", "intd", "psi", "phi", "zeta", "u_half", "u_three_half")


@dataclass
class CascadeRun:
    """Time series of one path; each series has shape (n_saved, n_levels).

    ``norm0``/``normd`` are ||v^(k)||_{H^{1/2}} and ||v^(k)||_{H^{1/2+delta}};
    ``int0``/``intd`` the matching dissipation integrals; ``u_half`` and
    ``u_three_half`` are norms of the partial sums u^(k).
    """

    times: np.ndarray
    series: dict
    states: np.ndarray | None = None  # (n_saved, n_levels, 3, grid) if kept
    probes: dict = field(default_factory=dict)  # step -> level states
    failure: str | None = None
    steps_taken: int = 0

    @property
    def Q0(self):
        return self.series["norm0"] + np.sqrt(self.series["int0"])

    @property
    def Qd(self):
        return self.series["normd"] + np.sqrt(self.series["intd"])


class CascadeSimulator:
    """Advance all cascade levels of one path together.

    Levels whose piece is zero stay zero for all time (every term of their
    equation vanishes at v = 0), so only the active levels are stepped.
    """

    def __init__(self, setup: CascadeSetup, pieces: SpectralField):
        if pieces.coeffs.shape[0] != setup.n_levels:
            raise ValueError("number of pieces must match the number of thresholds")
        self.setup = setup
        self.v = np.array(pieces.coeffs)
        self.active = np.flatnonzero(
            [bool(np.any(self.v[k])) for k in range(setup.n_levels)]
        )
        L = setup.n_levels
        self.int0 = np.zeros(L)
        self.intd = np.zeros(L)
        self.t = 0.0
        self.step_index = 0
        d = setup.delta
        self._alphas = (0.5, 0.5 + d, 1.5, 1.5 + d)
        self._norms = np.zeros((L, 4))
        self._refresh_norms()

    def _refresh_norms(self):
        act = self.active
        if len(act):
            self._norms[act] = norms_sq(self.setup.lattice, self.v[act], self._alphas)

    def cutoffs(self) -> CutoffState:
        n = np.sqrt(self._norms)
        return cutoff_state(
            self.setup, np.arange(self.setup.n_levels), n[:, 0], n[:, 1],
            self.int0, self.intd,
        )

    def snapshot(self) -> dict:
        """Current values of every recorded series."""
        lat = self.setup.lattice
        L = self.setup.n_levels
        cut = self.cutoffs()
        n = np.sqrt(self._norms)
        u_norms = np.zeros((L, 2))
        act = self.active
        if len(act):
            partial = norms_sq(lat, np.cumsum(self.v[act], axis=0), (0.5, 1.5))
            # u^(k) only changes at active levels; carry it forward in between
            idx = np.searchsorted(act, np.arange(L), side="right") - 1
            have = idx >= 0
            u_norms[have] = np.sqrt(partial[idx[have]])
        return {
            "norm0": n[:, 0],
            "normd": n[:, 1],
            "int0": self.int0.copy(),
            "intd": self.intd.copy(),
            "psi": cut.psi,
            "phi": cut.phi,
            "zeta": cut.zeta,
            "u_half": u_norms[:, 0],
            "u_three_half": u_norms[:, 1],
        }

    def step(self, dW) -> CutoffState:
        """One lockstep step; returns the cutoffs used for it."""
        setup = self.setup
        dt = setup.plan.dt
        act = self.active
        cut = self.cutoffs()
        if len(act):
            v = self.v[act]
            dW_b = None if dW is None else np.broadcast_to(dW, (len(act), len(dW)))
            f, nz = level_terms(
                setup, self.t, v, None, cut.zeta[act], cut.weight[act], dW_b, stacked=True
            )
            rhs = v + dt * f
            if nz is not None:
                rhs = rhs + nz
            self.v[act] = setup.plan.factor * rhs
            old = self._norms[:, 2:].copy()
            self._refresh_norms()
            new = self._norms[:, 2:]
            self.int0 = self.int0 + 0.5 * dt * (old[:, 0] + new[:, 0])
            self.intd = self.intd + 0.5 * dt * (old[:, 1] + new[:, 1])
        self.t += dt
        self.step_index += 1
        return cut

    def run(
        self,
        dW: np.ndarray | None,
        n_steps: int,
        save_stride: int = 1,
        keep_states: bool = False,
        probe_steps=(),
        stop_check=None,
    ) -> CascadeRun:
        """Advance ``n_steps`` steps with increments ``dW`` of shape (n_steps, K).

        ``stop_check(step, snapshot)`` may return True to end the run early; it
        sees every step.  Level states at the steps in ``probe_steps`` are
        copied into ``probes``.
        """
        probe_steps = set(int(s) for s in probe_steps)
        snaps = [self.snapshot()]
        times = [self.t]
        states = [self.v.copy()] if keep_states else None
        probes = {}
        if 0 in probe_steps:
            probes[0] = self.v.copy()
        failure = None
        taken = 0
        for i in range(n_steps):
            self.step(None if dW is None else dW[i])
            taken += 1
            if not np.isfinite(self.v).all():
                failure = f"non-finite state at step {self.step_index} (t={self.t:.6g})"
                break
            if self.step_index in probe_steps:
                probes[self.step_index] = self.v.copy()
            last = i + 1 == n_steps
            snap = None
            stop = False
            if stop_check is not None:
                snap = self.snapshot()
                stop = bool(stop_check(self.step_index, snap))
            if last or stop or self.step_index % save_stride == 0:
                snaps.append(snap if snap is not None else self.snapshot())
                times.append(self.t)
                if keep_states:
                    states.append(self.v.copy())
            if stop:
                break
        series = {key: np.array([s[key] for s in snaps]) for key in SERIES}
        return CascadeRun(
            np.array(times), series, None if states is None else np.array(states),
            probes, failure, taken,
        )


# ---------------------------------------------------------------------------
# Reassembly and the telescoping identity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearityIdentityReport:
    residual: float  # ||lhs - rhs||_{L2}
    scale: float  # ||rhs||_{L2}

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else self.residual


def reassemble(levels: SpectralField, k: int | None = None):
    """u^(k) = v^(0) + ... + v^(k), and a check of the telescoping identity.

    The identity sum_j [(v^j.grad) v^j + (u^(j-1).grad) v^j + (v^j.grad) u^(j-1)]
    = (u^(k).grad) u^(k) is evaluated with independent convective products.
    """
    lat = levels.lattice
    v = levels.coeffs
    if k is None:
        k = v.shape[0] - 1
    v = v[: k + 1]
    u = SpectralField(lat, v.sum(axis=0), True)
    lhs = np.zeros((3,) + lat.shape, complex)
    below = np.zeros((3,) + lat.shape, complex)
    for j in range(k + 1):
        vj = SpectralField(lat, v[j])
        uj = SpectralField(lat, below)
        lhs += convective_derivative(vj, vj)
        lhs += convective_derivative(uj, vj)
        lhs += convective_derivative(vj, uj)
        below = below + v[j]
    rhs = convective_derivative(u, u)
    res = math.sqrt(float(norm_sq(lat, lhs - rhs, 0.0)))
    scale = math.sqrt(float(norm_sq(lat, rhs, 0.0)))
    return u, NonlinearityIdentityReport(res, scale)


# ---------------------------------------------------------------------------
# Monolithic reference and weak-form residual
# ---------------------------------------------------------------------------


def navier_stokes_forcing(lat: ModeLattice, u: np.ndarray) -> np.ndarray:
    """-P div(u (x) u), dealiased."""
    return -div_symmetric(lat, symmetric_product(to_physical(lat, u)))


def monolithic_run(u0: SpectralField, plan: HeatStepPlan, noise: NoiseCoefficient, dW):
    """Exponential Euler for the full equation, without any cutoffs.

    Returns the state after every step, shape (n_steps + 1, 3, grid).
    """
    lat = u0.lattice
    u = np.array(u0.coeffs)
    out = [u.copy()]
    for i in range(plan.n_steps):
        rhs = u + plan.dt * navier_stokes_forcing(lat, u)
        if dW is not None and not noise.is_zero:
            rhs = rhs + noise.increment(i * plan.dt, u, dW[i])
        u = plan.factor * rhs
        out.append(u.copy())
    return np.array(out)


@dataclass(frozen=True)
class ResidualReport:
    modes: tuple
    defects: np.ndarray  # max over time of |defect| per test mode
    scale: float  # max |coefficient| over the test modes and times

    @property
    def max_defect(self) -> float:
        return float(self.defects.max()) if len(self.defects) else 0.0

    @property
    def relative(self) -> float:
        return self.max_defect / self.scale if self.scale > 0 else self.max_defect


def weak_residual(
    states: np.ndarray,
    dt: float,
    modes,
    dW: np.ndarray | None = None,
    noise: NoiseCoefficient | None = None,
    nonlinear: bool = True,
) -> ResidualReport:
    """Defect of the weak formulation tested against Fourier modes.

    For a test function e^{i n.x} e_j the defect at time t_m is

        u_j(n, t_m) - u_j(n, 0) + |n|^2 sum_{i<m} u_j(n, t_i) dt
            - sum_{i<m} F_j(n, t_i) dt - sum_{i<m} sigma_j(n, t_i) dW_i,

    with F = -P div(u (x) u) (omitted if ``nonlinear`` is False) and left-point
    (Ito) sums throughout.  ``modes`` lists ((nx, ny, nz), j) with nz >= 0.
    """
    from .spectral import lattice

    states = np.asarray(states)
    N = states.shape[-3]
    lat = lattice(N)
    n_steps = states.shape[0] - 1
    stochastic = noise is not None and not noise.is_zero
    if stochastic and (dW is None or len(dW) < n_steps):
        raise ValueError("Brownian increments are required for a stochastic residual")
    modes = tuple((tuple(int(x) for x in n), int(j)) for n, j in modes)
    idx = []
    for n, j in modes:
        if n[2] < 0:
            raise ValueError("test modes must have n_z >= 0 (use the conjugate)")
        idx.append((j, n[0] % N, n[1] % N, n[2]))
    sel = tuple(np.array(x) for x in zip(*idx)) if idx else None
    if sel is None:
        return ResidualReport(modes, np.zeros(0), 0.0)
    k2 = lat.k2[sel[1:]]
    coeff = states[(slice(None),) + sel]  # (n_steps+1, n_modes)
    drift = -k2 * coeff[:-1]
    if nonlinear:
        F = np.array([navier_stokes_forcing(lat, states[i])[sel] for i in range(n_steps)])
        drift = drift + F
    incr = drift * dt
    if stochastic:
        incr = incr + np.array(
            [noise.increment(i * dt, states[i], dW[i])[sel] for i in range(n_steps)]
        )
    defect = coeff[1:] - coeff[0] - np.cumsum(incr, axis=0)
    return ResidualReport(modes, np.abs(defect).max(axis=0), float(np.abs(coeff).max()))


# ---------------------------------------------------------------------------
# Picard iteration on a short window
# ---------------------------------------------------------------------------


class PicardDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PicardWindow:
    """Inputs for iterating one level on [t_start, t_start + n dt].

    ``w`` and ``zeta`` are the partial sum below and the product of lower
    cutoffs at each of the n+1 grid times; ``int0``/``intd`` are the level's
    dissipation integrals accumulated before the window.
    """

    setup: CascadeSetup
    k: int
    v0: np.ndarray
    w: np.ndarray
    zeta: np.ndarray
    dW: np.ndarray | None
    t_start: float = 0.0
    int0: float = 0.0
    intd: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.w.shape[0] - 1


@dataclass(frozen=True)
class ContractionReport:
    iterations: int
    converged: bool
    distances: tuple  # D^(m) = sup ||V||^2_{1/2+d} + int ||V||^2_{3/2+d}, V = v^(m) - v^(m-1)
    ratios: tuple  # D^(m) / D^(m-1) for m >= 2, above the roundoff floor

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0


def _cutoff_series(setup, k, traj, int0, intd):
    """psi, phi along a level trajectory, integrals accumulated from the given start."""
    lat, d, dt = setup.lattice, setup.delta, setup.plan.dt
    n0 = np.sqrt(norm_sq(lat, traj, 0.5))
    nd = np.sqrt(norm_sq(lat, traj, 0.5 + d))
    i0 = int0 + _cumtrapz(norm_sq(lat, traj, 1.5), dt)
    idd = intd + _cumtrapz(norm_sq(lat, traj, 1.5 + d), dt)
    return _psi_phi(setup, k, n0, nd, i0, idd)


def _psi_phi(setup, k, n0, nd, i0, idd):
    M = setup.M[k]
    psi = theta((nd + np.sqrt(idd)) / M) if np.isfinite(M) else np.ones_like(n0)
    phi = theta(2.0**k * (n0 + np.sqrt(i0)) / setup.eps_bar)
    return psi, phi


def _cumtrapz(y, dt):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]))
    return out


def _distance(setup, V):
    lat, d, dt = setup.lattice, setup.delta, setup.plan.dt
    sup = float(norm_sq(lat, V, 0.5 + d).max())
    integral = float(_cumtrapz(norm_sq(lat, V, 1.5 + d), dt)[-1])
    return sup, integral


def picard_solve(
    window: PicardWindow,
    m_max: int = 30,
    tol: float = 1e-10,
    quadrature: str = "etd1",
    floor: float = 1e-24,
):
    """Fixed-point iteration for one level on a window.

    v^(0) is free heat flow from v0.  Iterate m solves the heat equation with
    forcing and noise built from v^(m-1), weighted by
    psi^(m) psi^(m-1) phi^(m) phi^(m-1); the current-iterate cutoffs are
    evaluated causally as the iterate is built.  ``quadrature`` is "etd1"
    (exact integration of the forcing against the semigroup) or "euler" (the
    direct stepper's rule, whose fixed point is the direct trajectory).

    Stops when sqrt(sup) + sqrt(int) of the successive difference is below
    ``tol`` times the size of the iterate.  Ratios are only recorded while the
    previous distance exceeds ``floor`` times the squared iterate size, so
    roundoff-level differences do not masquerade as growth.  Raises
    :class:`PicardDivergenceError` after three consecutive ratios >= 1.
    """
    setup = window.setup
    lat, dt, k = setup.lattice, setup.plan.dt, window.k
    n = window.n_steps
    E = setup.plan.factor
    if quadrature == "etd1":
        k2 = lat.k2
        phi1 = np.where(k2 > 0, -np.expm1(-k2 * dt) / np.where(k2 > 0, k2, 1.0), dt)
        if setup.plan.scheme != "exponential-euler":
            raise ValueError("etd1 quadrature pairs with the exponential scheme")
    elif quadrature == "euler":
        phi1 = E * dt
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")

    prev = np.empty((n + 1,) + window.v0.shape, complex)
    prev[0] = window.v0
    for i in range(n):
        prev[i + 1] = E * prev[i]
    psi_p, phi_p = _cutoff_series(setup, k, prev, window.int0, window.intd)

    distances, ratios = [], []
    consecutive = 0
    converged = False
    m = 0
    for m in range(1, m_max + 1):
        # unweighted forcing and noise from the previous iterate, all times at once
        f, nz = level_terms(
            setup, window.t_start, prev[:n], window.w[:n], window.zeta[:n],
            np.ones(n), window.dW[:n] if window.dW is not None else None,
        )
        cur = np.empty_like(prev)
        cur[0] = window.v0
        i0, idd = window.int0, window.intd
        d0_prev = float(norm_sq(lat, cur[0], 1.5))
        dd_prev = float(norm_sq(lat, cur[0], 1.5 + setup.delta))
        for i in range(n):
            n0 = math.sqrt(float(norm_sq(lat, cur[i], 0.5)))
            nd = math.sqrt(float(norm_sq(lat, cur[i], 0.5 + setup.delta)))
            psi_c, phi_c = _psi_phi(setup, k, n0, nd, i0, idd)
            c = float(psi_c * psi_p[i] * phi_c * phi_p[i])
            step = phi1 * f[i]
            if nz is not None:
                step = step + E * nz[i]
            cur[i + 1] = E * cur[i] + c * step
            d0_new = float(norm_sq(lat, cur[i + 1], 1.5))
            dd_new = float(norm_sq(lat, cur[i + 1], 1.5 + setup.delta))
            i0 += 0.5 * dt * (d0_prev + d0_new)
            idd += 0.5 * dt * (dd_prev + dd_new)
            d0_prev, dd_prev = d0_new, dd_new
        sup, integral = _distance(setup, cur - prev)
        D = sup + integral
        distances.append(D)
        size_sup, size_int = _distance(setup, cur)
        scale = math.sqrt(size_sup) + math.sqrt(size_int)
        if m >= 2 and distances[-2] > floor * scale * scale:
            r = D / distances[-2]
            ratios.append(r)
            consecutive = consecutive + 1 if r >= 1 else 0
            if consecutive >= 3:
                raise PicardDivergenceError(
                    f"level {k}: successive differences grew for 3 iterates (ratio {r:.3g})"
                )
        prev = cur
        psi_p, phi_p = _cutoff_series(setup, k, prev, window.int0, window.intd)
        if math.sqrt(sup) + math.sqrt(integral) <= tol * scale + 1e-300:
            converged = True
            break
    report = ContractionReport(m, converged, tuple(distances), tuple(ratios))
    return prev, report


def picard_window(
    setup: CascadeSetup, run: CascadeRun, k: int, start: int, length: int, dW
) -> PicardWindow:
    """Window inputs for level k taken from a run made with ``keep_states=True``."""
    if run.states is None:
        raise ValueError("the run must keep its states to extract a window")
    states = run.states[start : start + length + 1]
    if states.shape[0] < length + 1:
        raise ValueError("window extends past the end of the run")
    w = states[:, :k].sum(axis=1) if k > 0 else np.zeros_like(states[:, 0])
    return PicardWindow(
        setup,
        k,
        states[0, k],
        w,
        run.series["zeta"][start : start + length + 1, k],
        None if dW is None else dW[start : start + length],
        float(run.times[start]),
        float(run.series["int0"][start, k]),
        float(run.series["intd"][start, k]),
    )
