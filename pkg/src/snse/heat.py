"""Stochastic heat equation du = (Lap u + f) dt + g dW on the torus.

Every Fourier mode decouples, so the linear part is integrated exactly and only
the forcing and noise are discretised (first order, Ito: noise enters before
the semigroup factor).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .noise import NoiseCoefficient
from .spectral import ModeLattice, SpectralField, energy_density, norm_sq

SCHEMES = ("exponential-euler", "semi-implicit")


@dataclass(frozen=True, eq=False)
class HeatStepPlan:
    lattice: ModeLattice
    dt: float
    T: float
    scheme: str = "exponential-euler"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        k2 = self.lattice.k2
        if self.scheme == "exponential-euler":
            factor = np.exp(-k2 * self.dt)
        else:
            factor = 1.0 / (1.0 + k2 * self.dt)
        factor.setflags(write=False)
        object.__setattr__(self, "factor", factor)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def stiffness(self) -> float:
        """dt (N/2)^2, the largest exponent the semigroup factor resolves."""
        return self.dt * (self.lattice.N / 2) ** 2

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def step_coeffs(plan: HeatStepPlan, u, f=None, noise=None) -> np.ndarray:
    """factor * (u + dt f + noise) on raw coefficient arrays."""
    rhs = u
    if f is not None:
        rhs = rhs + plan.dt * f
    if noise is not None:
        rhs = rhs + noise
    return plan.factor * rhs


def heat_step(
    u: SpectralField,
    f: SpectralField | None,
    g: SpectralField | None,
    dW: np.ndarray | None,
    plan: HeatStepPlan,
) -> SpectralField:
    """One step of the exponential (or semi-implicit) Euler scheme.

    ``g`` holds the K noise columns (batch axis of length K) and ``dW`` the
    matching Brownian increments.
    """
    lat = u.lattice
    for other in (f, g):
        if other is not None and other.lattice.N != lat.N:
            raise ValueError("lattice mismatch between state and inputs")
    if plan.lattice.N != lat.N:
        raise ValueError("lattice mismatch between state and plan")
    noise = None
    if g is not None:
        if dW is None:
            raise ValueError("noise columns given without increments")
        noise = np.tensordot(np.asarray(dW), g.coeffs, axes=(-1, -5))
    out = step_coeffs(plan, u.coeffs, None if f is None else f.coeffs, noise)
    sol = u.solenoidal and (f is None or f.solenoidal) and (g is None or g.solenoidal)
    return SpectralField(lat, out, sol)


@dataclass
class EnergyLedger:
    """Running budgets of the heat energy estimate at one exponent alpha.

    All quantities are arrays over the batch shape (a float for one path).
    Time integrals use the trapezoid rule on the step grid.
    """

    alpha: float
    initial: np.ndarray = 0.0
    sup: np.ndarray = 0.0
    dissipation: np.ndarray = 0.0
    forcing: np.ndarray = 0.0
    noise: np.ndarray = 0.0
    t: float = 0.0
    _last: tuple = field(default=None, repr=False)

    def start(self, u_sq, diss_sq, f_sq, g_sq):
        """u_sq = ||u||^2_{1/2+a}, diss_sq = ||u||^2_{3/2+a}, f_sq, g_sq: budget densities."""
        self.initial = np.asarray(u_sq, float).copy()
        self.sup = self.initial.copy()
        zero = np.zeros_like(self.initial)
        self.dissipation, self.forcing, self.noise = zero.copy(), zero.copy(), zero.copy()
        self.t = 0.0
        self._last = (diss_sq, f_sq, g_sq)

    def advance(self, dt, u_sq, diss_sq, f_sq, g_sq):
        d0, f0, g0 = self._last
        self.sup = np.maximum(self.sup, u_sq)
        self.dissipation = self.dissipation + 0.5 * dt * (d0 + diss_sq)
        self.forcing = self.forcing + 0.5 * dt * (f0 + f_sq)
        self.noise = self.noise + 0.5 * dt * (g0 + g_sq)
        self.t += dt
        self._last = (diss_sq, f_sq, g_sq)

    @property
    def lhs(self):
        return self.sup - self.initial + self.dissipation

    @property
    def rhs(self):
        return self.forcing + self.noise

    def snapshot(self) -> dict:
        def tolist(x):
            x = np.asarray(x, float)
            return float(x) if x.ndim == 0 else x.tolist()

        return {
            "alpha": self.alpha,
            "t": self.t,
            "sup": tolist(self.sup),
            "dissipation": tolist(self.dissipation),
            "forcing": tolist(self.forcing),
            "noise": tolist(self.noise),
        }


ForcingFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class HeatResult:
    times: np.ndarray
    states: np.ndarray  # (n_saved, *batch, 3, grid)
    ledgers: dict
    failure: str | None = None

    def field(self, i: int) -> SpectralField:
        from .spectral import lattice

        N = self.states.shape[-3]
        return SpectralField(lattice(N), self.states[i])


def _noise_terms(g, t, coeffs, dW, alpha_list, lat):
    """Noise increment and HS-norm densities of g at (t, u)."""
    if g is None:
        return None, {a: 0.0 for a in alpha_list}
    if isinstance(g, NoiseCoefficient):
        inc = g.increment(t, coeffs, dW) if dW is not None else None
        return inc, {a: g.hs_norm_sq(t, coeffs, 0.5 + a) for a in alpha_list}
    cols = np.asarray(g(t, coeffs))
    inc = np.einsum("...kcxyz,...k->...cxyz", cols, dW) if dW is not None else None
    dens = energy_density(cols)
    return inc, {
        a: np.tensordot(dens, lat.sobolev_weight(0.5 + a), axes=3).sum(axis=-1)
        for a in alpha_list
    }


def solve_heat(
    u0: SpectralField,
    f: ForcingFn | None,
    g: NoiseCoefficient | Callable | None,
    plan: HeatStepPlan,
    dW: np.ndarray | None = None,
    alphas=(0.0,),
    save_stride: int = 1,
    keep_states: bool = True,
) -> HeatResult:
    """Integrate over the plan's grid, filling one ledger per alpha.

    ``f(t, coeffs)`` returns forcing coefficients; ``g`` is either a
    :class:`NoiseCoefficient` or ``g(t, coeffs) -> (..., K, 3, grid)``.
    ``dW`` has shape ``batch + (n_steps, K)``.  A non-finite state stops the
    integration and is reported in ``failure``.  With ``keep_states=False``
    only the initial and final states are stored (ensemble ledger runs).
    """
    lat = u0.lattice
    n = plan.n_steps
    if g is not None and dW is None:
        raise ValueError("stochastic run needs Brownian increments")
    if dW is not None and dW.shape[-2] < n:
        raise ValueError(f"need {n} increments, got {dW.shape[-2]}")
    alphas = tuple(float(a) for a in alphas)
    u = np.array(u0.coeffs)
    ledgers = {a: EnergyLedger(a) for a in alphas}

    def densities(t, c, inc_dw):
        fc = f(t, c) if f is not None else None
        inc, gsq = _noise_terms(g, t, c, inc_dw, alphas, lat)
        out = {}
        for a in alphas:
            fsq = norm_sq(lat, fc, a - 0.5) if fc is not None else 0.0
            out[a] = (norm_sq(lat, c, 0.5 + a), norm_sq(lat, c, 1.5 + a), fsq, gsq[a])
        return fc, inc, out

    def increment(i):
        return None if dW is None else dW[..., i, :]

    fc, inc, dens = densities(0.0, u, increment(0))
    for a in alphas:
        ledgers[a].start(*dens[a])
    times, states = [0.0], [u.copy()]
    failure = None
    for i in range(n):
        t = i * plan.dt
        u = step_coeffs(plan, u, fc, inc)
        if not np.isfinite(u).all():
            failure = f"non-finite state at step {i + 1} (t={t + plan.dt:.6g})"
            break
        t_new = (i + 1) * plan.dt
        fc, inc, dens = densities(t_new, u, increment(i + 1) if i + 1 < n else None)
        for a in alphas:
            ledgers[a].advance(plan.dt, *dens[a])
        if i + 1 == n or (keep_states and (i + 1) % save_stride == 0):
            times.append(t_new)
            states.append(u.copy())
    return HeatResult(np.array(times), np.array(states), ledgers, failure)


def trajectory_records(result: HeatResult, delta: float, ledger_alpha: float = 0.0):
    """One JSON-ready dict per saved step: time, three norms, ledger snapshot.

    The ledger snapshot is the final one; intermediate ledgers are not kept.
    """
    from .spectral import lattice

    lat = lattice(result.states.shape[-3])
    snap = result.ledgers[ledger_alpha].snapshot()
    out = []
    for t, c in zip(result.times, result.states):
        out.append(
            {
                "t": float(t),
                "h_half": float(np.sqrt(norm_sq(lat, c, 0.5))),
                "h_half_delta": float(np.sqrt(norm_sq(lat, c, 0.5 + delta))),
                "h_three_half": float(np.sqrt(norm_sq(lat, c, 1.5))),
                "ledger": snap,
            }
        )
    return out


# ---------------------------------------------------------------------------
# Verification helpers
# ---------------------------------------------------------------------------


def energy_identity_defect(
    u0: SpectralField, f: ForcingFn | None, plan: HeatStepPlan
) -> float:
    """|u(T)|^2 + 2 int |grad u|^2 - |u0|^2 - 2 int <f, u> for a deterministic run.

    Norms are homogeneous L2 (the mean is zero); integrals use the trapezoid rule.
    """
    lat = u0.lattice
    wgrad = lat.weight * lat.k2
    u = np.array(u0.coeffs)

    def grad_sq(c):
        return float(np.tensordot(energy_density(c), wgrad, axes=3))

    def pair(t, c):
        if f is None:
            return 0.0, None
        fc = f(t, c)
        return float(np.tensordot((np.conj(fc) * c).real.sum(axis=0), lat.weight, axes=3)), fc

    e0 = norm_sq(lat, u, 0.0)
    g_prev = grad_sq(u)
    p_prev, fc = pair(0.0, u)
    diss = work = 0.0
    for i in range(plan.n_steps):
        u = step_coeffs(plan, u, fc)
        g_new = grad_sq(u)
        p_new, fc = pair((i + 1) * plan.dt, u)
        diss += 0.5 * plan.dt * (g_prev + g_new)
        work += 0.5 * plan.dt * (p_prev + p_new)
        g_prev, p_prev = g_new, p_new
    return float(norm_sq(lat, u, 0.0) + 2 * diss - e0 - 2 * work)


@dataclass(frozen=True)
class EstimateReport:
    """Ensemble ratio E[lhs]/E[rhs] of the heat energy estimate."""

    alpha: float
    paths: int
    lhs_mean: float
    rhs_mean: float
    ratio: float
    ci_low: float
    ci_high: float
    C_max: float
    ratio_2T: float | None = None
    stability: float | None = None
    stability_tol: float = 0.25
    inconsistent: bool = False

    @property
    def passed(self) -> bool:
        if self.inconsistent or self.ratio > self.C_max:
            return False
        if self.ratio_2T is not None:
            return self.ratio_2T <= self.C_max and self.stability <= self.stability_tol
        return True


def ratio_of_means(lhs: np.ndarray, rhs: np.ndarray, z: float = 1.96):
    """E[lhs]/E[rhs] with a delta-method confidence interval."""
    lhs, rhs = np.asarray(lhs, float).ravel(), np.asarray(rhs, float).ravel()
    m = lhs.size
    a, b = lhs.mean(), rhs.mean()
    if b == 0:
        return (0.0, 0.0, 0.0) if a == 0 else (math.inf, math.inf, math.inf)
    r = a / b
    if m < 2:
        return r, r, r
    cov = np.cov(lhs, rhs)
    var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / (b * b * m)
    half = z * math.sqrt(max(var, 0.0))
    return r, r - half, r + half


def verify_energy_estimate(
    ledgers: EnergyLedger,
    alpha: float,
    C_max: float = 20.0,
    ledgers_2T: EnergyLedger | None = None,
    stability_tol: float = 0.25,
    min_paths: int = 100,
) -> EstimateReport:
    """Fit C in E[sup|u|^2 - |u0|^2 + int |u|^2] <= C E[int |f|^2 + int |g|^2].

    Norm exponents are 1/2+alpha, 3/2+alpha for the state, alpha-1/2 for f and
    1/2+alpha for g.  ``ledgers`` is a batched ledger over the path axis.  With
    a second ledger at twice the horizon the relative change of the fitted
    constant is reported as ``stability``.
    """
    if ledgers.alpha != alpha:
        raise ValueError(f"ledger is at alpha={ledgers.alpha}, asked for {alpha}")
    lhs, rhs = np.atleast_1d(ledgers.lhs), np.atleast_1d(ledgers.rhs)
    if lhs.size < min_paths:
        raise ValueError(f"need at least {min_paths} paths, got {lhs.size}")
    r, lo, hi = ratio_of_means(lhs, rhs)
    inconsistent = bool(rhs.mean() == 0 and lhs.mean() > 0)
    r2 = stab = None
    if ledgers_2T is not None:
        r2, _, _ = ratio_of_means(ledgers_2T.lhs, ledgers_2T.rhs)
        stab = abs(r2 - r) / r if r > 0 else (0.0 if r2 == 0 else math.inf)
    return EstimateReport(
        alpha, lhs.size, float(lhs.mean()), float(rhs.mean()), r, lo, hi,
        C_max, r2, stab, stability_tol, inconsistent,
    )
