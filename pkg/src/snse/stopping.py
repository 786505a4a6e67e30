"""Stopping times and Monte Carlo checks of the probability and energy bounds.

A path is anything with ``times`` (1-d array) and ``series`` (dict of arrays of
shape (n_times, n_levels)) holding ``norm0``, ``normd``, ``int0``, ``intd`` and,
for the energy checks, ``u_half`` and ``u_three_half``.  "Never stopped within
the horizon" is ``math.inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

NEVER = math.inf
REQUIRED_SERIES = ("norm0", "normd", "int0", "intd")


def first_crossing(times, values, threshold: float) -> float:
    """First time ``values`` reaches ``threshold``, linear between grid points."""
    values = np.asarray(values, float)
    hit = np.flatnonzero(values >= threshold)
    if hit.size == 0 or not math.isfinite(threshold):
        return NEVER
    i = int(hit[0])
    if i == 0:
        return float(times[0])
    q0, q1 = values[i - 1], values[i]
    t1 = float(times[i])
    return t1 - (q1 - threshold) / (q1 - q0) * (t1 - float(times[i - 1]))


@dataclass(frozen=True)
class Thresholds:
    """tau_k fires at Q_{k,0} >= eps_bar / 2^k and rho_k at Q_{k,delta} >= M_k."""

    eps_bar: float
    M: tuple

    def tau_level(self, k: int) -> float:
        return self.eps_bar / 2**k


@dataclass(frozen=True)
class StoppingRecord:
    tau: tuple  # tau_k per level
    rho: tuple  # rho_k per level
    horizon: float

    @property
    def tau_upto(self) -> tuple:
        """tau^k = min over j <= k of tau_j and rho_j."""
        out, running = [], NEVER
        for t, r in zip(self.tau, self.rho):
            running = min(running, t, r)
            out.append(running)
        return tuple(out)

    @property
    def stop(self) -> float:
        """tau = min over all levels."""
        return min(self.tau_upto) if self.tau else NEVER

    def stopped_before(self, t: float) -> bool:
        return self.stop < t

    def to_dict(self) -> dict:
        def enc(x):
            return [v if math.isfinite(v) else None for v in x]

        return {
            "tau_k": enc(self.tau),
            "rho_k": enc(self.rho),
            "tau_upto": enc(self.tau_upto),
            "tau": self.stop if math.isfinite(self.stop) else None,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StoppingRecord":
        def dec(x):
            return tuple(NEVER if v is None else float(v) for v in x)

        return cls(dec(d["tau_k"]), dec(d["rho_k"]), float(d["horizon"]))


def _series(path, name):
    try:
        return np.asarray(path.series[name], float)
    except (KeyError, AttributeError, TypeError) as exc:
        raise ValueError(f"path record lacks the {name!r} series") from exc


def running_functionals(path):
    """(Q_{k,0}, Q_{k,delta}) arrays of shape (n_times, n_levels)."""
    n0, nd, i0, idd = (_series(path, s) for s in REQUIRED_SERIES)
    return n0 + np.sqrt(i0), nd + np.sqrt(idd)


def detect_stops(path, thresholds: Thresholds) -> StoppingRecord:
    """First crossings of every level threshold along the path."""
    times = np.asarray(path.times, float)
    Q0, Qd = running_functionals(path)
    L = Q0.shape[1]
    if len(thresholds.M) != L:
        raise ValueError(f"{len(thresholds.M)} thresholds for {L} levels")
    tau = tuple(first_crossing(times, Q0[:, k], thresholds.tau_level(k)) for k in range(L))
    rho = tuple(first_crossing(times, Qd[:, k], thresholds.M[k]) for k in range(L))
    return StoppingRecord(tau, rho, float(times[-1]))


# ---------------------------------------------------------------------------
# Binomial confidence intervals and ensemble statistics
# ---------------------------------------------------------------------------


def z_value(confidence: float) -> float:
    return float(stats.norm.ppf(0.5 + confidence / 2))


def wilson(count: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    z = z_value(confidence)
    p = count / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the interval touches 0 (or 1) exactly when nothing (everything) is observed
    lo = 0.0 if count == 0 else max(0.0, centre - half)
    hi = 1.0 if count == n else min(1.0, centre + half)
    return lo, hi


def level_budget(p0: float, k: int) -> float:
    """Probability budget p0 / 2^(2k+2) of level k; the budgets sum to at most p0/3."""
    return p0 / 2 ** (2 * k + 2)


@dataclass
class EnsembleStats:
    """Exceedance frequencies of an ensemble of stopping records before T."""

    records: list
    horizon: float
    p0: float
    confidence: float = 0.95
    exceed0: np.ndarray = field(init=False)
    exceedd: np.ndarray = field(init=False)

    def __post_init__(self):
        T = self.horizon
        self.exceed0 = np.array([[t < T for t in r.tau] for r in self.records], bool)
        self.exceedd = np.array([[t < T for t in r.rho] for r in self.records], bool)

    @property
    def M(self) -> int:
        return len(self.records)

    @property
    def n_levels(self) -> int:
        return self.exceed0.shape[1]

    def frequency(self, k: int, which: str = "0") -> float:
        arr = self.exceed0 if which == "0" else self.exceedd
        return float(arr[:, k].mean())

    def stopped(self) -> np.ndarray:
        return np.array([r.stop < self.horizon for r in self.records], bool)

    @property
    def p_stop(self) -> float:
        return float(self.stopped().mean())

    @property
    def censoring(self) -> float:
        """Fraction of paths never stopped within the horizon."""
        return 1.0 - self.p_stop

    def union_bound_holds(self, k: int) -> bool:
        """P(tau^k < T) <= sum_{j<=k} (freq_j,0 + freq_j,delta), on the empirical measure."""
        T = self.horizon
        lhs = np.mean([r.tau_upto[k] < T for r in self.records])
        rhs = self.exceed0[:, : k + 1].mean(axis=0).sum() + self.exceedd[:, : k + 1].mean(axis=0).sum()
        return bool(lhs <= rhs + 1e-15)


@dataclass(frozen=True)
class BoundReport:
    k: int
    which: str  # "0" for Q_{k,0} against eps_bar/2^k, "delta" for Q_{k,delta} against M_k
    count: int
    M: int
    frequency: float
    wilson_low: float
    wilson_high: float
    budget: float
    markov_side: float  # E[(sup Q)^2] / threshold^2

    @property
    def passed(self) -> bool:
        return self.wilson_high <= self.budget


def markov_bound_check(
    stats_: EnsembleStats,
    k: int,
    which: str = "0",
    sup_Q=None,
    threshold: float | None = None,
    min_paths: int = 400,
) -> BoundReport:
    """Compare the level-k exceedance frequency with its budget p0 / 2^(2k+2).

    PASS when the upper Wilson bound is within budget.  If the per-path
    suprema of Q and the threshold are supplied, the Markov-inequality bound
    E[(sup Q)^2] / threshold^2 implied by the measured second moment is
    recorded alongside.
    """
    if stats_.M < min_paths:
        raise ValueError(f"need at least {min_paths} paths, got {stats_.M}")
    arr = stats_.exceed0 if which == "0" else stats_.exceedd
    count = int(arr[:, k].sum())
    lo, hi = wilson(count, stats_.M, stats_.confidence)
    markov = math.nan
    if sup_Q is not None and threshold is not None and math.isfinite(threshold):
        markov = float(np.mean(np.asarray(sup_Q, float) ** 2) / threshold**2)
    return BoundReport(
        k, which, count, stats_.M, count / stats_.M, lo, hi,
        level_budget(stats_.p0, k), markov,
    )


# ---------------------------------------------------------------------------
# Positivity of the stopping time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PositivityReport:
    t0: tuple
    counts: tuple
    M: int
    probabilities: tuple
    intercept: float
    slope: float
    halving: tuple  # (t0, p(t0/2), p(t0)/2, wilson_low(t0/2), ok)
    confidence: float

    @property
    def intercept_ok(self) -> bool:
        return self.intercept <= 2.0 / self.M

    @property
    def halving_ok(self) -> bool:
        return all(h[-1] for h in self.halving)

    @property
    def passed(self) -> bool:
        return self.intercept_ok and math.isfinite(self.slope) and self.halving_ok


def positivity_check(stops, t0_grid, confidence: float = 0.95) -> PositivityReport:
    """P(tau < t0) against t0: least-squares line and a halving test.

    ``stops`` is a sequence of stopping times (inf for unstopped paths).  The
    fit p(t0) = a + b t0 must pass within 2/M of the origin.  For every grid
    point whose half is also on the grid, p(t0/2) must not be significantly
    above p(t0)/2: the lower Wilson bound at t0/2 may not exceed p(t0)/2.
    """
    taus = np.asarray(stops, float)
    M = taus.size
    grid = np.asarray(sorted(t0_grid), float)
    counts = np.array([(taus < t).sum() for t in grid])
    p = counts / M
    if len(grid) >= 2:
        slope, intercept = np.polyfit(grid, p, 1)
    else:
        slope, intercept = (p[0] / grid[0] if grid[0] > 0 else 0.0), 0.0
    halving = []
    for i, t in enumerate(grid):
        j = np.flatnonzero(np.isclose(grid, t / 2, rtol=1e-9, atol=0))
        if j.size:
            half_count = int(counts[j[0]])
            lo, _ = wilson(half_count, M, confidence)
            ok = lo <= p[i] / 2
            halving.append((float(t), float(p[j[0]]), float(p[i] / 2), lo, bool(ok)))
    return PositivityReport(
        tuple(grid.tolist()), tuple(int(c) for c in counts), M, tuple(p.tolist()),
        float(intercept), float(slope), tuple(halving), confidence,
    )


def geometric_grid(t_max: float, n: int) -> list:
    """t_max, t_max/2, ..., t_max/2^(n-1), ascending."""
    return [t_max / 2**i for i in range(n - 1, -1, -1)]


# ---------------------------------------------------------------------------
# Energy functionals up to the stopping time
# ---------------------------------------------------------------------------


def stopped_energy(times, half, three_half, stop: float, horizon: float) -> float:
    """sup_{t <= s} |u|^2_{1/2} + int_0^s |u|^2_{3/2}, with s = min(stop, horizon).

    The sup runs over grid points up to s; the integral is the trapezoid rule
    with the last partial interval cut at s (linear interpolation).
    """
    times = np.asarray(times, float)
    a = np.asarray(half, float) ** 2
    b = np.asarray(three_half, float) ** 2
    s = min(stop, horizon)
    inside = times <= s + 1e-12
    n = int(inside.sum())
    sup = float(a[:n].max())
    integral = float(np.sum(0.5 * np.diff(times[:n]) * (b[1:n] + b[: n - 1])))
    if n < len(times) and s > times[n - 1]:
        frac = (s - times[n - 1]) / (times[n] - times[n - 1])
        b_s = b[n - 1] + frac * (b[n] - b[n - 1])
        integral += 0.5 * (s - times[n - 1]) * (b[n - 1] + b_s)
    return sup + integral


@dataclass(frozen=True)
class HeadlineReport:
    mode: str
    horizons: tuple
    constants: tuple  # fitted C per horizon
    standard_errors: tuple
    p_stop: float  # P(tau < largest horizon)
    p0: float
    stability: float  # |C(last) - C(first)| / C(first)
    stability_tol: float

    @property
    def monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.constants, self.constants[1:]))

    @property
    def passed(self) -> bool:
        if self.mode == "small-noise":
            return self.stability <= self.stability_tol
        return self.monotone and self.p_stop <= self.p0


def headline_check(
    paths,
    stops,
    eps0: float,
    horizons,
    mode: str = "small-noise",
    p0: float = 0.1,
    stability_tol: float = 0.30,
    level: int = -1,
) -> HeadlineReport:
    """Fit C in E[sup |u|^2_{1/2} + int |u|^2_{3/2}] <= C eps0^2 up to tau at several horizons.

    Small-noise mode checks that C moves by at most ``stability_tol`` between
    the first and last horizon.  Fixed-horizon mode instead requires C to be
    non-decreasing in the horizon and P(tau < T) <= p0.  ``level`` selects the
    partial sum u^(k) (default: the full sum).
    """
    if mode not in ("small-noise", "fixed-horizon"):
        raise ValueError(f"unknown mode {mode!r}")
    horizons = tuple(float(h) for h in horizons)
    values = np.zeros((len(paths), len(horizons)))
    for i, (path, stop) in enumerate(zip(paths, stops)):
        half = np.asarray(path.series["u_half"], float)[:, level]
        three = np.asarray(path.series["u_three_half"], float)[:, level]
        for j, h in enumerate(horizons):
            values[i, j] = stopped_energy(path.times, half, three, stop, h)
    scale = eps0 * eps0
    C = values.mean(axis=0) / scale if scale > 0 else np.zeros(len(horizons))
    se = values.std(axis=0, ddof=1) / math.sqrt(len(paths)) / scale if len(paths) > 1 else np.zeros(len(horizons))
    if C[0] > 0:
        stab = abs(C[-1] - C[0]) / C[0]
    else:
        stab = 0.0 if C[-1] == 0 else math.inf
    p_stop = float(np.mean([s < horizons[-1] for s in stops]))
    return HeadlineReport(
        mode, horizons, tuple(C.tolist()), tuple(np.asarray(se).tolist()), p_stop, p0,
        stab, stability_tol,
    )


# ---------------------------------------------------------------------------
# Pathwise controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointwiseReport:
    levels: tuple
    worst_ratio: tuple  # max over paths of sup_t Q_{k,0} / bound_k
    violations: tuple  # paths with sup_t Q_{k,0} above bound_k + allowance
    allowance: float

    @property
    def passed(self) -> bool:
        return not any(self.violations)


def pointwise_control_check(
    paths, eps_bar: float, dt: float, levels, overshoot_constant: float
) -> PointwiseReport:
    """sup_t Q_{k,0} <= eps_bar / 2^(k-1) + C sqrt(dt) on every path."""
    allowance = overshoot_constant * math.sqrt(dt)
    sups = np.array([running_functionals(p)[0].max(axis=0) for p in paths])
    worst, viol = [], []
    for k in levels:
        bound = eps_bar / 2 ** (k - 1)
        worst.append(float(sups[:, k].max() / bound))
        viol.append(int((sups[:, k] > bound + allowance).sum()))
    return PointwiseReport(tuple(levels), tuple(worst), tuple(viol), allowance)


@dataclass(frozen=True)
class LevelEnergyReport:
    levels: tuple
    constants: tuple  # E[sup |v|^2 + int |v|^2] / E|v0|^2 per level
    spread: float  # max / min constant

    @property
    def passed(self) -> bool:
        return self.spread <= 2.0


def level_energy_check(paths, data_norms, levels, which: str = "0") -> LevelEnergyReport:
    """Per-level ratio E[sup |v^(k)|^2_{1/2+a} + int |v^(k)|^2_{3/2+a}] / |v0^(k)|^2_{1/2+a}.

    ``which`` is "0" (a = 0) or "delta"; ``data_norms`` are the H^{1/2+a} norms
    of the pieces.
    """
    nname, iname = ("norm0", "int0") if which == "0" else ("normd", "intd")
    consts = []
    for k in levels:
        vals = [
            float((np.asarray(p.series[nname])[:, k] ** 2).max() + np.asarray(p.series[iname])[-1, k])
            for p in paths
        ]
        consts.append(float(np.mean(vals)) / float(data_norms[k]) ** 2)
    spread = max(consts) / min(consts) if consts and min(consts) > 0 else math.inf
    return LevelEnergyReport(tuple(levels), tuple(consts), spread)
