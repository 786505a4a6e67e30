"""Run configuration, per-path records, ensembles and replay.

Every path is a pure function of ``(config, path_id)``: its Brownian
increments come from a counter-based generator keyed by the master seed and
the path id, so neither the number of paths nor the worker count changes what
an individual path sees.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .cascade import (
    CascadeSetup,
    CascadeSimulator,
    DataDecomposition,
    decompose,
    dyadic_datum,
    reassemble,
    thresholds,
)
from .heat import HeatStepPlan
from .io import dumps, load_field
from .noise import NOISE_KINDS, NoiseCoefficient, WienerBasis, path_seed
from .spectral import SpectralField, lattice
from .stopping import (
    EnsembleStats,
    StoppingRecord,
    Thresholds,
    detect_stops,
    geometric_grid,
    headline_check,
    level_energy_check,
    markov_bound_check,
    pointwise_control_check,
    positivity_check,
    running_functionals,
)

CONFIG_SCHEMA = "snse.config/1"
RECORD_SCHEMA = "snse.path/1"
HEADER_SCHEMA = "snse.run/1"
REPORT_SCHEMA = "snse.report/1"
WORKERS_ENV = "SNSE_WORKERS"

M_RULES = ("running-max", "per-level")
MODES = ("small-noise", "fixed-horizon")
# fields that change what is written but not what is computed
NON_PHYSICAL = ("paths", "save_stride")


@dataclass(frozen=True)
class RunConfig:
    N: int = 16
    delta: float = 0.25
    dt: float = 0.01
    T: float = 1.0
    K: int = 16
    eps0: float = 0.05
    eps_bar: float = 0.4
    eps_sigma: float = 0.7
    p0: float = 0.1
    k_max: int = 5
    m_rule: str = "running-max"
    m_factor: float = 8.0
    paths: int = 200
    seed: int = 20240601
    mode: str = "small-noise"
    save_stride: int = 1
    noise_kind: str = "linear-convolution"
    data_seed: int = 0
    data_ratio: float = 0.2
    data_slope: float = 2.0
    datum: str | None = None
    stop_after_tau: bool = False
    grace_steps: int = 10
    probe_count: int = 0
    confidence: float = 0.95
    enforce_smallness: bool = True
    overshoot_constant: float | None = None

    def __post_init__(self):
        if self.N < 4 or self.N % 2:
            raise ValueError(f"N must be an even integer >= 4, got {self.N}")
        if not 0 < self.delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 1/2], got {self.delta}")
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        if abs(self.T / self.dt - round(self.T / self.dt)) > 1e-9 * self.T / self.dt:
            raise ValueError("T must be a whole number of steps")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")
        if self.enforce_smallness and not 2 * self.eps0 < self.eps_bar < 1:
            raise ValueError(
                f"eps_bar must lie in (2 eps0, 1) = ({2 * self.eps0}, 1), got {self.eps_bar}"
            )
        if not self.enforce_smallness and not 0 < self.eps_bar:
            raise ValueError("eps_bar must be positive")
        if self.eps_sigma < 0:
            raise ValueError("eps_sigma must be non-negative")
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if self.k_max < 0 or self.K < 1 or self.paths < 1 or self.save_stride < 1:
            raise ValueError("k_max >= 0, K >= 1, paths >= 1 and save_stride >= 1 required")
        if self.m_rule not in M_RULES:
            raise ValueError(f"m_rule must be one of {M_RULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.noise_kind not in ("zero", "linear-convolution"):
            raise ValueError(f"noise_kind must be 'zero' or 'linear-convolution' ({NOISE_KINDS})")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")

    # serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        return cls.from_dict(json.loads(path.read_text()))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in NON_PHYSICAL}
        return hashlib.sha256(dumps(d).encode()).hexdigest()[:16]

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def overshoot(self) -> float:
        return self.eps_bar if self.overshoot_constant is None else self.overshoot_constant


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Experiment:
    config: RunConfig
    datum: SpectralField
    decomposition: DataDecomposition
    setup: CascadeSetup

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.config.eps_bar, tuple(float(m) for m in self.setup.M))


def make_datum(config: RunConfig) -> SpectralField:
    if config.datum:
        f, _ = load_field(config.datum)
        if f.lattice.N != config.N:
            raise ValueError(f"datum has N={f.lattice.N}, config has N={config.N}")
        return f
    rng = np.random.default_rng(config.data_seed)
    return dyadic_datum(lattice(config.N), rng, config.eps0, config.data_ratio, config.data_slope)


@functools.lru_cache(maxsize=8)
def build_experiment(config: RunConfig) -> Experiment:
    """Datum, its decomposition and the shared cascade setup (cached per config)."""
    lat = lattice(config.N)
    datum = make_datum(config)
    dec = decompose(datum, config.eps0, config.delta, config.k_max)
    if config.m_rule == "running-max":
        M = thresholds(dec.data_bounds, config.m_factor)
    else:
        M = config.m_factor * dec.data_bounds
        M = np.where(M > 0, M, np.inf)
    plan = HeatStepPlan(lat, config.dt, config.T)
    noise = NoiseCoefficient(
        config.noise_kind, lat, config.K, config.eps_sigma if config.noise_kind != "zero" else 0.0
    )
    setup = CascadeSetup(plan, noise, config.delta, config.eps_bar, M)
    return Experiment(config, datum, dec, setup)


# ---------------------------------------------------------------------------
# Path records
# ---------------------------------------------------------------------------


def _enc(x: float):
    return x if math.isfinite(x) else None


@dataclass(eq=False)
class PathRecord:
    path_id: int
    seed: int
    config_hash: str
    times: np.ndarray
    series: dict
    stops: StoppingRecord
    telescoping: list  # [(t, relative residual)]
    increments_sha256: str
    steps_taken: int
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema": RECORD_SCHEMA,
            "path_id": self.path_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "times": [float(t) for t in self.times],
            "series": {k: np.asarray(v, float).tolist() for k, v in sorted(self.series.items())},
            "stops": self.stops.to_dict(),
            "telescoping": [[float(t), float(r)] for t, r in self.telescoping],
            "increments_sha256": self.increments_sha256,
            "steps_taken": self.steps_taken,
            "failure": self.failure,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PathRecord":
        if d.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported record schema {d.get('schema')!r}")
        return cls(
            int(d["path_id"]),
            int(d["seed"]),
            d["config_hash"],
            np.asarray(d["times"], float),
            {k: np.asarray(v, float) for k, v in d["series"].items()},
            StoppingRecord.from_dict(d["stops"]),
            [tuple(x) for x in d["telescoping"]],
            d["increments_sha256"],
            int(d["steps_taken"]),
            d.get("failure"),
        )

    @property
    def stop(self) -> float:
        return self.stops.stop


def _probe_steps(config: RunConfig, path_id: int) -> list:
    if config.probe_count <= 0:
        return []
    ss = np.random.SeedSequence(config.seed, spawn_key=(path_id, 1))
    rng = np.random.default_rng(ss)
    n = config.n_steps
    count = min(config.probe_count, n)
    return sorted(int(s) for s in rng.choice(np.arange(1, n + 1), size=count, replace=False))


def _stop_rule(exp: Experiment):
    """Stop ``grace_steps`` after the first threshold crossing."""
    thr = exp.thresholds
    tau_lvl = np.array([thr.tau_level(k) for k in range(len(thr.M))])
    M = np.array(thr.M)
    grace = exp.config.grace_steps
    state = {"hit": None}

    def check(step, snap):
        if state["hit"] is None:
            Q0 = snap["norm0"] + np.sqrt(snap["int0"])
            Qd = snap["normd"] + np.sqrt(snap["intd"])
            if np.any(Q0 >= tau_lvl) or np.any(Qd >= M):
                state["hit"] = step
        return state["hit"] is not None and step >= state["hit"] + grace

    return check


def run_path(config: RunConfig, path_id: int) -> PathRecord:
    """Simulate one path; failures are recorded rather than raised."""
    exp = build_experiment(config)
    seed = path_seed(config.seed, path_id)
    n = config.n_steps
    dW = WienerBasis(config.K, seed).increments(n, config.dt)
    digest = hashlib.sha256(np.ascontiguousarray(dW).tobytes()).hexdigest()
    probes = _probe_steps(config, path_id)
    sim = CascadeSimulator(exp.setup, exp.decomposition.pieces)
    stop_check = _stop_rule(exp) if config.stop_after_tau else None
    if stop_check is not None:
        stop_check(0, sim.snapshot())  # a crossing may already hold at t = 0
    failure = None
    try:
        run = sim.run(
            None if exp.setup.noise.is_zero else dW, n, config.save_stride,
            probe_steps=probes, stop_check=stop_check,
        )
        failure = run.failure
    except Exception as exc:  # recorded, the ensemble carries on
        failure = f"{type(exc).__name__}: {exc}"
        run = None
    if run is None:
        L = exp.setup.n_levels
        times = np.zeros(1)
        series = {k: np.zeros((1, L)) for k in ("norm0", "normd", "int0", "intd", "psi",
                                                 "phi", "zeta", "u_half", "u_three_half")}
        steps = 0
        probes_out = {}
    else:
        times, series, steps, probes_out = run.times, run.series, run.steps_taken, run.probes
    fake = _SeriesView(times, series)
    stops = detect_stops(fake, exp.thresholds)
    tele = []
    lat = exp.setup.lattice
    for step in sorted(probes_out):
        _, rep = reassemble(SpectralField(lat, probes_out[step], True))
        tele.append((step * config.dt, rep.relative))
    return PathRecord(
        path_id, seed, config.config_hash, times, series, stops, tele, digest, steps, failure
    )


@dataclass
class _SeriesView:
    times: np.ndarray
    series: dict


def _job(args):
    config, pid = args
    return run_path(config, pid)


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def run_ensemble(config: RunConfig, workers: int | None = None, path_ids=None):
    """Yield one :class:`PathRecord` per path id, in id order.

    With more than one worker the paths are spread over a process pool; the
    output does not depend on the worker count.
    """
    ids = list(range(config.paths)) if path_ids is None else [int(i) for i in path_ids]
    n_workers = worker_count(workers)
    if n_workers == 1:
        for pid in ids:
            yield run_path(config, pid)
        return
    chunk = max(1, len(ids) // (4 * n_workers))
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        yield from pool.map(_job, [(config, pid) for pid in ids], chunksize=chunk)


def header(config: RunConfig) -> dict:
    return {"schema": HEADER_SCHEMA, "config": config.to_dict(), "config_hash": config.config_hash}


def write_records(path, config: RunConfig, records) -> int:
    """Header line then one record per line; returns the number of records."""
    count = 0
    with open(path, "w") as fh:
        fh.write(dumps(header(config)) + "\n")
        for rec in records:
            fh.write(rec.to_json() + "\n")
            count += 1
    return count


def read_records(path):
    """(config, records) from a file written by :func:`write_records`."""
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    head = json.loads(lines[0])
    if head.get("schema") != HEADER_SCHEMA:
        raise ValueError(f"unsupported run schema {head.get('schema')!r}")
    config = RunConfig.from_dict(head["config"])
    return config, [PathRecord.from_dict(json.loads(line)) for line in lines[1:]]


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


class ReplayError(ValueError):
    pass


def replay(record: PathRecord, config: RunConfig, save_stride: int | None = None) -> PathRecord:
    """Regenerate a record from its path id; refuses a config with another hash."""
    if record.config_hash != config.config_hash:
        raise ReplayError(
            f"record was made with config {record.config_hash}, got {config.config_hash}"
        )
    if save_stride is not None:
        config = config.replace(save_stride=save_stride)
    return run_path(config, record.path_id)


def locate_mismatch(a, b, where: str = "") -> list:
    """Paths (like ``series.norm0[12][3]``) at which two JSON-like values differ."""
    if isinstance(a, PathRecord):
        a = a.to_dict()
    if isinstance(b, PathRecord):
        b = b.to_dict()
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            sub = f"{where}.{key}" if where else key
            if key not in a or key not in b:
                out.append(sub)
            else:
                out.extend(locate_mismatch(a[key], b[key], sub))
    elif isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            out.append(f"{where} (length {len(a)} vs {len(b)})")
        else:
            for i, (x, y) in enumerate(zip(a, b)):
                out.extend(locate_mismatch(x, y, f"{where}[{i}]"))
    elif a != b:
        out.append(where)
    return out


def is_subsequence(coarse: PathRecord, fine: PathRecord) -> bool:
    """Every sample of ``coarse`` appears unchanged in ``fine`` at the same time."""
    pos = {float(t): i for i, t in enumerate(fine.times)}
    for i, t in enumerate(coarse.times):
        j = pos.get(float(t))
        if j is None:
            return False
        for key, arr in coarse.series.items():
            if not np.array_equal(arr[i], fine.series[key][j]):
                return False
    return True


# ---------------------------------------------------------------------------
# Ensemble analysis (the verify report)
# ---------------------------------------------------------------------------


def headline_horizons(config: RunConfig) -> tuple:
    if config.mode == "small-noise":
        return (config.T / 2, config.T)
    return (config.T / 4, config.T / 2, config.T)


def analyze(config: RunConfig, records, markov_levels=None, min_markov_paths: int = 400) -> dict:
    """Run every ensemble check and return a JSON-ready report."""
    exp = build_experiment(config)
    records = list(records)
    failed = [r.path_id for r in records if r.failure]
    good = [r for r in records if not r.failure]
    stops = [r.stop for r in good]
    report = {
        "schema": REPORT_SCHEMA,
        "config_hash": config.config_hash,
        "paths": len(records),
        "failed_paths": failed,
        "checks": {},
    }
    checks = report["checks"]

    def status(ok):
        return "PASS" if ok else "FAIL"

    st = EnsembleStats([r.stops for r in good], config.T, config.p0, config.confidence)
    report["p_stop"] = st.p_stop
    report["censoring"] = st.censoring
    L = exp.setup.n_levels
    levels = range(min(3, L - 1) + 1) if markov_levels is None else markov_levels
    sups0 = np.array([running_functionals(r)[0].max(axis=0) for r in good])
    supsd = np.array([running_functionals(r)[1].max(axis=0) for r in good])
    for k in levels:
        for which in ("0", "delta"):
            name = f"markov_level{k}_{which}"
            if len(good) < min_markov_paths:
                checks[name] = {"status": "SKIPPED", "reason": f"fewer than {min_markov_paths} paths"}
                continue
            thr = exp.thresholds.tau_level(k) if which == "0" else exp.thresholds.M[k]
            sup = sups0[:, k] if which == "0" else supsd[:, k]
            rep = markov_bound_check(st, k, which, sup, thr, min_paths=min_markov_paths)
            checks[name] = {
                "status": status(rep.passed),
                "count": rep.count,
                "frequency": rep.frequency,
                "wilson": [rep.wilson_low, rep.wilson_high],
                "budget": rep.budget,
                "markov_side": _enc(rep.markov_side) if not math.isnan(rep.markov_side) else None,
            }
    checks["union_bound"] = {
        "status": status(all(st.union_bound_holds(k) for k in range(L)))
    }

    pos = positivity_check(stops, geometric_grid(config.T, 6), config.confidence)
    checks["positivity"] = {
        "status": status(pos.passed),
        "t0": list(pos.t0),
        "probabilities": list(pos.probabilities),
        "intercept": pos.intercept,
        "intercept_limit": 2.0 / pos.M,
        "slope": pos.slope,
        "halving": [list(h) for h in pos.halving],
    }

    head = headline_check(
        good, stops, config.eps0, headline_horizons(config), config.mode, config.p0,
    )
    checks["headline"] = {
        "status": status(head.passed),
        "mode": head.mode,
        "horizons": list(head.horizons),
        "constants": list(head.constants),
        "standard_errors": list(head.standard_errors),
        "stability": head.stability,
        "p_stop": head.p_stop,
    }

    pw_levels = tuple(range(min(4, L - 1) + 1))
    pw = pointwise_control_check(good, config.eps_bar, config.dt, pw_levels, config.overshoot)
    checks["pointwise_control"] = {
        "status": status(pw.passed),
        "levels": list(pw.levels),
        "worst_ratio": list(pw.worst_ratio),
        "violations": list(pw.violations),
        "allowance": pw.allowance,
    }

    active = [k for k in range(L) if exp.decomposition.half_norms[k] > 0]
    le = level_energy_check(good, exp.decomposition.half_norms, active)
    # the uniform-in-k energy constant is a small-noise property; large noise
    # inflates the low levels, so in fixed-horizon mode it is only reported
    checks["level_energy"] = {
        "status": status(le.passed) if config.mode == "small-noise" else "INFO",
        "levels": list(le.levels),
        "constants": list(le.constants),
        "spread": le.spread,
    }

    tele = [r for rec in good for _, r in rec.telescoping]
    if tele:
        worst = max(tele)
        checks["telescoping"] = {"status": status(worst <= 1e-10), "worst": worst, "samples": len(tele)}
    report["passed"] = all(c["status"] != "FAIL" for c in checks.values())
    return report
