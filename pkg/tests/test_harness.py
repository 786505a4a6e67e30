"""Configs, path records, ensembles and replay."""
import json
import math

import numpy as np
import pytest

from snse import harness
from snse.harness import (
    PathRecord,
    ReplayError,
    RunConfig,
    analyze,
    build_experiment,
    is_subsequence,
    locate_mismatch,
    read_records,
    replay,
    run_ensemble,
    run_path,
    write_records,
)

SMALL = RunConfig(N=8, T=0.1, paths=3, seed=11)


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.N, c.delta, c.dt, c.K, c.k_max) == (16, 0.25, 0.01, 16, 5)
        assert c.eps_bar == 8 * c.eps0 and c.n_steps == 100

    @pytest.mark.parametrize("changes", [
        {"eps_bar": 0.09},  # below 2 eps0
        {"eps_bar": 1.0},
        {"delta": 0.0},
        {"delta": 0.6},
        {"dt": 0.0},
        {"T": 0.105},
        {"N": 7},
        {"m_rule": "double"},
        {"mode": "large"},
        {"noise_kind": "user"},
        {"p0": 1.5},
    ])
    def test_validation(self, changes):
        with pytest.raises(ValueError):
            RunConfig(**changes)

    def test_smallness_can_be_waived(self):
        c = RunConfig(eps0=0.2, eps_bar=0.4, enforce_smallness=False)
        assert c.eps0 == 0.2

    def test_dict_round_trip(self):
        c = RunConfig(eps_sigma=0.3, datum=None, overshoot_constant=0.5)
        d = json.loads(json.dumps(c.to_dict()))
        assert d["schema"] == "snse.config/1"
        assert RunConfig.from_dict(d) == c

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict({"Nx": 16})
        with pytest.raises(ValueError, match="schema"):
            RunConfig.from_dict({"schema": "snse.config/0"})

    def test_toml_and_json_files(self, tmp_path):
        (tmp_path / "a.toml").write_text('N = 8\nT = 0.5\nmode = "fixed-horizon"\n')
        c = RunConfig.load(tmp_path / "a.toml")
        assert (c.N, c.T, c.mode) == (8, 0.5, "fixed-horizon")
        (tmp_path / "a.json").write_text(json.dumps(c.to_dict()))
        assert RunConfig.load(tmp_path / "a.json") == c

    def test_hash_ignores_output_settings(self):
        c = RunConfig()
        assert c.replace(paths=5, save_stride=4).config_hash == c.config_hash
        assert c.replace(seed=1).config_hash != c.config_hash
        assert c.replace(eps_sigma=0.5).config_hash != c.config_hash


class TestExperiment:
    def test_running_max_rule(self):
        exp = build_experiment(RunConfig(N=8))
        bounds = exp.decomposition.data_bounds
        M = np.asarray(exp.setup.M)
        assert np.all(np.diff(M) >= 0) and M[0] == 8 * bounds[0]

    def test_per_level_rule(self):
        exp = build_experiment(RunConfig(m_rule="per-level"))
        b = exp.decomposition.data_bounds
        for k in range(4):
            assert exp.setup.M[k] == pytest.approx(8 * b[k])
        assert math.isinf(exp.setup.M[5])

    def test_datum_file(self, tmp_path):
        from snse.io import save_field

        exp = build_experiment(RunConfig(N=8))
        save_field(tmp_path / "u0.json", exp.datum)
        other = build_experiment(RunConfig(N=8, datum=str(tmp_path / "u0.json")))
        assert np.array_equal(other.datum.coeffs, exp.datum.coeffs)


class TestRunPath:
    def test_deterministic_without_noise(self):
        c = SMALL.replace(eps_sigma=0.0, paths=1)
        a, b = run_path(c, 0), run_path(c, 0)
        assert a.to_json() == b.to_json()

    def test_distinct_paths(self):
        a, b = run_path(SMALL, 0), run_path(SMALL, 1)
        assert a.seed != b.seed and a.increments_sha256 != b.increments_sha256
        assert not np.array_equal(a.series["norm0"], b.series["norm0"])

    def test_record_contents(self):
        c = SMALL.replace(probe_count=4)
        rec = run_path(c, 2)
        assert rec.times.shape == (11,) and np.all(np.diff(rec.times) > 0)
        assert set(rec.series) >= {"norm0", "normd", "int0", "intd", "psi", "phi", "zeta"}
        assert rec.series["norm0"].shape == (11, 6)
        assert len(rec.telescoping) == 4
        assert max(r for _, r in rec.telescoping) <= 1e-10
        assert rec.config_hash == c.config_hash and rec.failure is None

    def test_json_round_trip(self):
        rec = run_path(SMALL, 0)
        back = PathRecord.from_dict(json.loads(rec.to_json()))
        assert back.to_json() == rec.to_json()

    def test_stop_after_tau_with_grace(self):
        c = RunConfig(N=8, eps0=0.05, eps_bar=0.02, enforce_smallness=False,
                      stop_after_tau=True, grace_steps=4, T=0.2)
        rec = run_path(c, 0)
        assert rec.stop == 0.0
        assert rec.steps_taken == 4 and rec.times[-1] == pytest.approx(0.04)

    def test_failure_is_recorded(self, monkeypatch):
        def boom(self, *a, **k):
            raise FloatingPointError("overflow")

        monkeypatch.setattr(harness.CascadeSimulator, "run", boom)
        recs = list(run_ensemble(SMALL.replace(paths=2)))
        assert [r.failure for r in recs] == ["FloatingPointError: overflow"] * 2


class TestEnsemble:
    def test_order_and_worker_independence(self, tmp_path):
        c = SMALL.replace(paths=4)
        write_records(tmp_path / "one.jsonl", c, run_ensemble(c, workers=1))
        write_records(tmp_path / "two.jsonl", c, run_ensemble(c, workers=2))
        assert (tmp_path / "one.jsonl").read_bytes() == (tmp_path / "two.jsonl").read_bytes()
        cfg, recs = read_records(tmp_path / "one.jsonl")
        assert cfg == c and [r.path_id for r in recs] == [0, 1, 2, 3]

    def test_path_count_does_not_reshuffle(self):
        few = list(run_ensemble(SMALL.replace(paths=2)))
        more = list(run_ensemble(SMALL.replace(paths=3)))
        assert [r.to_json() for r in few] == [r.to_json() for r in more[:2]]

    def test_environment_worker_count(self, monkeypatch):
        monkeypatch.setenv(harness.WORKERS_ENV, "3")
        assert harness.worker_count() == 3
        assert harness.worker_count(1) == 1

    def test_read_rejects_other_files(self, tmp_path):
        (tmp_path / "x.jsonl").write_text('{"schema": "other"}\n')
        with pytest.raises(ValueError):
            read_records(tmp_path / "x.jsonl")

    def test_analyze_small_ensemble(self):
        c = SMALL.replace(paths=5, probe_count=2)
        rep = analyze(c, run_ensemble(c))
        checks = rep["checks"]
        assert checks["markov_level0_0"]["status"] == "SKIPPED"
        assert checks["telescoping"]["status"] == "PASS"
        assert rep["passed"] and rep["p_stop"] == 0.0
        json.dumps(rep, allow_nan=False)


class TestReplay:
    def test_bit_exact(self):
        rec = run_path(SMALL, 1)
        assert replay(rec, SMALL).to_json() == rec.to_json()

    def test_tamper_is_located(self):
        rec = run_path(SMALL, 1)
        d = rec.to_dict()
        d["series"]["norm0"][3][0] *= 1 + 1e-12
        where = locate_mismatch(PathRecord.from_dict(d), replay(rec, SMALL))
        assert where == ["series.norm0[3][0]"]

    def test_config_mismatch_refused(self):
        rec = run_path(SMALL, 0)
        with pytest.raises(ReplayError):
            replay(rec, SMALL.replace(eps_sigma=0.1))

    def test_halved_stride_is_supersequence(self):
        c = SMALL.replace(save_stride=4)
        rec = run_path(c, 0)
        fine = replay(rec, c, save_stride=2)
        assert len(fine.times) > len(rec.times)
        assert is_subsequence(rec, fine) and not is_subsequence(fine, rec)
