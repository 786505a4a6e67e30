"""Shared ensembles for the acceptance suite and the summary it prints.

The ensembles are expensive (the 1000-path default run is about ten minutes
on one core), so each is built once per session.  Set ``SNSE_WORKERS`` to
spread paths over processes; the records do not depend on it.
"""
import pytest

from snse.harness import RunConfig, analyze, run_ensemble

# the default experiment: small noise, four active levels, T = 1
DEFAULT = RunConfig(paths=1000)
# datum as large as eps_bar / 2: level 0 should exceed its threshold often
ADVERSARIAL = RunConfig(eps0=0.2, eps_bar=0.4, enforce_smallness=False, paths=400)
# large noise, where stopping before T is common
FIXED_HORIZON = RunConfig(eps_sigma=2.5, mode="fixed-horizon", paths=300)
# level states stored at random times for the telescoping identity
PROBED = RunConfig(paths=20, probe_count=10)

_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per criterion; printed again at the end."""

    def record(number, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}" + (f"  ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


class Ensemble:
    def __init__(self, config, markov_levels=None):
        self.config = config
        self.records = list(run_ensemble(config))
        self.report = analyze(config, self.records, markov_levels=markov_levels)

    def check(self, name):
        return self.report["checks"][name]


@pytest.fixture(scope="session")
def default_ensemble():
    return Ensemble(DEFAULT)


@pytest.fixture(scope="session")
def adversarial_ensemble():
    return Ensemble(ADVERSARIAL, markov_levels=(0,))


@pytest.fixture(scope="session")
def fixed_horizon_ensemble():
    return Ensemble(FIXED_HORIZON)


@pytest.fixture(scope="session")
def probed_ensemble():
    return Ensemble(PROBED)
