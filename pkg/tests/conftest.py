import numpy as np
import pytest

import phenohybrid.hybrid.model as hybrid_model
from phenohybrid.datagen import ClimateSpec, OracleSpec, gen_dataset
from phenohybrid.mechanistic import MechanisticParams

# every forward pass in the test session asserts the distribution invariants
hybrid_model.CHECK_INVARIANTS = True

UTAH_ORACLE = MechanisticParams(800.0, 6000.0, 5.0)


@pytest.fixture(scope="session")
def climate():
    return ClimateSpec(daily_noise_autocorr=0.8, seed=1)


@pytest.fixture(scope="session")
def small_data(climate):
    """4 locations x 6 years of Utah-oracle seasons with 1-day jitter, 2 varieties."""
    return gen_dataset(climate, OracleSpec("utah", UTAH_ORACLE, 1.0), 4, range(2000, 2006), n_varieties=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request, capsys):
    """Print one PASS/FAIL line for a criterion and fail the test if it did not pass."""

    def report(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
