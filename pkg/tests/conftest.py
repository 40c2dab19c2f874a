import numpy as np
import pytest

from tfcgc.pipeline import PipelineConfig, SystemFit
from tfcgc.simkit import ScenarioConfig, gen_sim1, gen_sim2


@pytest.fixture(scope="session")
def sim1():
    return gen_sim1()


@pytest.fixture(scope="session")
def sim2():
    return gen_sim2()


@pytest.fixture(scope="session")
def small_sim2():
    """Short sim2 record for fast end-to-end checks."""
    cfg = ScenarioConfig.default("sim2", n_samples=400, n_trials=6, seed=3)
    return gen_sim2(cfg)


@pytest.fixture(scope="session")
def small_urols(small_sim2):
    data, _ = small_sim2
    return SystemFit(data, PipelineConfig(orders=(3, 4), scale=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
