import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from magcal.simulator import gen_dataset, gen_scenario, run_rng

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def noiseless_case(seed, n_sets=15, noise=0.0):
    """Scenario plus a dataset whose samples all sit on the true means.

    ``noise`` replaces both covariances (the data stay noiseless) so that
    reconstruction errors can be measured against a tiny reference spread.
    """
    truth = gen_scenario(run_rng(seed, 0, 0))
    if noise:
        truth.accel.Sigma = noise * np.eye(3)
        truth.mag.Sigma = noise * np.eye(3)
    sim = gen_dataset(truth, n_sets, (20, 40), run_rng(seed, 0, 1), noiseless=True)
    return truth, sim


def noisy_case(seed, n_sets=15, count_range=(400, 600)):
    truth = gen_scenario(run_rng(seed, 0, 0))
    sim = gen_dataset(truth, n_sets, count_range, run_rng(seed, 0, 1))
    return truth, sim


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
