import numpy as np
import pytest

from ecmatch.data import TrialDataset
from ecmatch.simulation import SelectionModel, default_superpopulation

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(rct_scores, ec_scores, rct_arms=None, outcomes=None) -> TrialDataset:
    """Dataset with one covariate equal to the desired logit score (under the
    identity model intercept 0, slope 1)."""
    rct_scores = np.asarray(rct_scores, float)
    ec_scores = np.asarray(ec_scores, float)
    n, m = rct_scores.size, ec_scores.size
    if rct_arms is None:
        rct_arms = np.arange(n) % 2
        if n == 1:
            rct_arms = np.array([0])
    if outcomes is None:
        outcomes = np.zeros(n + m)
    return TrialDataset(
        ids=[f"r{i}" for i in range(n)] + [f"e{j}" for j in range(m)],
        source=np.r_[np.ones(n, int), np.zeros(m, int)],
        arm=np.r_[rct_arms, np.zeros(m, int)],
        outcome=outcomes,
        covariates=np.r_[rct_scores, ec_scores][:, None],
    )


@pytest.fixture(scope="session")
def superpop():
    return default_superpopulation()


@pytest.fixture(scope="session")
def selection(superpop):
    return SelectionModel.calibrated(superpop)
