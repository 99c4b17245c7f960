import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmatch.data import TrialDataset
from ecmatch.diagnostics import balance_report, smd, write_report
from ecmatch.matching import optimal_match
from ecmatch.propensity import PropensityModel, fit_propensity
from ecmatch.simulation import Scenario, generate_trial


def _ds(x_rct, x_ec, arms=None):
    x = np.r_[x_rct, x_ec]
    if x.ndim == 1:
        x = x[:, None]
    n, m = len(x_rct), len(x_ec)
    arms = np.arange(n) % 2 if arms is None else arms
    return TrialDataset(
        ids=[f"s{i}" for i in range(n + m)], source=np.r_[np.ones(n, int), np.zeros(m, int)],
        arm=np.r_[arms, np.zeros(m, int)], outcome=np.zeros(n + m), covariates=x,
    )


def test_identical_distributions_zero_smd():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    rep = balance_report(_ds(x, x), PropensityModel(0.0, [0.0]))
    assert rep.covariates[0].smd_before == 0.0


def test_shift_by_one_sd():
    x = np.array([-1.0, 0.0, 1.0, 2.0, 3.0])
    sd = x.std(ddof=1)
    assert smd(x + sd, x) == pytest.approx(1.0, abs=1e-15)


def test_zero_variance():
    assert smd([2.0, 2.0], [2.0, 2.0]) == 0.0
    assert math.isnan(smd([2.0, 2.0], [3.0, 3.0]))
    rep = balance_report(_ds(np.full(4, 2.0), np.full(4, 3.0)), PropensityModel(0.0, [0.0]))
    assert not rep.covariates[0].computable


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_smd_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(0.5, 2, size=30)
    assert smd(a * x + b, a * y + b) == pytest.approx(smd(x, y), rel=1e-7, abs=1e-9)


def test_overlap_flags():
    model = PropensityModel(0.0, [1.0])
    ds = _ds(np.array([0.0, 10.0]), np.array([0.0, 1.0]))
    rep = balance_report(ds, model, eta=0.01)
    assert rep.overlap_violations == 1 and not rep.overlap_ok
    assert balance_report(ds, model, eta=0.00001).overlap_ok


def test_report_ignores_arm_labels(superpop, selection):
    trial = generate_trial(superpop, selection, Scenario(2, 90), np.random.default_rng(0)).dataset
    model = fit_propensity(trial)
    match = optimal_match(trial, model)
    other = TrialDataset(
        ids=trial.ids, source=trial.source, arm=np.where(trial.is_rct, 1 - trial.arm, 0),
        outcome=trial.outcome, covariates=trial.covariates, covariate_names=trial.covariate_names,
    )
    texts = []
    for ds in (trial, other):
        buf = io.StringIO()
        write_report(balance_report(ds, model, match), buf)
        texts.append(buf.getvalue())
    assert texts[0] == texts[1]


def test_matching_improves_balance(superpop, selection):
    # Monte Carlo check on the simulation generator
    improved = 0
    for seed in range(20):
        trial = generate_trial(superpop, selection, Scenario(2, 90), np.random.default_rng(seed)).dataset
        model = fit_propensity(trial)
        rep = balance_report(trial, model, optimal_match(trial, model))
        improved += rep.max_abs_smd_after < rep.max_abs_smd_before
    assert improved == 20
