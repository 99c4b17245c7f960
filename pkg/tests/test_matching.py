import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmatch.matching import (
    InfeasibleMatchError, MatchingError, candidate_columns, content_hash, distance_matrix,
    greedy_match, nc_match, optimal_match, pairs_to_csv, solve_assignment,
)
from ecmatch.propensity import PropensityModel

from conftest import make_dataset
from oracles import brute_force_assignment, subset_dp_assignment

IDENTITY = PropensityModel(0.0, [1.0])


def test_distance_matrix_examples():
    assert distance_matrix([0.0], [0.0]).tolist() == [[0.0]]
    assert distance_matrix([1.0], [3.0]).tolist() == [[2.0]]
    assert distance_matrix([1.0], [3.0], caliper=1.0).tolist() == [[np.inf]]


def test_single_pair():
    ds = make_dataset([0.3], [1.0])
    m = optimal_match(ds, IDENTITY)
    assert m.n_e == 1 and m.pairs[0].ec_id == "e0"
    assert m.total_distance == pytest.approx(0.7)
    assert greedy_match(ds, IDENTITY).total_distance == m.total_distance


def test_four_by_six_against_enumeration():
    rct = [0.1, 0.2, 0.3, 0.4]
    ec = [0.05, 0.15, 0.25, 0.35, 0.9, 0.95]
    m = optimal_match(make_dataset(rct, ec), IDENTITY)
    expected = brute_force_assignment(distance_matrix(rct, ec))
    assert m.total_distance == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.2)


def test_caliper_zero_is_infeasible():
    with pytest.raises(InfeasibleMatchError) as err:
        optimal_match(make_dataset([0.1, 0.2], [0.3, 0.4, 0.5]), IDENTITY, caliper=0.0)
    assert err.value.unmatchable == 2


def test_caliper_partially_infeasible_counts():
    # two RCT subjects compete for the single admissible control
    ds = make_dataset([0.0, 0.01, 5.0], [0.005, 5.0, 9.0])
    with pytest.raises(InfeasibleMatchError) as err:
        optimal_match(ds, IDENTITY, caliper=0.1)
    assert err.value.unmatchable == 1
    ok = optimal_match(ds, IDENTITY, caliper=10.0)
    expected = brute_force_assignment(distance_matrix([0.0, 0.01, 5.0], [0.005, 5.0, 9.0]))
    assert ok.total_distance == pytest.approx(expected, abs=1e-12)


def test_pool_too_small():
    with pytest.raises(InfeasibleMatchError):
        optimal_match(make_dataset([0.1, 0.2], [0.3]), IDENTITY)


def test_crossing_instance_greedy_vs_optimal():
    ds = make_dataset([5.0, 0.0], [4.0, 6.0])
    g = greedy_match(ds, IDENTITY, order="input-order")
    o = optimal_match(ds, IDENTITY)
    assert g.total_distance == pytest.approx(7.0)
    assert o.total_distance == pytest.approx(5.0)
    assert {(p.rct_id, p.ec_id) for p in o.pairs} == {("r0", "e1"), ("r1", "e0")}
    brute = brute_force_assignment(distance_matrix([5.0, 0.0], [4.0, 6.0]))
    assert o.total_distance == pytest.approx(brute)
    ds = make_dataset([0.0, 10.0], [1.0, 9.0])
    assert greedy_match(ds, IDENTITY).total_distance == optimal_match(ds, IDENTITY).total_distance == 2.0


def test_extremity_order():
    ds = make_dataset([5.0, 0.0], [4.0, 6.0])
    g = greedy_match(ds, IDENTITY, order="by-score-extremity")
    assert g.total_distance >= optimal_match(ds, IDENTITY).total_distance


def test_pairs_follow_rct_input_order_and_hash_is_stable():
    ds = make_dataset([0.4, 0.1, 0.3], [0.0, 0.2, 0.35, 0.5])
    m = optimal_match(ds, IDENTITY)
    assert [p.rct_id for p in m.pairs] == ["r0", "r1", "r2"]
    text = pairs_to_csv(m)
    assert text.splitlines()[0] == "rct_id,ec_id,rct_score_logit,ec_score_logit,distance"
    assert content_hash(m) == content_hash(optimal_match(ds, IDENTITY))


def test_tie_break_prefers_lowest_ec_index():
    # both controls equidistant from the single RCT subject
    m = optimal_match(make_dataset([0.0], [1.0, -1.0]), IDENTITY)
    assert m.pairs[0].ec_id == "e0"


def test_candidate_pruning_keeps_an_optimum():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cost = np.abs(rng.normal(size=(5, 1)) - rng.normal(size=(1, 40)))
        cols = candidate_columns(cost)
        full = cost[np.arange(5), solve_assignment(cost)].sum()
        pruned = cost[:, cols][np.arange(5), solve_assignment(cost[:, cols])].sum()
        assert pruned == pytest.approx(full, abs=1e-12)


def test_dp_oracle_agrees_with_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(1, 5))
        cost = np.abs(rng.normal(size=(n, 1)) - rng.normal(size=(1, int(rng.integers(n, 7)))))
        assert subset_dp_assignment(cost) == brute_force_assignment(cost)


# --- property tests ---------------------------------------------------------

@st.composite
def instances(draw, max_n=8, max_m=12):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(n, max_m))
    score = st.floats(-4, 4, allow_nan=False).map(lambda v: round(v, 3))
    return draw(st.lists(score, min_size=n, max_size=n)), draw(st.lists(score, min_size=m, max_size=m))


@settings(max_examples=150, deadline=None)
@given(instances(max_n=6, max_m=9))
def test_optimal_equals_brute_force(inst):
    rct, ec = inst
    m = optimal_match(make_dataset(rct, ec), IDENTITY)
    assert m.total_distance == pytest.approx(brute_force_assignment(distance_matrix(rct, ec)), abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(instances(max_n=15, max_m=40), st.sampled_from(["input-order", "by-score-extremity"]))
def test_greedy_never_beats_optimal_and_no_reuse(inst, order):
    rct, ec = inst
    ds = make_dataset(rct, ec)
    o = optimal_match(ds, IDENTITY)
    g = greedy_match(ds, IDENTITY, order=order)
    assert g.total_distance >= o.total_distance - 1e-9
    for res in (o, g):
        assert res.n_e == ds.n_r
        assert len({p.ec_id for p in res.pairs}) == res.n_e
        assert sorted(p.rct_id for p in res.pairs) == sorted(f"r{i}" for i in range(len(rct)))
        assert res.total_distance == pytest.approx(sum(p.distance for p in res.pairs))
        assert all(p.distance >= 0 for p in res.pairs)


@settings(max_examples=80, deadline=None)
@given(instances(max_n=12, max_m=30), st.randoms(use_true_random=False))
def test_total_distance_permutation_invariant(inst, rnd):
    rct, ec = inst
    base = optimal_match(make_dataset(rct, ec), IDENTITY).total_distance
    rct2, ec2 = rct[:], ec[:]
    rnd.shuffle(rct2)
    rnd.shuffle(ec2)
    assert optimal_match(make_dataset(rct2, ec2), IDENTITY).total_distance == pytest.approx(base, abs=1e-9)


# --- NC matching ------------------------------------------------------------

def _nc_dataset(n1=60, n0=30, m=300, seed=0):
    rng = np.random.default_rng(seed)
    rct = rng.normal(0.5, 1, n1 + n0)
    ec = rng.normal(0, 1, m)
    arms = np.r_[np.ones(n1, int), np.zeros(n0, int)]
    y = rng.normal(size=n1 + n0 + m)
    return make_dataset(rct, ec, arms, y)


def test_nc_single_repetition():
    ds = _nc_dataset()
    nc = nc_match(ds, IDENTITY, 1, np.random.default_rng(3))
    assert nc.J == 1 and len(nc.ec_index[0]) == 30 and nc.distinct_matches == 30
    assert nc.ec_means[0] == pytest.approx(ds.outcome[nc.ec_index[0]].mean())


@pytest.mark.parametrize("J", [2, 3, 5])
def test_nc_distinct_bounds(J):
    ds = _nc_dataset()
    nc = nc_match(ds, IDENTITY, J, np.random.default_rng(J))
    for ec in nc.ec_index:
        assert len(ec) == 30 and len(set(ec.tolist())) == 30
        assert np.all(ds.source[ec] == 0)
    assert 30 <= nc.distinct_matches <= J * 30
    assert nc.head(1).distinct_matches == 30


def test_nc_pigeonhole():
    ds = _nc_dataset(n1=20, n0=8, m=12)
    nc = nc_match(ds, IDENTITY, 1, np.random.default_rng(0))
    assert sorted(nc.ec_index[0].tolist()) == ds.ec_index.tolist()


def test_nc_deterministic_given_seed():
    ds = _nc_dataset()
    a = nc_match(ds, IDENTITY, 3, np.random.default_rng(9))
    b = nc_match(ds, IDENTITY, 3, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.ec_index, b.ec_index))


def test_nc_preconditions():
    with pytest.raises(MatchingError):
        nc_match(_nc_dataset(n1=30, n0=30), IDENTITY, 1, np.random.default_rng(0))
    three_arm = make_dataset([0.0, 0.1, 0.2], [0.0] * 5, rct_arms=[0, 1, 2])
    with pytest.raises(MatchingError):
        nc_match(three_arm, IDENTITY, 1, np.random.default_rng(0))
    with pytest.raises(InfeasibleMatchError):
        nc_match(_nc_dataset(n1=40, n0=10, m=20), IDENTITY, 1, np.random.default_rng(0))
