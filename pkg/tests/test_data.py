import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmatch.data import DataError, Schema, Subject, Source, TrialDataset, load_dataset, save_dataset, summarize


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_file(tmp_path):
    p = write(tmp_path, "id,source,arm,outcome,x1\na,1,1,0.5,1.0\nb,1,0,0.2,2.0\nc,0,,0.1,3.0\n")
    ds = load_dataset(p)
    assert (ds.k, ds.n_r, ds.m_e) == (1, 2, 1)
    assert list(ds.ids) == ["a", "b", "c"]
    assert ds.covariate_names == ("x1",)


def test_ec_with_active_arm_rejected(tmp_path):
    p = write(tmp_path, "id,source,arm,outcome,x1\na,1,1,0.5,1\nb,1,0,0.2,2\nc,0,1,0.1,3\n")
    with pytest.raises(DataError, match="EC arm must be control"):
        load_dataset(p)


def test_desk_sized_file(tmp_path):
    rows = ["id,source,arm,outcome,x1"]
    rows += [f"t{i},1,1,0.0,{i}" for i in range(60)]
    rows += [f"c{i},1,0,0.0,{i}" for i in range(30)]
    rows += [f"e{i},0,0,0.0,{i}" for i in range(900)]
    ds = load_dataset(write(tmp_path, "\n".join(rows) + "\n"))
    assert ds.n_r == 90 and ds.n_a(0) == 30 and ds.n_a(1) == 60 and ds.m_e == 900
    assert list(ds.arm_counts) == [30, 60]


@pytest.mark.parametrize("text, msg", [
    ("id,source,outcome,x1\na,1,0.5,1\n", "missing column"),
    ("id,source,arm,outcome,x1\na,1,1,abc,1\nb,1,0,0,1\n", "non-numeric"),
    ("id,source,arm,outcome,x1\na,1,1,0.5,1\na,1,0,0,1\n", "duplicate"),
    ("id,source,arm,outcome,x1\na,1,2,0.5,1\nb,1,0,0,1\n", "empty arm"),
    ("id,source,arm,outcome,x1\na,1,1,0.5,1\nb,0,0,0,1\n", "empty arm"),
    ("id,source,arm,outcome,x1\na,1,1,,1\nb,1,0,0,1\n", "missing outcome"),
    ("id,source,arm,outcome,x1\na,2,1,0.5,1\nb,1,0,0,1\n", "source"),
])
def test_load_errors(tmp_path, text, msg):
    with pytest.raises(DataError, match=msg):
        load_dataset(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.csv")


def test_schema_mapping_and_blinded(tmp_path):
    text = "pid,grp,trt,y,age,sex,junk\na,1,1,0.5,50,1,9\nb,1,0,0.2,60,0,9\nc,0,,0.1,70,1,9\n"
    ds = load_dataset(write(tmp_path, text), Schema("pid", "grp", "trt", "y", ("age", "sex")))
    assert ds.covariate_names == ("age", "sex")
    assert ds.covariates.shape == (3, 2)
    # blinded load works without the arm column at all
    text = "id,source,outcome,x1\na,1,0.5,1\nb,1,0.2,2\nc,0,0.1,3\n"
    ds = load_dataset(write(tmp_path, text, "b.csv"), blinded=True)
    assert ds.blinded and ds.k == 0 and np.all(ds.arm == 0)


def test_immutable(tmp_path):
    ds = load_dataset(write(tmp_path, "id,source,arm,outcome,x1\na,1,1,0.5,1\nb,1,0,0.2,2\nc,0,0,0.1,3\n"))
    with pytest.raises(ValueError):
        ds.outcome[0] = 3.0


def test_subjects_roundtrip():
    subs = [
        Subject("a", Source.RCT, 1, 0.5, (1.0,)),
        Subject("b", Source.RCT, 0, 0.2, (2.0,)),
        Subject("c", Source.EC, 0, 0.1, (3.0,)),
    ]
    ds = TrialDataset.from_subjects(subs)
    assert list(ds.subjects()) == subs


def test_summarize_means():
    subs = [Subject("a", Source.RCT, 0, 1.0, (0.0,)), Subject("b", Source.RCT, 1, 3.0, (1.0,))]
    rows = {r.group: r for r in summarize(TrialDataset.from_subjects(subs))}
    assert rows["rct_arm_0"].outcome_mean == 1.0
    assert rows["rct"].outcome_mean == 2.0
    subs = [Subject("a", Source.RCT, 0, 0.0, (0.0,)), Subject("b", Source.RCT, 0, 2.0, (0.0,)),
            Subject("c", Source.RCT, 1, 5.0, (0.0,))]
    rows = {r.group: r for r in summarize(TrialDataset.from_subjects(subs))}
    assert rows["rct_arm_0"].outcome_mean == 1.0 and rows["rct_arm_0"].n == 2


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def datasets(draw):
    k = draw(st.integers(1, 3))
    p = draw(st.integers(0, 3))
    arms = list(range(k + 1)) + draw(st.lists(st.integers(0, k), max_size=10))
    m = draw(st.integers(0, 10))
    n = len(arms) + m
    return TrialDataset(
        ids=[f"s{i}" for i in range(n)],
        source=[1] * len(arms) + [0] * m,
        arm=arms + [0] * m,
        outcome=draw(st.lists(finite, min_size=n, max_size=n)),
        covariates=np.array(draw(st.lists(finite, min_size=n * p, max_size=n * p))).reshape(n, p),
    )


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_save_load_roundtrip(tmp_path_factory, ds):
    d = tmp_path_factory.mktemp("rt")
    save_dataset(ds, d / "a.csv")
    back = load_dataset(d / "a.csv")
    save_dataset(back, d / "b.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()
    assert np.array_equal(back.outcome, ds.outcome)
    assert np.array_equal(back.covariates, ds.covariates)
    assert np.array_equal(back.arm, ds.arm) and np.array_equal(back.source, ds.source)


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_summary_counts_match(ds):
    rows = {r.group: r for r in summarize(ds)}
    assert rows["rct"].n == ds.n_r and rows["ec"].n == ds.m_e
    assert sum(rows[f"rct_arm_{a}"].n for a in range(ds.k + 1)) == ds.n_r
    for a in range(ds.k + 1):
        assert rows[f"rct_arm_{a}"].n == ds.n_a(a)
