"""Dataset construction, validation, and CSV round-trip behavior."""

import numpy as np
import pytest

from vesieve import AnalysisDataset, DataError, Schema, load_dataset, validate, write_dataset
from testutil import random_dataset


def base_arrays(n=8):
    return dict(
        x=np.linspace(0.1, 0.9, n),
        delta=np.array([1, 1, 0, 1, 1, 0, 1, 1]),
        r=np.array([1, 0, 1, 1, 1, 1, 0, 1]),
        v=np.array([1, 0, 0, 2, 1, 0, 0, 2]),
        stratum=np.array([1, 1, 1, 1, 2, 2, 2, 2]),
        z=np.column_stack([np.array([0, 1, 0, 1, 0, 1, 0, 1.0]), np.linspace(0, 1, n)]),
        a=np.array([0.3, 0.7, np.nan, 0.2, 0.9, np.nan, 0.5, 0.1]),
        covariate_names=("z1", "w1"),
        tau=1.0,
        n_causes=2,
        n_strata=2,
    )


def test_valid_dataset_builds():
    ds = AnalysisDataset(**base_arrays())
    assert ds.n == 8
    assert ds.n_covariates == 2
    assert ds.stratum_labels == (1, 2)
    assert list(ds.stratum_rows(2)) == [4, 5, 6, 7]


@pytest.mark.parametrize(
    "field,value,fragment",
    [
        ("x", np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.5]), "horizon"),
        ("delta", np.array([1, 1, 0, 1, 1, 0, 1, 2]), "event indicator"),
        ("r", np.array([1, 0, 0, 1, 1, 1, 0, 1]), "censored"),
        ("v", np.array([1, 0, 0, 2, 1, 0, 0, 3]), "cause in 1"),
        ("v", np.array([1, 2, 0, 2, 1, 0, 0, 2]), "cannot carry a cause"),
        ("stratum", np.array([1, 1, 1, 1, 2, 2, 2, 3]), "stratum"),
    ],
)
def test_invariant_violations_raise(field, value, fragment):
    arrays = base_arrays()
    arrays[field] = value
    with pytest.raises(DataError, match=fragment):
        AnalysisDataset(**arrays)


def test_nonbinary_treatment_rejected():
    arrays = base_arrays()
    arrays["z"] = np.column_stack([np.linspace(0, 2, 8), np.linspace(0, 1, 8)])
    with pytest.raises(DataError, match="first covariate"):
        AnalysisDataset(**arrays)


def test_censored_record_with_cause_rejected():
    arrays = base_arrays()
    v = arrays["v"].copy()
    v[2] = 1  # record 2 is censored
    arrays["v"] = v
    with pytest.raises(DataError):
        AnalysisDataset(**arrays)


def test_csv_round_trip(tmp_path):
    ds = random_dataset(3, n=120)
    path = tmp_path / "data.csv"
    write_dataset(ds, path)
    back = load_dataset(path, covariates=ds.covariate_names, tau=ds.tau)
    np.testing.assert_allclose(back.x, ds.x)
    np.testing.assert_array_equal(back.delta, ds.delta)
    np.testing.assert_array_equal(back.r, ds.r)
    np.testing.assert_array_equal(back.v, ds.v)
    np.testing.assert_array_equal(back.stratum, ds.stratum)
    np.testing.assert_allclose(back.z, ds.z)
    np.testing.assert_allclose(back.a, ds.a, equal_nan=True)


def test_missing_column_named(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,event,z1,w1\n0.5,1,0,0.3\n")
    with pytest.raises(DataError, match="stratum"):
        load_dataset(path, covariates=("z1", "w1"))


def test_cause_known_derived_from_cause_column(tmp_path):
    path = tmp_path / "derived.csv"
    path.write_text(
        "stratum,time,event,cause,z1,w1\n"
        "s1,0.5,1,flu,0,0.1\n"
        "s1,0.6,1,,1,0.2\n"
        "s1,0.7,0,,0,0.3\n"
        "s1,0.8,1,cold,1,0.4\n"
    )
    ds = load_dataset(path, covariates=("z1", "w1"))
    assert list(ds.r) == [1, 0, 1, 1]
    assert list(ds.delta) == [1, 1, 0, 1]
    # labels sorted deterministically; codes contiguous from 1
    assert set(ds.cause_labels) == {"flu", "cold"}
    assert ds.v[0] == ds.cause_labels.index("flu") + 1
    assert ds.v[1] == 0


def test_label_remapping_is_order_insensitive(tmp_path):
    rows = [
        "stratum,time,event,cause,z1,w1",
        "B,0.5,1,2,1,0.0",
        "A,0.4,1,9,0,0.1",
        "B,0.3,0,,1,0.2",
        "A,0.2,1,2,0,0.3",
    ]
    path = tmp_path / "labels.csv"
    path.write_text("\n".join(rows) + "\n")
    ds = load_dataset(path, covariates=("z1", "w1"))
    assert ds.stratum_labels == ("A", "B")
    assert ds.cause_labels == (2, 9)
    assert list(ds.stratum) == [2, 1, 2, 1]
    assert list(ds.v) == [1, 2, 0, 1]


def test_validate_flags_empty_cells_and_constant_covariates():
    ds = random_dataset(11, n=80, n_causes=2, n_strata=2)
    # remove every complete cause-2 event from stratum 1
    v = ds.v.copy()
    v[(ds.stratum == 1) & (ds.v == 2)] = 1
    ds2 = AnalysisDataset(
        x=ds.x, delta=ds.delta, r=ds.r, v=v, stratum=ds.stratum,
        z=ds.z, a=ds.a, covariate_names=ds.covariate_names,
        tau=ds.tau, n_causes=2, n_strata=2,
    )
    rep = validate(ds2)
    assert not rep.ok
    assert any("no complete" in w for w in rep.warnings)

    z = ds.z.copy()
    z[ds.stratum == 1, 0] = 1.0
    ds3 = AnalysisDataset(
        x=ds.x, delta=ds.delta, r=ds.r, v=ds.v, stratum=ds.stratum,
        z=z, a=ds.a, covariate_names=ds.covariate_names,
        tau=ds.tau, n_causes=2, n_strata=2,
    )
    rep3 = validate(ds3)
    assert any("constant" in w for w in rep3.warnings)


def test_records_round_trip():
    ds = random_dataset(5, n=60)
    back = AnalysisDataset.from_records(
        ds.records(), covariate_names=ds.covariate_names, tau=ds.tau
    )
    np.testing.assert_allclose(back.x, ds.x)
    np.testing.assert_array_equal(back.v, ds.v)
    np.testing.assert_array_equal(back.stratum, ds.stratum)


def test_schema_renames_columns(tmp_path):
    path = tmp_path / "renamed.csv"
    path.write_text(
        "site,followup,fail,strain,known,vl,trt,age\n"
        "1,0.5,1,1,1,3.2,0,0.5\n"
        "1,0.6,1,,0,2.0,1,0.6\n"
        "1,0.7,0,,1,,0,0.7\n"
        "1,0.2,1,2,1,1.0,1,0.1\n"
    )
    schema = Schema(
        time="followup", event="fail", cause="strain",
        cause_known="known", stratum="site", mark="vl",
    )
    ds = load_dataset(path, schema=schema, covariates=("trt", "age"))
    assert ds.n == 4
    assert ds.covariate_names == ("trt", "age")
    assert np.isnan(ds.a[2])
