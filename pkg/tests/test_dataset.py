import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survrank.dataset import (AnalysisConfig, ColumnSchema, Dataset, load_csv,
                              stratum_codes, stratum_key, write_csv)
from survrank.errors import (ConfigurationError, RowValidationError,
                             SchemaError)
from survrank.simbench import default_design, simulate_dataset


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


SCHEMA = ColumnSchema(time="time", status="status", treatments=("a1",),
                      covariates=("x1",))


def test_load_counts_events(tmp_path):
    path = tmp_path / "d.csv"
    _write(path, ["time", "status", "a1", "x1"],
           [[1.0, 1, 0, 0.2], [2.0, 0, 1, 0.4], [3.0, 2, 0, 0.1],
            [4.0, 0, 1, 0.9]])
    ds = load_csv(path, SCHEMA)
    assert ds.n == 4
    assert ds.event_counts() == {0: 2, 1: 1, 2: 1}
    assert ds.ids == ["0", "1", "2", "3"]


def test_negative_time_names_row(tmp_path):
    path = tmp_path / "d.csv"
    _write(path, ["time", "status", "a1", "x1"],
           [[1.0, 1, 0, 0.2], [2.0, 0, 1, 0.4], [3.0, 2, 0, 0.1],
            [-1.0, 0, 1, 0.9]])
    with pytest.raises(RowValidationError, match="row 3"):
        load_csv(path, SCHEMA)


@pytest.mark.parametrize("cell,err", [
    (("status", "5"), "status"),
    (("a1", "2"), "treatment"),
    (("x1", "abc"), "non-numeric"),
])
def test_bad_cells_rejected(tmp_path, cell, err):
    col, bad = cell
    header = ["time", "status", "a1", "x1"]
    row = {"time": "1.0", "status": "1", "a1": "0", "x1": "0.5"}
    row[col] = bad
    path = tmp_path / "d.csv"
    _write(path, header, [[row[h] for h in header]])
    with pytest.raises(RowValidationError, match=err):
        load_csv(path, SCHEMA)


def test_missing_column_is_schema_error(tmp_path):
    path = tmp_path / "d.csv"
    _write(path, ["time", "status", "x1"], [[1.0, 1, 0.5]])
    with pytest.raises(SchemaError, match="a1"):
        load_csv(path, SCHEMA)


def test_benchmark_shaped_file_roundtrip(tmp_path):
    ds = simulate_dataset(default_design(), 500, seed=4)
    assert ds.n_treatments == 10 and ds.n_covariates == 6
    path = tmp_path / "bench.csv"
    schema = write_csv(ds, path)
    back = load_csv(path, schema)
    assert back.n == 500 and back.n_treatments == 10 and back.n_covariates == 6
    np.testing.assert_array_equal(back.time, ds.time)
    np.testing.assert_array_equal(back.status, ds.status)
    np.testing.assert_array_equal(back.treatments, ds.treatments)
    np.testing.assert_array_equal(back.covariates, ds.covariates)
    assert back.ids == ds.ids
    assert back.categorical_flags == ds.categorical_flags


@given(times=st.lists(st.floats(min_value=0, max_value=1e6,
                                allow_nan=False, allow_infinity=False),
                      min_size=1, max_size=20),
       seed=st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_roundtrip_bitwise_on_values(tmp_path_factory, times, seed):
    rng = np.random.default_rng(seed)
    n = len(times)
    ds = Dataset([str(i) for i in range(n)], times,
                 rng.integers(0, 3, n), rng.integers(0, 2, (n, 2)),
                 np.column_stack([rng.standard_normal(n) * 1e3,
                                  rng.integers(0, 4, n).astype(float)]),
                 ["t1", "t2"], ["x1", "x2"], [False, True])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    schema = write_csv(ds, path)
    back = load_csv(path, schema)
    np.testing.assert_array_equal(back.time, ds.time)
    np.testing.assert_array_equal(back.covariates, ds.covariates)


def test_degenerate_treatment_flagged():
    ds = Dataset(["a", "b"], [1.0, 2.0], [1, 0],
                 np.array([[1, 1], [0, 1]]), np.zeros((2, 1)),
                 ["t1", "t2"], ["x1"], [False])
    assert ds.degenerate_treatments() == ["t2"]


def test_validation_never_drops_rows(tmp_path):
    path = tmp_path / "d.csv"
    rows = [[float(i), i % 3, i % 2, 0.1 * i] for i in range(10)]
    _write(path, ["time", "status", "a1", "x1"], rows)
    assert load_csv(path, SCHEMA).n == 10


class TestStratumKey:
    def _dataset(self):
        return Dataset(["a", "b", "c", "d"], [1, 2, 3, 4], [1, 0, 2, 0],
                       np.array([[0, 0], [0, 1], [1, 0], [1, 1]]),
                       np.array([[0.1, 2], [0.2, 2], [0.3, 1], [0.4, 1]]),
                       ["a1", "a2"], ["x1", "x2"], [False, True])

    def test_empty_strata_single_key(self):
        ds = self._dataset()
        keys = {stratum_key(r, (), ds) for r in ds}
        assert keys == {()}

    def test_treatment_strata_two_keys(self):
        ds = self._dataset()
        keys = [stratum_key(r, ("a2",), ds) for r in ds]
        assert sorted(set(keys)) == [(0,), (1,)]

    def test_identical_values_identical_keys(self):
        ds = self._dataset()
        k0 = stratum_key(ds.record(0), ("a2", "x2"), ds)
        k1 = stratum_key(ds.record(1), ("a2", "x2"), ds)
        assert k0 != k1  # differ in a2
        assert stratum_key(ds.record(0), ("x2",), ds) == \
            stratum_key(ds.record(1), ("x2",), ds)

    def test_continuous_column_rejected(self):
        ds = self._dataset()
        with pytest.raises(ConfigurationError, match="continuous"):
            stratum_key(ds.record(0), ("x1",), ds)
        with pytest.raises(ConfigurationError):
            stratum_codes(ds, ("x1",))

    def test_codes_partition_dataset(self):
        ds = self._dataset()
        codes, keys = stratum_codes(ds, ("a1", "x2"))
        assert len(codes) == ds.n
        # partition: every record in exactly one stratum, keys consistent
        for i in range(ds.n):
            assert keys[codes[i]] == stratum_key(ds.record(i), ("a1", "x2"), ds)
        assert sum((codes == c).sum() for c in range(len(keys))) == ds.n


def test_analysis_config_validation():
    with pytest.raises(ConfigurationError):
        AnalysisConfig(horizon=0.0)
    with pytest.raises(ConfigurationError):
        AnalysisConfig(horizon=1.0, scale="bogus")
    with pytest.raises(ConfigurationError):
        AnalysisConfig(horizon=1.0, weight_floor=0.5)
    cfg = AnalysisConfig(horizon=1.0, strata_columns=["a1"])
    assert cfg.strata_columns == ("a1",)
