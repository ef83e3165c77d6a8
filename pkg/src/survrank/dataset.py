"""Containers and CSV I/O for right-censored competing-risks data.

A dataset holds, per subject, a follow-up time, an event code
(0 = censored, 1 = event of interest, 2 = competing event), a vector of
binary treatment indicators and a vector of real covariates.  Categorical
covariates are encoded as small-integer-valued reals and flagged, which is
what makes them usable for stratified weight estimation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, RowValidationError, SchemaError

CENSORED, EVENT, COMPETING = 0, 1, 2

#: token in strata_columns that resolves to the treatment under analysis
CURRENT_TREATMENT = "@treatment"


@dataclass(frozen=True)
class ObservedRecord:
    """One subject: (id, follow-up time, event code, treatments, covariates)."""

    id: str
    time: float
    status: int
    treatments: tuple
    covariates: tuple


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV column names to their roles."""

    time: str
    status: str
    treatments: tuple
    covariates: tuple = ()
    categorical: tuple = ()
    id: str | None = None

    def __post_init__(self):
        unknown = set(self.categorical) - set(self.covariates)
        if unknown:
            raise SchemaError(
                f"categorical columns not among covariates: {sorted(unknown)}"
            )


class Dataset:
    """Validated, immutable columnar store of observed records.

    Arrays are locked after construction so the dataset can be shared
    freely across workers.
    """

    def __init__(self, ids, time, status, treatments, covariates,
                 treatment_names, covariate_names, categorical_flags):
        self.ids = list(ids)
        self.time = np.asarray(time, dtype=np.float64)
        self.status = np.asarray(status, dtype=np.int8)
        self.treatments = np.asarray(treatments, dtype=np.int8)
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.treatment_names = tuple(treatment_names)
        self.covariate_names = tuple(covariate_names)
        self.categorical_flags = tuple(bool(f) for f in categorical_flags)
        self._validate()
        for arr in (self.time, self.status, self.treatments, self.covariates):
            arr.flags.writeable = False

    def _validate(self):
        n = len(self.ids)
        if n < 1:
            raise SchemaError("dataset must contain at least one record")
        if self.treatments.ndim != 2 or self.covariates.ndim != 2:
            raise SchemaError("treatments and covariates must be 2-d")
        if self.treatments.shape != (n, len(self.treatment_names)):
            raise SchemaError("treatment matrix shape does not match names")
        if self.covariates.shape != (n, len(self.covariate_names)):
            raise SchemaError("covariate matrix shape does not match names")
        if len(self.categorical_flags) != len(self.covariate_names):
            raise SchemaError("one categorical flag required per covariate")
        bad = ~np.isfinite(self.time) | (self.time < 0)
        if bad.any():
            i = int(np.argmax(bad))
            raise RowValidationError(i, f"time must be a non-negative real, got {self.time[i]}")
        bad = ~np.isin(self.status, (CENSORED, EVENT, COMPETING))
        if bad.any():
            i = int(np.argmax(bad))
            raise RowValidationError(i, f"status must be 0, 1 or 2, got {self.status[i]}")
        for k in range(len(self.treatment_names)):
            bad = ~np.isin(self.treatments[:, k], (0, 1))
            if bad.any():
                i = int(np.argmax(bad))
                raise RowValidationError(
                    i, f"treatment {self.treatment_names[k]!r} must be 0 or 1, "
                       f"got {self.treatments[i, k]}")
        for j in range(len(self.covariate_names)):
            col = self.covariates[:, j]
            bad = ~np.isfinite(col)
            if bad.any():
                i = int(np.argmax(bad))
                raise RowValidationError(
                    i, f"covariate {self.covariate_names[j]!r} is missing or non-finite")
            if self.categorical_flags[j]:
                bad = col != np.rint(col)
                if bad.any():
                    i = int(np.argmax(bad))
                    raise RowValidationError(
                        i, f"categorical covariate {self.covariate_names[j]!r} "
                           f"must be integer-valued, got {col[i]}")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_treatments(self) -> int:
        return len(self.treatment_names)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def __len__(self) -> int:
        return self.n

    def record(self, i: int) -> ObservedRecord:
        return ObservedRecord(
            id=self.ids[i],
            time=float(self.time[i]),
            status=int(self.status[i]),
            treatments=tuple(int(a) for a in self.treatments[i]),
            covariates=tuple(float(x) for x in self.covariates[i]),
        )

    def __iter__(self):
        return (self.record(i) for i in range(self.n))

    def event_counts(self) -> dict:
        """Counts of each event code present in the data."""
        return {int(s): int(c) for s, c in zip(*np.unique(self.status, return_counts=True))}

    def degenerate_treatments(self) -> list:
        """Treatments whose column is constant (all 0 or all 1)."""
        out = []
        for k, name in enumerate(self.treatment_names):
            col = self.treatments[:, k]
            if col.min() == col.max():
                out.append(name)
        return out

    def treatment_index(self, name: str) -> int:
        try:
            return self.treatment_names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown treatment {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """Return a treatment or covariate column by name."""
        if name in self.treatment_names:
            return self.treatments[:, self.treatment_names.index(name)].astype(np.float64)
        if name in self.covariate_names:
            return self.covariates[:, self.covariate_names.index(name)]
        raise ConfigurationError(f"unknown column {name!r}")


@dataclass
class AnalysisConfig:
    """Settings for the two-step estimation pipeline."""

    horizon: float
    strata_columns: tuple = ()
    scale: str = "both"
    trees: int = 200
    seed: int = 0
    min_node_size: int = 5
    subsample_fraction: float = 0.5
    honesty: bool = True
    weight_floor: float = 0.01
    # not part of the core contract; exposed for tuning
    mtry: int | None = None
    ci_group_size: int = 4
    n_jobs: int = 1

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if self.scale not in ("crude", "net", "both"):
            raise ConfigurationError(f"scale must be crude, net or both, got {self.scale!r}")
        if self.trees < 1:
            raise ConfigurationError("trees must be a positive integer")
        if self.min_node_size < 1:
            raise ConfigurationError("min_node_size must be a positive integer")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigurationError("subsample_fraction must be in (0, 1]")
        if not 0 < self.weight_floor < 0.5:
            raise ConfigurationError("weight_floor must be in (0, 0.5)")
        self.strata_columns = tuple(self.strata_columns)


def _parse_cell(raw: str, row: int, col: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise RowValidationError(row, f"non-numeric value {raw!r} in column {col!r}") from None


def load_csv(path, schema: ColumnSchema) -> Dataset:
    """Read and validate a CSV file with a header row.

    Row order is preserved.  Raises SchemaError for missing columns and
    RowValidationError (naming the 0-based data row) for bad cells.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)

    col_index = {name: i for i, name in enumerate(header)}
    needed = [schema.time, schema.status, *schema.treatments, *schema.covariates]
    if schema.id is not None:
        needed.append(schema.id)
    missing = [c for c in needed if c not in col_index]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    if not schema.treatments:
        raise SchemaError("schema must name at least one treatment column")

    n = len(rows)
    ids, time, status = [], np.empty(n), np.empty(n, dtype=np.int64)
    treat = np.empty((n, len(schema.treatments)), dtype=np.int64)
    cov = np.empty((n, len(schema.covariates)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise RowValidationError(i, f"expected {len(header)} cells, got {len(row)}")
        ids.append(row[col_index[schema.id]] if schema.id is not None else str(i))
        time[i] = _parse_cell(row[col_index[schema.time]], i, schema.time)
        s = _parse_cell(row[col_index[schema.status]], i, schema.status)
        if s != int(s):
            raise RowValidationError(i, f"status must be an integer, got {s}")
        status[i] = int(s)
        for k, name in enumerate(schema.treatments):
            a = _parse_cell(row[col_index[name]], i, name)
            if a not in (0.0, 1.0):
                raise RowValidationError(i, f"treatment {name!r} must be 0 or 1, got {a}")
            treat[i, k] = int(a)
        for j, name in enumerate(schema.covariates):
            cov[i, j] = _parse_cell(row[col_index[name]], i, name)

    flags = tuple(name in schema.categorical for name in schema.covariates)
    return Dataset(ids, time, status, treat, cov,
                   schema.treatments, schema.covariates, flags)


def write_csv(dataset: Dataset, path, schema: ColumnSchema | None = None) -> ColumnSchema:
    """Write a dataset back to CSV; returns the schema that reads it back.

    Values are serialized with shortest round-trip float formatting, so
    load_csv(write_csv(d)) reproduces d bitwise.
    """
    if schema is None:
        schema = ColumnSchema(
            time="time", status="status",
            treatments=dataset.treatment_names,
            covariates=dataset.covariate_names,
            categorical=tuple(n for n, f in zip(dataset.covariate_names,
                                                dataset.categorical_flags) if f),
            id="id",
        )
    header = [schema.id, schema.time, schema.status,
              *schema.treatments, *schema.covariates]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [dataset.ids[i], repr(float(dataset.time[i])), int(dataset.status[i])]
            row += [int(a) for a in dataset.treatments[i]]
            row += [repr(float(x)) for x in dataset.covariates[i]]
            writer.writerow(row)
    return schema


def _check_strata(dataset: Dataset, strata_columns) -> list:
    cols = []
    for name in strata_columns:
        if name in dataset.treatment_names:
            cols.append(dataset.treatments[:, dataset.treatment_names.index(name)]
                        .astype(np.int64))
        elif name in dataset.covariate_names:
            j = dataset.covariate_names.index(name)
            if not dataset.categorical_flags[j]:
                raise ConfigurationError(
                    f"stratum column {name!r} is continuous; supply a pre-binned "
                    "categorical column instead")
            cols.append(dataset.covariates[:, j].astype(np.int64))
        else:
            raise ConfigurationError(f"unknown stratum column {name!r}")
    return cols


def stratum_key(record: ObservedRecord, strata_columns, dataset: Dataset) -> tuple:
    """Discrete key of one record under the given stratification.

    Empty strata map every record to the shared key ().
    """
    _check_strata(dataset, strata_columns)
    key = []
    for name in strata_columns:
        if name in dataset.treatment_names:
            key.append(int(record.treatments[dataset.treatment_names.index(name)]))
        else:
            key.append(int(record.covariates[dataset.covariate_names.index(name)]))
    return tuple(key)


def stratum_codes(dataset: Dataset, strata_columns):
    """Vectorized stratification: per-record integer codes plus key lookup.

    Returns (codes, keys) with codes[i] indexing into keys and
    keys[codes[i]] == stratum_key(record i).
    """
    if not strata_columns:
        return np.zeros(dataset.n, dtype=np.int64), [()]
    cols = _check_strata(dataset, strata_columns)
    stacked = np.stack(cols, axis=1)
    uniq, codes = np.unique(stacked, axis=0, return_inverse=True)
    keys = [tuple(int(v) for v in row) for row in uniq]
    return codes.astype(np.int64), keys
