"""Step 1 of the two-step pipeline: censoring weights and weighted outcomes.

Fits stratified product-limit curves for the censoring survival function
(reverse Kaplan-Meier) and for the competing-event survival function, then
turns each subject's event indicator into an inverse-probability-weighted
outcome.  Ties are resolved with the convention that the event of interest
precedes competing events, which precede censoring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CENSORED, COMPETING, EVENT, Dataset, stratum_codes
from .errors import EmptyStratumError, PositivityError


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous step function dropping from 1 at each jump time."""

    jump_times: np.ndarray
    values: np.ndarray
    stratum: tuple

    def __post_init__(self):
        object.__setattr__(self, "jump_times", np.asarray(self.jump_times, dtype=np.float64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if np.any(np.diff(self.jump_times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(np.diff(self.values) > 0):
            raise ValueError("curve values must be non-increasing")

    def value_at(self, t: float) -> float:
        """Curve value at t (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return 1.0 if idx == 0 else float(self.values[idx - 1])

    def left_limit(self, t: float) -> float:
        """Curve value just before t: the product of factors at jumps < t."""
        idx = np.searchsorted(self.jump_times, t, side="left")
        return 1.0 if idx == 0 else float(self.values[idx - 1])


@dataclass(frozen=True)
class CurveSet:
    """Fitted curves per stratum, remembering the stratification used."""

    curves: dict
    strata_columns: tuple

    def __getitem__(self, key) -> SurvivalCurve:
        return self.curves[key]

    def left_limits(self, dataset: Dataset, times: np.ndarray) -> np.ndarray:
        """Evaluate each record's stratum curve just before the given times."""
        codes, keys = stratum_codes(dataset, self.strata_columns)
        out = np.empty(len(times))
        for c, key in enumerate(keys):
            mask = codes == c
            if not mask.any():
                continue
            if key not in self.curves:
                raise EmptyStratumError(
                    f"no fitted curve for stratum {key}; the curves were "
                    "fitted on data without this stratum")
            curve = self.curves[key]
            idx = np.searchsorted(curve.jump_times, times[mask], side="left")
            vals = np.concatenate(([1.0], curve.values))
            out[mask] = vals[idx]
        return out


def _product_limit(times, status, event_code, tie_removed_mask, stratum) -> SurvivalCurve:
    """Product-limit estimator treating `event_code` as the event.

    At each distinct time the at-risk count is reduced by the same-time
    records flagged in `tie_removed_mask`, which encodes the tie ordering.
    """
    order = np.argsort(times, kind="stable")
    times = times[order]
    status = status[order]
    removed_mask = np.asarray(tie_removed_mask)[order]
    n = len(times)

    distinct, start = np.unique(times, return_index=True)
    jump_times, values = [], []
    surv = 1.0
    for j, t in enumerate(distinct):
        lo = start[j]
        hi = start[j + 1] if j + 1 < len(distinct) else n
        d_event = int(np.sum(status[lo:hi] == event_code))
        if d_event == 0:
            continue
        at_risk = n - lo
        removed = int(np.sum(removed_mask[lo:hi]))
        surv *= 1.0 - d_event / (at_risk - removed)
        jump_times.append(t)
        values.append(surv)
    return SurvivalCurve(np.array(jump_times), np.array(values), stratum)


def _fit_stratified(dataset: Dataset, strata_columns, event_code, removed_fn) -> CurveSet:
    strata_columns = tuple(strata_columns)
    codes, keys = stratum_codes(dataset, strata_columns)
    curves = {}
    for c, key in enumerate(keys):
        mask = codes == c
        if not mask.any():
            raise EmptyStratumError(f"stratum {key} has no records")
        status = dataset.status[mask]
        curves[key] = _product_limit(
            dataset.time[mask], status, event_code, removed_fn(status), key)
    return CurveSet(curves, strata_columns)


def fit_reverse_km(dataset: Dataset, strata_columns=()) -> CurveSet:
    """Censoring survival curves: product-limit with censoring as the event.

    Same-time records with an actual event (status > 0) leave the risk set
    before censoring happens.
    """
    return _fit_stratified(dataset, strata_columns, CENSORED,
                           lambda status: status > CENSORED)


def fit_competing_km(dataset: Dataset, strata_columns=()) -> CurveSet:
    """Competing-event survival curves: product-limit with status 2 as the event.

    Same-time records of any other status leave the risk set first.
    """
    return _fit_stratified(dataset, strata_columns, COMPETING,
                           lambda status: status != COMPETING)


def eval_left_limit(curve: SurvivalCurve, t: float) -> float:
    """Left limit of a curve at t >= 0 (1.0 before the first jump)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return curve.left_limit(t)


@dataclass(frozen=True)
class WeightedOutcome:
    """One subject's weighted outcome and its weight denominator."""

    value: float
    denominator: float
    floored: bool


class WeightedOutcomes:
    """Columnar vector of weighted outcomes."""

    def __init__(self, values, denominators, floored):
        self.values = np.asarray(values, dtype=np.float64)
        self.denominators = np.asarray(denominators, dtype=np.float64)
        self.floored = np.asarray(floored, dtype=bool)
        for arr in (self.values, self.denominators, self.floored):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i) -> WeightedOutcome:
        return WeightedOutcome(float(self.values[i]),
                               float(self.denominators[i]),
                               bool(self.floored[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_floored(self) -> int:
        return int(self.floored.sum())


def _weighted(indicator, raw_denom, floor) -> WeightedOutcomes:
    if np.any((indicator == 1) & (raw_denom <= 0.0) & (floor <= 0.0)):
        raise PositivityError(
            "zero weight denominator at an observed event; the censoring "
            "positivity assumption is violated (increase weight_floor or "
            "refine the strata)")
    denom = np.maximum(raw_denom, floor)
    floored = raw_denom < floor
    values = np.zeros(len(indicator))
    obs = indicator == 1
    values[obs] = 1.0 / denom[obs]
    return WeightedOutcomes(values, denom, floored)


def build_crude_outcomes(dataset: Dataset, censoring: CurveSet,
                         horizon: float, floor: float = 0.01) -> WeightedOutcomes:
    """Weighted outcomes targeting the crude event probability.

    value = 1{time <= horizon, status == 1} / max(G(time-), floor)
    where G is the subject's stratum censoring curve.
    """
    indicator = ((dataset.time <= horizon) & (dataset.status == EVENT)).astype(np.int8)
    g_left = censoring.left_limits(dataset, dataset.time)
    return _weighted(indicator, g_left, floor)


def build_net_outcomes(dataset: Dataset, censoring: CurveSet, competing: CurveSet,
                       horizon: float, floor: float = 0.01) -> WeightedOutcomes:
    """Weighted outcomes targeting the net event probability.

    As build_crude_outcomes but with denominator G(time-) * G2(time-),
    additionally weighting away the competing event.
    """
    indicator = ((dataset.time <= horizon) & (dataset.status == EVENT)).astype(np.int8)
    g_left = censoring.left_limits(dataset, dataset.time)
    g2_left = competing.left_limits(dataset, dataset.time)
    return _weighted(indicator, g_left * g2_left, floor)


def curve_table(curveset: CurveSet) -> list:
    """Rows (stratum, time, value) for diagnostic dumps."""
    rows = []
    for key in sorted(curveset.curves):
        curve = curveset.curves[key]
        for t, v in zip(curve.jump_times, curve.values):
            rows.append(("|".join(str(k) for k in key) if key else "all",
                         float(t), float(v)))
    return rows


def weight_table(dataset: Dataset, outcomes: WeightedOutcomes) -> list:
    """Rows (id, denominator, floored) for diagnostic dumps."""
    return [(dataset.ids[i], float(outcomes.denominators[i]), bool(outcomes.floored[i]))
            for i in range(dataset.n)]
