"""Per-treatment two-step pipeline, aggregation to ATEs, and ranking.

For each treatment the censoring (and, on the net scale, competing-event)
curves are fitted stratified on the configured columns, the weighted
outcome is built at the configured horizon, and a forest is grown with
that outcome against the covariates plus the other treatments.  The ATE
is the mean out-of-bag local estimate over the sample; the standard error
comes from the forest's grove variance and deliberately ignores the
uncertainty of the fitted weights.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .dataset import CURRENT_TREATMENT, AnalysisConfig, Dataset
from .errors import ConfigurationError
from .forest import grow_forest
from .ipcw import (build_crude_outcomes, build_net_outcomes, fit_competing_km,
                   fit_reverse_km)

#: 95% normal quantile used for all confidence intervals
Z95 = 1.959964

PROTECTIVE, HARMFUL, NEUTRAL = "protective", "harmful", "neutral"


@dataclass(frozen=True)
class EffectEstimate:
    treatment: str
    scale: str
    ate: float
    se: float | None
    ci_low: float
    ci_high: float
    horizon: float
    n_floored: int = 0

    @property
    def direction(self) -> str:
        return direction_label(self.ci_low, self.ci_high)


def direction_label(ci_low: float, ci_high: float) -> str:
    if ci_high < 0:
        return PROTECTIVE
    if ci_low > 0:
        return HARMFUL
    return NEUTRAL


def resolve_strata(config: AnalysisConfig, treatment_name: str) -> tuple:
    """Expand the current-treatment token to the treatment under analysis."""
    out = []
    for name in config.strata_columns:
        resolved = treatment_name if name == CURRENT_TREATMENT else name
        if resolved not in out:
            out.append(resolved)
    return tuple(out)


def _build_outcomes(dataset: Dataset, scale: str, strata, config: AnalysisConfig):
    censoring = fit_reverse_km(dataset, strata)
    if scale == "crude":
        return build_crude_outcomes(dataset, censoring, config.horizon,
                                    config.weight_floor)
    competing = fit_competing_km(dataset, strata)
    return build_net_outcomes(dataset, censoring, competing, config.horizon,
                              config.weight_floor)


def run_two_step(dataset: Dataset, k: int, scale: str, config: AnalysisConfig,
                 return_forest: bool = False):
    """Estimate the ATE of treatment k on the crude or net scale.

    With return_forest=True also hands back the fitted forest (for model
    dumps and inspection).
    """
    if scale not in ("crude", "net"):
        raise ConfigurationError(f"scale must be crude or net, got {scale!r}")
    name = dataset.treatment_names[k]
    if name in dataset.degenerate_treatments():
        raise ConfigurationError(f"treatment {name!r} is degenerate (single arm)")
    strata = resolve_strata(config, name)
    outcomes = _build_outcomes(dataset, scale, strata, config)
    forest = grow_forest(dataset, outcomes, k, config)
    forest.scale_ = scale
    result = forest.average_effect()
    se = result.se
    if se is None:
        ci_low = ci_high = result.ate
    else:
        ci_low, ci_high = result.ate - Z95 * se, result.ate + Z95 * se
    estimate = EffectEstimate(treatment=name, scale=scale, ate=result.ate,
                              se=se, ci_low=ci_low, ci_high=ci_high,
                              horizon=config.horizon,
                              n_floored=outcomes.n_floored)
    return (estimate, forest) if return_forest else estimate


@dataclass(frozen=True)
class RankingTable:
    """Effect estimates sorted ascending by ATE (most protective first)."""

    entries: tuple
    scale: str
    skipped: tuple = ()

    def rows(self) -> list:
        return [(e.treatment, e.scale, e.ate, e.se, e.ci_low, e.ci_high,
                 e.direction) for e in self.entries]


def rank_treatments(dataset: Dataset, treatments, scale: str,
                    config: AnalysisConfig, n_jobs: int = 1) -> RankingTable:
    """One two-step run per treatment; degenerate treatments are skipped.

    Treatments are independent, so they run in parallel when n_jobs allows;
    the table is merged deterministically regardless of scheduling.
    """
    if treatments is None:
        treatments = dataset.treatment_names
    degenerate = set(dataset.degenerate_treatments())
    usable, skipped = [], []
    for name in treatments:
        dataset.treatment_index(name)
        (skipped if name in degenerate else usable).append(name)
    if not usable:
        raise ConfigurationError("no non-degenerate treatment to rank")
    if n_jobs == 1 or len(usable) == 1:
        entries = [run_two_step(dataset, dataset.treatment_index(n), scale,
                                config) for n in usable]
    else:
        from joblib import Parallel, delayed

        entries = Parallel(n_jobs=n_jobs)(
            delayed(run_two_step)(dataset, dataset.treatment_index(n), scale,
                                  config) for n in usable)
    entries.sort(key=lambda e: e.ate)
    return RankingTable(tuple(entries), scale, tuple(skipped))


def ranking_fraction(estimate_matrix, k: int) -> float:
    """Fraction of rows where column k is <= every other column.

    Exact ties count as ranked on top, so with ties the fractions across
    k can sum to more than one.
    """
    m = np.asarray(estimate_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("estimate matrix must be 2-d with at least one row")
    return float(np.mean(np.all(m[:, [k]] <= m, axis=1)))


# -- report emission -----------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_ranking_csv(table: RankingTable, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["treatment", "scale", "ate", "se", "ci_low",
                         "ci_high", "direction"])
        for row in table.rows():
            writer.writerow([_fmt(v) for v in row])


def write_ranking_json(table: RankingTable, path):
    payload = {
        "scale": table.scale,
        "skipped_degenerate": list(table.skipped),
        "entries": [
            {"treatment": e.treatment, "scale": e.scale, "ate": e.ate,
             "se": e.se, "ci_low": e.ci_low, "ci_high": e.ci_high,
             "direction": e.direction, "horizon": e.horizon,
             "n_floored_weights": e.n_floored}
            for e in table.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plot_data(tables, path):
    """Point-plus-interval rows for plotting, one per treatment and scale."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["treatment", "scale", "estimate", "lower", "upper",
                         "direction"])
        for table in tables:
            for e in table.entries:
                writer.writerow([e.treatment, e.scale, _fmt(e.ate),
                                 _fmt(e.ci_low), _fmt(e.ci_high), e.direction])
