"""Command-line entry points.

Exit codes: 0 success, 2 usage or validation problem, 3 estimation failure.
All behaviour is controlled by flags; identical invocations write
bitwise-identical files.
"""
from __future__ import annotations

import functools
import os
import sys

import click

from .dataset import AnalysisConfig, ColumnSchema, load_csv, write_csv
from .effects import (rank_treatments, run_two_step, write_plot_data,
                      write_ranking_csv, write_ranking_json)
from .errors import EstimationError
from .ipcw import curve_table, fit_competing_km, fit_reverse_km, weight_table
from .simbench import (BUILTIN_DESIGNS, SimDesign, example1_contrasts,
                       oracle_true_ate, run_coverage_experiment,
                       run_ranking_experiment, simulate_dataset)

EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EstimationError as exc:
            click.echo(f"estimation error: {exc}", err=True)
            sys.exit(EXIT_ESTIMATION)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


def _csv_list(_ctx, _param, value):
    if value is None:
        return ()
    return tuple(v.strip() for v in value.split(",") if v.strip())


def schema_options(fn):
    fn = click.option("--time-col", required=True, help="follow-up time column")(fn)
    fn = click.option("--status-col", required=True,
                      help="event code column (0 censored, 1 event, 2 competing)")(fn)
    fn = click.option("--treatment-cols", required=True, callback=_csv_list,
                      help="comma-separated binary treatment columns")(fn)
    fn = click.option("--covariate-cols", callback=_csv_list, default=None,
                      help="comma-separated covariate columns")(fn)
    fn = click.option("--categorical-cols", callback=_csv_list, default=None,
                      help="covariate columns holding ordered categories")(fn)
    fn = click.option("--id-col", default=None, help="optional identifier column")(fn)
    return fn


def forest_options(fn):
    fn = click.option("--trees", default=200, show_default=True)(fn)
    fn = click.option("--seed", default=0, show_default=True)(fn)
    fn = click.option("--min-node-size", default=5, show_default=True)(fn)
    fn = click.option("--subsample-fraction", default=0.5, show_default=True)(fn)
    fn = click.option("--weight-floor", default=0.01, show_default=True)(fn)
    fn = click.option("--threads", default=0, show_default=True,
                      help="worker cap; 0 = all cores")(fn)
    return fn


def _schema(time_col, status_col, treatment_cols, covariate_cols,
            categorical_cols, id_col) -> ColumnSchema:
    return ColumnSchema(time=time_col, status=status_col,
                        treatments=treatment_cols, covariates=covariate_cols,
                        categorical=categorical_cols, id=id_col)


def _config(horizon, strata, scale, trees, seed, min_node_size,
            subsample_fraction, weight_floor) -> AnalysisConfig:
    return AnalysisConfig(horizon=horizon, strata_columns=strata, scale=scale,
                          trees=trees, seed=seed, min_node_size=min_node_size,
                          subsample_fraction=subsample_fraction,
                          weight_floor=weight_floor)


def _n_jobs(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def _load_design(spec: str) -> SimDesign:
    if spec in BUILTIN_DESIGNS:
        return BUILTIN_DESIGNS[spec]()
    if os.path.exists(spec):
        return SimDesign.from_json(spec)
    raise click.UsageError(
        f"unknown design {spec!r}; pass a builtin "
        f"({', '.join(sorted(BUILTIN_DESIGNS))}) or a design JSON path")


@click.group()
def main():
    """Estimate and rank treatment effects on time-to-event outcomes."""


@main.command()
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@schema_options
@click.option("--horizon", type=float, required=True, help="time horizon t0")
@click.option("--scale", type=click.Choice(["crude", "net", "both"]),
              default="both", show_default=True)
@click.option("--strata", callback=_csv_list, default=None,
              help="stratification columns for the weights; "
                   "@treatment resolves to the analyzed treatment")
@click.option("--treatments", "subset", callback=_csv_list, default=None,
              help="treatments to rank (default: all)")
@forest_options
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="output directory")
@_guarded
def rank(input_csv, time_col, status_col, treatment_cols, covariate_cols,
         categorical_cols, id_col, horizon, scale, strata, subset, trees,
         seed, min_node_size, subsample_fraction, weight_floor, threads, out):
    """Rank treatments by the magnitude of their estimated effect."""
    schema = _schema(time_col, status_col, treatment_cols, covariate_cols,
                     categorical_cols, id_col)
    dataset = load_csv(input_csv, schema)
    config = _config(horizon, strata, scale, trees, seed, min_node_size,
                     subsample_fraction, weight_floor)
    os.makedirs(out, exist_ok=True)
    scales = ("net", "crude") if scale == "both" else (scale,)
    tables = []
    for s in scales:
        table = rank_treatments(dataset, subset or None, s, config,
                                n_jobs=_n_jobs(threads))
        tables.append(table)
        write_ranking_csv(table, os.path.join(out, f"ranking_{s}.csv"))
        write_ranking_json(table, os.path.join(out, f"ranking_{s}.json"))
        for name in table.skipped:
            click.echo(f"skipped degenerate treatment: {name}")
    write_plot_data(tables, os.path.join(out, "ranking_plotdata.csv"))
    click.echo(f"wrote ranking tables for scales {', '.join(scales)} to {out}")


@main.command()
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@schema_options
@click.option("--horizon", type=float, required=True)
@click.option("--treatment", required=True, help="treatment column to analyze")
@click.option("--scale", type=click.Choice(["crude", "net"]), default="net",
              show_default=True)
@click.option("--strata", callback=_csv_list, default=None)
@forest_options
@click.option("--out", default=None, type=click.Path(file_okay=False),
              help="optional directory for diagnostic dumps")
@click.option("--dump-model", default=None, type=click.Path(dir_okay=False),
              help="write the fitted forest to this npz file")
@_guarded
def estimate(input_csv, time_col, status_col, treatment_cols, covariate_cols,
             categorical_cols, id_col, horizon, treatment, scale, strata,
             trees, seed, min_node_size, subsample_fraction, weight_floor,
             threads, out, dump_model):
    """Estimate a single treatment's effect and print it."""
    schema = _schema(time_col, status_col, treatment_cols, covariate_cols,
                     categorical_cols, id_col)
    dataset = load_csv(input_csv, schema)
    config = _config(horizon, strata, scale, trees, seed, min_node_size,
                     subsample_fraction, weight_floor)
    k = dataset.treatment_index(treatment)
    est, forest = run_two_step(dataset, k, scale, config, return_forest=True)
    click.echo(f"treatment={est.treatment} scale={est.scale} ate={est.ate!r} "
               f"se={est.se!r} ci=[{est.ci_low!r}, {est.ci_high!r}] "
               f"direction={est.direction}")
    if dump_model:
        forest.save(dump_model)
        click.echo(f"wrote model to {dump_model}")
    if out:
        os.makedirs(out, exist_ok=True)
        from .effects import resolve_strata
        from .ipcw import build_crude_outcomes, build_net_outcomes
        import csv as _csv

        cols = resolve_strata(config, treatment)
        censoring = fit_reverse_km(dataset, cols)
        if scale == "crude":
            outcomes = build_crude_outcomes(dataset, censoring, horizon,
                                            weight_floor)
            curves = {"censoring": censoring}
        else:
            competing = fit_competing_km(dataset, cols)
            outcomes = build_net_outcomes(dataset, censoring, competing,
                                          horizon, weight_floor)
            curves = {"censoring": censoring, "competing": competing}
        for label, cs in curves.items():
            with open(os.path.join(out, f"curves_{label}.csv"), "w",
                      newline="") as fh:
                w = _csv.writer(fh)
                w.writerow(["stratum", "time", "value"])
                for stratum, t, v in curve_table(cs):
                    w.writerow([stratum, repr(t), repr(v)])
        with open(os.path.join(out, "weights.csv"), "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["id", "denominator", "floored"])
            for rid, denom, floored in weight_table(dataset, outcomes):
                w.writerow([rid, repr(denom), int(floored)])
        click.echo(f"wrote diagnostics to {out}")


@main.command()
@click.option("--design", default="default", show_default=True,
              help="builtin design name or design JSON path")
@click.option("--n", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--x1-bin", is_flag=True,
              help="append the categorical x1 quintile column")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guarded
def simulate(design, n, seed, x1_bin, out):
    """Simulate a dataset from a design and write it as CSV."""
    d = _load_design(design)
    dataset = simulate_dataset(d, n, seed, include_x1_bin=x1_bin)
    write_csv(dataset, out)
    counts = dataset.event_counts()
    click.echo(f"wrote n={dataset.n} records to {out} "
               f"(censored={counts.get(0, 0)}, events={counts.get(1, 0)}, "
               f"competing={counts.get(2, 0)})")


@main.command("bench-coverage")
@click.option("--design", default="default", show_default=True)
@click.option("--replicates", default=100, show_default=True)
@click.option("--n", default=500, show_default=True)
@click.option("--scheme", "schemes", multiple=True,
              type=click.Choice(["a", "b", "c"]), default=("a",),
              show_default=True)
@click.option("--horizon", type=float, default=None,
              help="defaults to the design horizon")
@forest_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guarded
def bench_coverage(design, replicates, n, schemes, horizon, trees, seed,
                   min_node_size, subsample_fraction, weight_floor, threads,
                   out):
    """Replicate effect estimation and report CI coverage against the truth."""
    d = _load_design(design)
    config = AnalysisConfig(horizon=horizon or d.horizon, trees=trees,
                            seed=seed, min_node_size=min_node_size,
                            subsample_fraction=subsample_fraction,
                            weight_floor=weight_floor)
    report = run_coverage_experiment(d, replicates, schemes, config, n=n,
                                     n_jobs=_n_jobs(threads))
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "coverage.csv"))
    report.to_json(os.path.join(out, "coverage.json"))
    click.echo(f"wrote coverage report ({len(report.rows)} rows) to {out}")


@main.command("bench-ranking")
@click.option("--design", default="default", show_default=True)
@click.option("--replicates", default=100, show_default=True)
@click.option("--n", "n_grid", default="100,200,500,1000,1500,2000",
              show_default=True, help="comma-separated sample sizes")
@click.option("--scheme", "schemes", multiple=True,
              type=click.Choice(["a", "b", "c"]), default=("b",),
              show_default=True)
@click.option("--horizon", type=float, default=None)
@forest_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guarded
def bench_ranking(design, replicates, n_grid, schemes, horizon, trees, seed,
                  min_node_size, subsample_fraction, weight_floor, threads,
                  out):
    """Replicate the ranking and report top-rank fractions per sample size."""
    d = _load_design(design)
    try:
        sizes = tuple(int(v) for v in n_grid.split(",") if v.strip())
    except ValueError:
        raise click.UsageError(f"bad --n list {n_grid!r}") from None
    config = AnalysisConfig(horizon=horizon or d.horizon, trees=trees,
                            seed=seed, min_node_size=min_node_size,
                            subsample_fraction=subsample_fraction,
                            weight_floor=weight_floor)
    report = run_ranking_experiment(d, replicates, sizes, schemes, config,
                                    n_jobs=_n_jobs(threads))
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "ranking_fractions.csv"))
    report.to_json(os.path.join(out, "ranking_fractions.json"))
    click.echo(f"wrote ranking report ({len(report.rows)} rows) to {out}")


@main.command()
@click.option("--example1", is_flag=True,
              help="print the closed-form averaged contrasts of the "
                   "two-treatment constant-hazard example")
@click.option("--t", "times", multiple=True, type=float,
              help="horizons for --example1 (default 0.1 and 1.0)")
@click.option("--design", default=None)
@click.option("--treatment", default=None)
@click.option("--scale", type=click.Choice(["crude", "net"]), default="net",
              show_default=True)
@click.option("--horizon", type=float, default=None)
@_guarded
def oracle(example1, times, design, treatment, scale, horizon):
    """Print true average treatment effects."""
    if example1:
        for t in times or (0.1, 1.0):
            c1, c2 = example1_contrasts(t)
            click.echo(f"t={t!r} contrast_a1={c1:.6g} contrast_a2={c2:.6g}")
        return
    if design is None or treatment is None:
        raise click.UsageError("pass --example1, or --design with --treatment")
    d = _load_design(design)
    k = d.treatment_names.index(treatment) if treatment in d.treatment_names \
        else None
    if k is None:
        raise click.UsageError(f"design has no treatment {treatment!r}")
    value = oracle_true_ate(d, k, scale, horizon or d.horizon)
    click.echo(f"design={d.name} treatment={treatment} scale={scale} "
               f"horizon={horizon or d.horizon!r} true_ate={value:.6g}")


if __name__ == "__main__":
    main()
