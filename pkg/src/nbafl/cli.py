import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import click
from dotenv import load_dotenv

from . import rng as rngs
from .bounds import (
    DegenerateSampleError,
    LossRegularity,
    RegimeError,
    bound_profile,
    estimate_regularity,
    load_regularity,
    optimal_K,
    optimal_T,
    save_regularity,
    theorem2_bound,
    theorem2_bound_general,
    theorem3_bound,
)
from .config import ConfigError, RunConfigFile, load_config, load_datasets
from .data_io import IdxFormatError, InsufficientDataError, partition_iid
from .learning import SolverDivergenceError
from .orchestrator import RunAbortedError, calibrate, exposure_check, run_nbafl
from .privacy import (
    PrivacyBudget,
    PrivacyDomainError,
    ScheduleMode,
    SensitivityReport,
    audit_mechanism,
    uplink_sensitivity,
)
from .report import TraceCollection, bound_trajectory, compare_with_bound
from .sweep import SweepRunner, SweepVariable, parse_values
from .traces import COMPARISON_HEADER, trace_filename, write_csv, write_profile_csv, write_trace_csv

logger = logging.getLogger("nbafl.cli")

EXIT_OK = 0
EXIT_IO = 1
EXIT_DOMAIN = 2
EXIT_DIVERGENCE = 3
EXIT_AUDIT_FAIL = 4


def _fail(code: int, message: str):
    logger.error(message)
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(ctx: click.Context) -> RunConfigFile:
    opts = ctx.obj
    if opts["config"] is None:
        _fail(EXIT_IO, "--config is required for this command")
    try:
        cfg = load_config(Path(opts["config"]))
        return cfg.with_overrides(seed=opts["seed"], out_dir=opts["out"])
    except (OSError, ConfigError) as e:
        _fail(EXIT_IO, f"Failed to load config: {e}")


def _datasets(cfg: RunConfigFile):
    try:
        return load_datasets(cfg)
    except (OSError, IdxFormatError) as e:
        _fail(EXIT_IO, f"Failed to load data: {e}")


def _regularity(cfg: RunConfigFile, path: Optional[str], points: int) -> LossRegularity:
    if path is not None:
        try:
            return load_regularity(path)
        except (OSError, ValueError, KeyError) as e:
            _fail(EXIT_IO, f"Failed to load regularity constants: {e}")
    train, _ = _datasets(cfg)
    try:
        partition = partition_iid(
            train, cfg.n_clients, cfg.shard_size, rngs.stream(cfg.seed, "partition")
        )
        reg = estimate_regularity(
            cfg.loss_spec(), train, partition, points, rngs.stream(cfg.seed, "regularity")
        )
    except (InsufficientDataError, DegenerateSampleError) as e:
        _fail(EXIT_DOMAIN, str(e))
    save_regularity(reg, Path(cfg.out_dir) / "regularity.yml")
    return reg


@click.group()
@click.option("--config", "-c", default=None, help="Path to a key = value run config")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Master seed")
@click.option("--out", default=None, help="Output directory (overrides out_dir)")
@click.option("--jobs", default=1, show_default=True, help="Worker threads")
@click.pass_context
def main(ctx, config, seed, out, jobs):
    """Differentially private federated learning simulator."""
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get("LOG_LEVEL", "INFO"),
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    )
    ctx.obj = {"config": config, "seed": seed, "out": out, "jobs": max(1, jobs)}


@main.command("calibrate")
@click.pass_context
def cmd_calibrate(ctx):
    """Print the noise calibration for the configured run."""
    cfg = _load(ctx)
    try:
        fl = cfg.to_fl_config()
        cal = calibrate(fl)
        budget = fl.budget()
        sens = SensitivityReport.from_params(cfg.clip_c, cfg.shard_size, fl.participants)
    except PrivacyDomainError as e:
        _fail(EXIT_DOMAIN, str(e))

    rows = [
        ("c", budget.c),
        ("ds_uplink", sens.ds_uplink),
        ("ds_downlink", sens.ds_downlink),
        ("sigma_uplink", cal.sigma_uplink),
        ("sigma_downlink", cal.sigma_downlink),
        ("sigma_aggregate", cal.sigma_aggregate),
    ]
    if cal.mode is ScheduleMode.K_RANDOM:
        rows += [("b", cal.b_coeff), ("gamma", cal.gamma), ("minimal_T", cal.minimal_T)]
    for name, value in rows:
        shown = "undefined" if value is None else f"{value:.6e}"
        click.echo(f"{name:<16} {shown}")

    if cal.mode is ScheduleMode.K_RANDOM and cfg.rounds <= cal.minimal_T:
        message = (
            f"K-random bound undefined at T={cfg.rounds} (minimal T = {cal.minimal_T:.6g})"
        )
        logger.warning(message)
        click.echo(f"warning: {message}")


@main.command("run")
@click.pass_context
def cmd_run(ctx):
    """Run one training job and write its round trace."""
    cfg = _load(ctx)
    train, test = _datasets(cfg)
    try:
        result = run_nbafl(cfg.to_fl_config(), train, test, jobs=ctx.obj["jobs"])
    except PrivacyDomainError as e:
        _fail(EXIT_DOMAIN, str(e))
    except InsufficientDataError as e:
        _fail(EXIT_IO, str(e))
    except (RunAbortedError, SolverDivergenceError) as e:
        _fail(EXIT_DIVERGENCE, f"Solver diverged: {e}")

    path = Path(cfg.out_dir) / trace_filename(cfg.seed)
    try:
        write_trace_csv(path, result.traces, cfg.seed)
    except OSError as e:
        _fail(EXIT_IO, f"Failed to write trace: {e}")
    final = result.final_row()
    click.echo(
        f"rounds={len(result.traces)} final_train_loss={final['train_loss']:.6g} "
        f"final_test_acc={final['test_acc']:.4f} trace={path}"
    )
    within = exposure_check(result, cfg.uplink_exposures)
    if not within:
        logger.warning(
            f"A client uploaded more than the declared L={cfg.uplink_exposures} times; "
            "the uplink calibration does not cover this run"
        )
    click.echo(f"exposure_check={str(within).lower()} L={cfg.uplink_exposures}")


@main.command("bound")
@click.option("--grid-max", default=100, show_default=True, help="Largest T on the grid")
@click.option("--regularity", default=None, help="YAML file of regularity constants")
@click.option("--points", default=64, show_default=True, help="Sample points when estimating")
@click.option(
    "--form",
    type=click.Choice(["general", "normalized"]),
    default="general",
    show_default=True,
    help="general uses sensitivity 2C/(mN); normalized uses 1/(mN)",
)
@click.pass_context
def cmd_bound(ctx, grid_max, regularity, points, form):
    """Write convergence bound profiles over T (and over K for krandom)."""
    cfg = _load(ctx)
    reg = _regularity(cfg, regularity, points)
    N, m, C = cfg.n_clients, cfg.shard_size, cfg.clip_c
    out_dir = Path(cfg.out_dir)

    try:
        c = PrivacyBudget.calibrated(cfg.epsilon, cfg.delta).c
    except PrivacyDomainError as e:
        _fail(EXIT_DOMAIN, str(e))

    if cfg.schedule is ScheduleMode.K_RANDOM:
        K = cfg.k_clients

        def over_T(T):
            return theorem3_bound(T, cfg.epsilon, K, N, m, C, cfg.delta, reg, cfg.mu)

        def over_K(k):
            return theorem3_bound(cfg.rounds, cfg.epsilon, k, N, m, C, cfg.delta, reg, cfg.mu)

    elif form == "general":
        ds = uplink_sensitivity(C, m) / N

        def over_T(T):
            return theorem2_bound_general(T, cfg.epsilon, N, ds, c, reg, cfg.mu)

        over_K = None
    else:

        def over_T(T):
            return theorem2_bound(T, cfg.epsilon, N, m, C, cfg.delta, reg, cfg.mu)

        over_K = None

    rows = bound_profile(over_T, range(1, grid_max + 1))
    write_profile_csv(out_dir / "bound_T.csv", "T", rows)
    ok = [r for r in rows if r.flag == "ok"]
    if not ok:
        _fail(EXIT_DOMAIN, "bound is out of regime on the entire T grid")
    if len(ok) == len(rows):
        T_star, convex = optimal_T(over_T, grid_max)
        click.echo(f"T* = {T_star} convex = {str(convex).lower()}")
    else:
        best = min(ok, key=lambda r: (r.value, r.x))
        click.echo(f"T* = {best.x} (over {len(ok)}/{len(rows)} defined grid points)")

    if over_K is not None:
        k_rows = bound_profile(over_K, range(2, N))
        write_profile_csv(out_dir / "bound_K.csv", "K", k_rows)
        k_ok = [r for r in k_rows if r.flag == "ok"]
        if k_ok:
            values = {r.x: r.value for r in k_ok}
            K_star, _ = optimal_K(values.__getitem__, list(values))
            click.echo(f"K* = {K_star}")
        else:
            click.echo(f"K* = undefined at T={cfg.rounds}")


@main.command("sweep")
@click.option(
    "--variable",
    type=click.Choice([v.value for v in SweepVariable]),
    required=True,
    help="Config key to sweep",
)
@click.option("--values", required=True, help="Comma-separated values")
@click.option("--seeds", default=5, show_default=True, help="Seeds per value")
@click.pass_context
def cmd_sweep(ctx, variable, values, seeds):
    """Run seeds x values experiments and write long and summary CSVs."""
    cfg = _load(ctx)
    try:
        parsed = parse_values(variable, values)
    except ValueError as e:
        _fail(EXIT_IO, f"Invalid --values: {e}")
    train, test = _datasets(cfg)
    out_dir = Path(cfg.out_dir)
    runner = SweepRunner(cfg, variable, parsed, seeds, train, test)
    summary = runner.execute_all(jobs=ctx.obj["jobs"], out_dir=out_dir)
    runner.write(out_dir)
    for row in runner.summary_rows():
        mean = row["mean_final_train_loss"]
        shown = "n/a" if mean is None else f"{mean:.6g}"
        click.echo(
            f"{variable}={row['value']} seeds={row['n_seeds']} "
            f"mean_final_train_loss={shown} failed={row['failed_cells']}"
        )
    if runner.variable is SweepVariable.K_CLIENTS:
        K_star = runner.optimal_k()
        click.echo(f"K* = {'undefined' if K_star is None else K_star}")
    if summary["failed"]:
        _fail(EXIT_IO, f"{summary['failed']} of {summary['total']} sweep cells failed")


@main.command("audit")
@click.option("--epsilon", type=float, required=True)
@click.option("--delta", type=float, required=True)
@click.option("--samples", default=1_000_000, show_default=True)
@click.option("--sensitivity", default=1.0, show_default=True, help="Sensitivity ds")
@click.option("--scale-sigma", default=1.0, hidden=True)
@click.pass_context
def cmd_audit(ctx, epsilon, delta, samples, sensitivity, scale_sigma):
    """Monte-Carlo check of the Gaussian mechanism at the calibrated sigma."""
    seed = ctx.obj["seed"] or 0
    try:
        budget = PrivacyBudget.calibrated(epsilon, delta)
        sigma = budget.c * sensitivity / budget.epsilon * scale_sigma
        report = audit_mechanism(
            sigma, sensitivity, epsilon, delta, samples, rngs.stream(seed, "audit")
        )
    except PrivacyDomainError as e:
        _fail(EXIT_DOMAIN, str(e))

    click.echo(f"sigma          {report.sigma:.6e}")
    click.echo(f"estimate       {report.estimate:.6e}")
    click.echo(f"half_width     {report.half_width:.6e}")
    click.echo(f"tight_estimate {report.tight_estimate:.6e}")
    click.echo(f"analytic_delta {report.analytic:.6e}")
    click.echo(f"delta          {report.delta:.6e}")
    click.echo("PASS" if report.passed else "FAIL")
    if not report.passed:
        sys.exit(EXIT_AUDIT_FAIL)


@main.command("report")
@click.argument("traces", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--regularity", default=None, help="YAML file of regularity constants")
@click.option("--f-star", type=float, default=None, help="Loss floor (defaults to the YAML's)")
@click.option("--points", default=64, show_default=True)
@click.pass_context
def cmd_report(ctx, traces, regularity, f_star, points):
    """Compare seed-averaged trace losses with the per-round bound."""
    cfg = _load(ctx)
    collection = TraceCollection()
    try:
        for path in traces:
            collection.add_file(path)
    except (OSError, ValueError) as e:
        _fail(EXIT_IO, f"Failed to read traces: {e}")

    reg = _regularity(cfg, regularity, points)
    floor = f_star if f_star is not None else reg.f_star
    if floor is None:
        _fail(EXIT_IO, "no loss floor: pass --f-star or a regularity file with f_star")

    bounds = None
    if cfg.schedule is ScheduleMode.K_RANDOM:
        logger.warning("Per-round bound is only available for all-client scheduling")
    else:
        bounds = _bound_or_none(cfg, collection.rounds, reg)
    rows = compare_with_bound(collection, floor, bounds)
    path = write_csv(
        Path(cfg.out_dir) / "comparison.csv", COMPARISON_HEADER, (r.to_row() for r in rows)
    )
    summary = collection.get_summary()
    dominated = sum(1 for r in rows if r.dominated)
    click.echo(f"seeds={summary['n_seeds']} rounds={summary['rounds']}")
    click.echo(
        f"mean_final_train_loss={summary['mean_final_train_loss']:.6g} "
        f"(stderr {summary['stderr_final_train_loss']:.3g})"
    )
    shown = "n/a" if bounds is None else f"{dominated}/{len(rows)}"
    click.echo(f"bound dominates: {shown}")
    if not math.isnan(summary["mean_final_test_acc"]):
        click.echo(f"mean_final_test_acc={summary['mean_final_test_acc']:.4f}")
    click.echo(f"comparison={path}")


def _bound_or_none(cfg: RunConfigFile, rounds: int, reg: LossRegularity):
    try:
        return bound_trajectory(
            rounds,
            cfg.epsilon,
            cfg.delta,
            cfg.n_clients,
            cfg.shard_size,
            cfg.clip_c,
            reg,
            cfg.mu,
        )
    except (RegimeError, PrivacyDomainError) as e:
        logger.warning(f"Bound out of regime: {e}")
        return None


if __name__ == "__main__":
    main()
