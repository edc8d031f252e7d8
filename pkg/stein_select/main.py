import logging
import sys
from functools import wraps
from pathlib import Path

import click
from pydantic import ValidationError

from stein_select import config
from stein_select.calibrate import calibrate_t, gaussian_prior_sampler, ppca_prior_sampler
from stein_select.data import ingest_csv
from stein_select.errors import SteinSelectError
from stein_select.results import calibration_rows, emit_results, mean_rows, report_rows
from stein_select.schemas import (
    CalibrateConfig,
    ConstantPolicy,
    KernelFamily,
    KernelSettings,
    MatchedPolicy,
    PerDimPolicy,
    PerDimSqrtNPolicy,
    PitmanYorPolicy,
    PpcaSimConfig,
    SelectConfig,
    ToyConfig,
)
from stein_select.score_models import GaussianLocationFamily, PpcaFamily
from stein_select.selection import consistency_curves, leave_one_out, ppca_simulation

logger = logging.getLogger(__name__)


# ---------------------------
# Option parsers
# ---------------------------

def _floats(text: str, count: int, name: str):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != count:
        raise click.BadParameter(f"{name} expects {count} comma-separated number(s), got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise click.BadParameter(f"{name} expects numbers, got {text!r}")


def parse_seeds(ctx, param, value):
    """'0..4' (inclusive) or '0,1,2'."""
    if value is None:
        return None
    try:
        if ".." in value:
            lo, hi = value.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"expected 'A..B' or a comma-separated list, got {value!r}")


def parse_int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def parse_str_list(ctx, param, value):
    if value is None:
        return None
    return [s.strip() for s in value.split(",") if s.strip()]


def parse_policy(ctx, param, value):
    """constant:M | perdim:C | sqrt:C | pitman-yor:A,T,D | matched"""
    if value is None:
        return None
    kind, _, args = value.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "constant":
            return ConstantPolicy(m_b=_floats(args, 1, kind)[0])
        if kind == "perdim":
            return PerDimPolicy(c_b=_floats(args, 1, kind)[0])
        if kind == "sqrt":
            return PerDimSqrtNPolicy(c_b=_floats(args, 1, kind)[0])
        if kind == "pitman-yor":
            alpha, theta, d = _floats(args, 3, kind)
            return PitmanYorPolicy(alpha=alpha, theta_py=theta, d_py=d)
        if kind == "matched":
            return MatchedPolicy()
    except ValidationError as e:
        raise click.BadParameter(str(e))
    raise click.BadParameter(f"unknown policy {kind!r}")


def parse_kernel(ctx, param, value):
    """imq[:BETA,C] | rbf[:H]"""
    if value is None:
        return None
    family, _, args = value.partition(":")
    family = family.strip().lower()
    try:
        if family == "imq":
            if not args:
                return KernelSettings(family=KernelFamily.FACTORED_IMQ)
            beta, c = _floats(args, 2, family)
            return KernelSettings(family=KernelFamily.FACTORED_IMQ, beta=beta, c=c)
        if family == "rbf":
            bandwidth = _floats(args, 1, family)[0] if args else 1.0
            return KernelSettings(family=KernelFamily.RBF, bandwidth=bandwidth)
    except ValidationError as e:
        raise click.BadParameter(str(e))
    raise click.BadParameter(f"unknown kernel {family!r}")


def _drop_none(**kwargs):
    return {k: v for k, v in kwargs.items() if v is not None}


def handle_errors(fn):
    """Map library failures to exit codes: 2 config, 3 numeric, 4 IO."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as e:
            logger.error(f"Invalid configuration: {e}")
            sys.exit(2)
        except SteinSelectError as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(e.exit_code)

    return wrapper


# ---------------------------
# Commands
# ---------------------------

@click.group()
@click.option("--log-level", default=None, help="Overrides STEIN_SELECT_LOG_LEVEL.")
@click.option("--jobs", "n_jobs", type=int, default=None, help="joblib workers; overrides STEIN_SELECT_N_JOBS.")
@click.pass_context
def cli(ctx, log_level, n_jobs):
    """Bayesian data selection with the Stein volume criterion."""
    try:
        config.configure_logging(log_level)
    except SteinSelectError as e:
        raise click.BadParameter(str(e), param_hint="--log-level")
    ctx.obj = {"n_jobs": n_jobs if n_jobs is not None else config.N_JOBS}


@cli.command()
@click.option("--scenario", required=True, type=click.Choice(["ds", "nested_ds", "ms", "nested_ms"]))
@click.option("--scores", callback=parse_str_list, help="e.g. svc,k_a,k_b,k_c,k_d")
@click.option("--n-grid", callback=parse_int_list, help="e.g. 100,1000,10000")
@click.option("--seeds", callback=parse_seeds, help="'0..99' or '0,1,2'")
@click.option("--t", "temp", type=float, default=None)
@click.option("--policy", callback=parse_policy, help="perdim:5, sqrt:1, pitman-yor:0.5,1,0.2, constant:2")
@click.option("--kernel", callback=parse_kernel, help="rbf:1 or imq:-0.5,1")
@click.option("--limits/--no-limits", default=True, help="Add reference-limit rows.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--plot/--no-plot", default=True)
@click.pass_context
@handle_errors
def toy(ctx, scenario, scores, n_grid, seeds, temp, policy, kernel, limits, out_dir, plot):
    """Consistency curves on the two-dimensional Gaussian scenarios."""
    cfg = ToyConfig(**_drop_none(
        scenario=scenario, scores=scores, n_grid=n_grid, seeds=seeds, temp=temp, policy=policy,
        kernel=kernel, out_dir=out_dir, plot=plot, n_jobs=ctx.obj["n_jobs"],
    ))
    logger.info(f"Toy scenario {cfg.scenario.value}: {len(cfg.n_grid)} sizes x {len(cfg.seeds)} seeds")
    rows = consistency_curves(
        cfg.scenario, cfg.scores, cfg.n_grid, cfg.seeds, cfg.temp, cfg.policy, cfg.kernel,
        n_jobs=cfg.n_jobs, limits=limits,
    )
    emit_results(rows, cfg, cfg.out_dir, cfg.plot)


@cli.command("ppca-sim")
@click.option("--scenario", required=True, type=click.Choice(["A", "B"]))
@click.option("--n", type=int, default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--t", "temp", type=float, default=None)
@click.option("--policy", callback=parse_policy)
@click.option("--method", type=click.Choice(["bic", "laplace"]), default=None)
@click.option("--fast/--slow", default=True, help="Linear-response optima or a full refit per foreground.")
@click.option("--seeds", callback=parse_seeds)
@click.option("--alpha", type=float, default=None, help="pPCA prior hyperparameter.")
@click.option("--kernel", callback=parse_kernel)
@click.option("--criticism/--no-criticism", default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--plot/--no-plot", default=True)
@click.pass_context
@handle_errors
def ppca_sim(ctx, scenario, n, latent_dim, temp, policy, method, fast, seeds, alpha, kernel, criticism, out_dir, plot):
    """Leave-one-out selection on pPCA data with two corrupted dimensions."""
    cfg = PpcaSimConfig(**_drop_none(
        scenario=scenario, n=n, latent_dim=latent_dim, temp=temp, policy=policy, method=method, fast=fast,
        seeds=seeds, alpha=alpha, kernel=kernel, criticism=criticism, out_dir=out_dir, plot=plot,
        n_jobs=ctx.obj["n_jobs"],
    ))
    reports = ppca_simulation(
        cfg.scenario, cfg.n, cfg.seeds, cfg.latent_dim, cfg.temp, cfg.policy, cfg.method, cfg.fast,
        cfg.kernel, cfg.alpha, cfg.criticism, n_jobs=cfg.n_jobs,
    )
    rows = []
    for seed, report in reports:
        rows.extend(report_rows(report, "ppca-sim", cfg.scenario.value, cfg.method.value, cfg.n, str(seed)))
    emit_results(rows + mean_rows(rows), cfg, cfg.out_dir, cfg.plot)


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--model", type=click.Choice(["ppca", "gaussian"]), default="ppca")
@click.option("--latent-dim", type=int, default=None)
@click.option("--t", "temp", type=float, default=None)
@click.option("--policy", callback=parse_policy)
@click.option("--method", type=click.Choice(["exact", "bic", "laplace"]), default=None)
@click.option("--fast/--slow", default=True)
@click.option("--standardize/--no-standardize", default=True)
@click.option("--alpha", type=float, default=None)
@click.option("--kernel", callback=parse_kernel)
@click.option("--criticism/--no-criticism", default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--plot/--no-plot", default=True)
@click.pass_context
@handle_errors
def select(ctx, input_path, model, latent_dim, temp, policy, method, fast, standardize, alpha, kernel,
           criticism, out_dir, plot):
    """Leave-one-out selection on the columns of a CSV file."""
    cfg = SelectConfig(**_drop_none(
        input=input_path, model=model, latent_dim=latent_dim, temp=temp, policy=policy, method=method,
        fast=fast, standardize=standardize, alpha=alpha, kernel=kernel, criticism=criticism,
        out_dir=out_dir, plot=plot, n_jobs=ctx.obj["n_jobs"],
    ))
    data = ingest_csv(cfg.input, cfg.standardize)
    family = PpcaFamily(cfg.latent_dim, cfg.alpha) if cfg.model == "ppca" else GaussianLocationFamily()
    report = leave_one_out(
        family, data, cfg.kernel.for_dim(data.d), cfg.policy, cfg.temp, cfg.method, cfg.fast,
        criticism=cfg.criticism,
    )
    rows = report_rows(report, "select", cfg.input.stem, cfg.method.value, data.n, "-")
    emit_results(rows, cfg, cfg.out_dir, cfg.plot)


@cli.command()
@click.option("--model", type=click.Choice(["gaussian", "ppca"]), default="ppca")
@click.option("--n", type=int, default=None)
@click.option("--draws", type=int, default=None)
@click.option("--dim", type=int, default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--kernel", callback=parse_kernel)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--plot/--no-plot", default=True)
@click.pass_context
@handle_errors
def calibrate(ctx, model, n, draws, dim, latent_dim, alpha, seed, kernel, out_dir, plot):
    """Estimate the temperature T by curvature matching under prior simulation."""
    cfg = CalibrateConfig(**_drop_none(
        model=model, n=n, draws=draws, dim=dim, latent_dim=latent_dim, alpha=alpha, seed=seed,
        kernel=kernel, out_dir=out_dir, plot=plot, n_jobs=ctx.obj["n_jobs"],
    ))
    if cfg.model == "ppca":
        sampler = ppca_prior_sampler(cfg.dim, cfg.latent_dim, cfg.alpha)
    else:
        sampler = gaussian_prior_sampler(cfg.dim)
    result = calibrate_t(sampler, cfg.n, cfg.draws, cfg.kernel.for_dim(cfg.dim), seed=cfg.seed, n_jobs=cfg.n_jobs)
    click.echo(f"T-hat median {result.t_median:.6g} (IQR {result.spread:.3g}, {result.excluded} excluded)")
    emit_results(calibration_rows(result, cfg.model, cfg.n), cfg, cfg.out_dir, cfg.plot)


if __name__ == "__main__":
    cli()
