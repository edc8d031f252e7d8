"""
Temperature calibration.

T-hat matches the curvature of the NKSD posterior to that of the standard posterior:

    T-hat = (|det Hessian NKSD-hat| / |det Hessian mean NLL|)^(1/m)

evaluated at a parameter drawn from the prior, on data simulated from the model there.
"""

import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from stein_select.config import make_rng, spawn_seeds
from stein_select.errors import DomainError, NumericError, SteinSelectError
from stein_select.nksd import nksd_objective, quadratic_coeffs
from stein_select.optimize import hessian_fd
from stein_select.schemas import CalibrationResult, KernelSpec
from stein_select.score_models import ExpFamModel, GaussianLocationModel, PpcaModel

logger = logging.getLogger(__name__)

PriorSampler = Callable[[np.random.Generator], Tuple[object, np.ndarray]]


def t_hat_statistic(h_nksd, h_nll) -> float:
    h_nksd = np.atleast_2d(np.asarray(h_nksd, dtype=float))
    h_nll = np.atleast_2d(np.asarray(h_nll, dtype=float))
    if h_nksd.shape != h_nll.shape or h_nksd.shape[0] != h_nksd.shape[1]:
        raise DomainError(f"Hessian shapes differ: {h_nksd.shape} vs {h_nll.shape}")
    m = h_nksd.shape[0]
    if m == 0:
        raise DomainError("T-hat is undefined for a model without parameters")
    sign_nksd, log_nksd = np.linalg.slogdet(h_nksd)
    sign_nll, log_nll = np.linalg.slogdet(h_nll)
    if sign_nksd == 0 or sign_nll == 0 or not np.isfinite(log_nksd) or not np.isfinite(log_nll):
        raise NumericError("Singular Hessian in the T-hat ratio")
    return math.exp((log_nksd - log_nll) / m)


def gaussian_prior_sampler(dim: int = 1, prior_var: float = 10.0) -> PriorSampler:
    model = GaussianLocationModel(np.eye(dim), np.zeros(dim), prior_var * np.eye(dim))

    def draw(rng):
        return model, model.prior_sample(rng)

    return draw


def ppca_prior_sampler(dim: int, latent_dim: int, alpha: float = 1.0) -> PriorSampler:
    def draw(rng):
        model = PpcaModel.prior_sample(dim, latent_dim, alpha, rng)
        return model, np.zeros(model.param_dim)

    return draw


def _nksd_hessian(model, theta, x, spec) -> np.ndarray:
    if isinstance(model, ExpFamModel):
        return 2.0 * quadratic_coeffs(model, x, spec).a_sym
    return hessian_fd(nksd_objective(model, x, spec), theta)


def _nll_hessian(model, theta, x) -> np.ndarray:
    if hasattr(model, "nll_hessian"):
        return model.nll_hessian(theta, x)
    return hessian_fd(lambda t: model.mean_nll(t, x), theta)


def _draw(prior_sampler: PriorSampler, n: int, spec: KernelSpec, seed_seq, index: int) -> Optional[float]:
    rng = make_rng(seed_seq)
    try:
        model, theta = prior_sampler(rng)
        x = model.sample(theta, n, rng)
        value = t_hat_statistic(_nksd_hessian(model, theta, x, spec), _nll_hessian(model, theta, x))
    except SteinSelectError as e:
        logger.warning(f"Calibration draw {index} excluded: {e}")
        return None
    logger.debug(f"Calibration draw {index}: T-hat {value:.6g}")
    return value


def calibrate_t(prior_sampler: PriorSampler, n: int, draws: int, spec: KernelSpec,
                seed: int = 0, n_jobs: int = 1) -> CalibrationResult:
    """
    One T-hat per prior draw; draws with a singular Hessian are excluded and counted.
    Each draw gets its own child seed, so results do not depend on ``n_jobs``.
    """
    if draws < 1:
        raise DomainError(f"draws must be at least 1, got {draws}")
    if n < 2:
        raise DomainError(f"n must be at least 2, got {n}")
    seeds = spawn_seeds(seed, draws)
    if n_jobs == 1:
        values = [_draw(prior_sampler, n, spec, s, i) for i, s in enumerate(seeds)]
    else:
        values = Parallel(n_jobs=n_jobs)(delayed(_draw)(prior_sampler, n, spec, s, i) for i, s in enumerate(seeds))

    kept = [v for v in values if v is not None]
    if not kept:
        raise NumericError(f"All {draws} calibration draws were excluded")
    q25, q75 = np.percentile(kept, [25, 75])
    result = CalibrationResult(
        t_hat_samples=kept,
        t_median=float(np.median(kept)),
        n_used=len(kept),
        excluded=draws - len(kept),
        spread=float(q75 - q25),
    )
    logger.info(f"T-hat median {result.t_median:.4g} over {result.n_used} draws ({result.excluded} excluded)")
    return result
