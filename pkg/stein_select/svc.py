"""
Stein volume criterion.

log K = log of the integral of exp(-(N/T) NKSD-hat(theta)) against the prior, plus the
background volume (m_B / 2) log(2 pi / N). Three paths are provided: the closed form for
exponential families, the Laplace approximation and its BIC-style truncation. The
alternative criteria used for comparison on synthetic data live here as well.
"""

import logging
import math
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from stein_select.errors import ConfigError, NumericError, UnsupportedConfigurationError
from stein_select.nksd import nksd_objective, quadratic_coeffs
from stein_select.optimize import gradient_fd, minimize_quadratic
from stein_select.schemas import (
    AltScores,
    ConstantPolicy,
    MatchedPolicy,
    PerDimPolicy,
    PerDimSqrtNPolicy,
    PitmanYorPolicy,
    QuadraticForm,
    SvcMethod,
    SvcResult,
    ToyInstance,
)

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-4


def volume(m: float, n: int) -> float:
    """(m / 2) log(2 pi / n)."""
    return 0.5 * m * math.log(2.0 * math.pi / n)


def pitman_yor_rate(policy: PitmanYorPolicy) -> float:
    """D Gamma(theta + 1) / (alpha Gamma(theta + alpha)), the coefficient of n^alpha."""
    log_rate = (
        math.log(policy.d_py)
        + gammaln(policy.theta_py + 1.0)
        - math.log(policy.alpha)
        - gammaln(policy.theta_py + policy.alpha)
    )
    return math.exp(log_rate)


def background_dim(policy, n: int, r_b: int) -> float:
    if n < 1 or r_b < 0:
        raise ConfigError(f"background_dim needs n >= 1 and r_b >= 0, got n={n}, r_b={r_b}")
    if isinstance(policy, ConstantPolicy):
        return float(policy.m_b)
    if isinstance(policy, PerDimPolicy):
        return policy.c_b * r_b
    if isinstance(policy, PerDimSqrtNPolicy):
        return policy.c_b * r_b * math.sqrt(n)
    if isinstance(policy, PitmanYorPolicy):
        m_b = pitman_yor_rate(policy) * n ** policy.alpha
        return m_b * r_b if policy.scale_by_r_b else m_b
    if isinstance(policy, MatchedPolicy):
        raise ConfigError("The matched policy depends on the foreground dimensions; resolve it in the selection driver")
    raise ConfigError(f"Unknown background policy {policy!r}")


def svc_exact_expfam(
    qf: QuadraticForm,
    prior_mean,
    prior_cov,
    n: int,
    temp: float,
    m_b: float,
) -> SvcResult:
    """
    Closed-form Gaussian integral of exp(-(N/T)(theta^T A theta + B^T theta + C))
    against N(prior_mean, prior_cov).
    """
    if temp <= 0:
        raise ConfigError(f"Temperature must be positive, got {temp}")
    m = qf.dim
    background = volume(m_b, n)
    if m == 0:
        fit = -(n / temp) * qf.c_scalar
        return SvcResult(
            log_k=fit + background, fit_term=fit, foreground_volume=0.0, background_volume=background,
            theta_opt=np.zeros(0), method=SvcMethod.EXACT, m_f=0, m_b=m_b,
        )

    prior_mean = np.asarray(prior_mean, dtype=float).reshape(m)
    prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    try:
        prior_factor = linalg.cho_factor(prior_cov, lower=True)
    except linalg.LinAlgError:
        raise NumericError("Prior covariance is not positive definite")
    prior_precision = linalg.cho_solve(prior_factor, np.eye(m))
    a = qf.a_sym
    precision = (2.0 * n / temp) * a + prior_precision
    linear = -(n / temp) * qf.b + prior_precision @ prior_mean
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError:
        raise NumericError(
            f"Combined precision (2N/T)A + prior^-1 is not positive definite at n={n}; A is indefinite"
        )
    log_det_prior = 2.0 * np.sum(np.log(np.diag(prior_factor[0])))
    log_det_precision = 2.0 * np.sum(np.log(np.diag(factor[0])))
    log_k = (
        volume(m_b, n)
        - 0.5 * log_det_prior
        - 0.5 * log_det_precision
        + 0.5 * linear @ linalg.cho_solve(factor, linear)
        - (n / temp) * qf.c_scalar
        - 0.5 * prior_mean @ prior_precision @ prior_mean
    )

    try:
        theta_opt = -0.5 * linalg.solve(a, qf.b, assume_a="sym")
    except linalg.LinAlgError:
        theta_opt = linalg.cho_solve(factor, linear)
    fit = -(n / temp) * float(theta_opt @ a @ theta_opt + qf.b @ theta_opt + qf.c_scalar)
    return SvcResult(
        log_k=float(log_k),
        fit_term=fit,
        foreground_volume=float(log_k) - fit - background,
        background_volume=background,
        theta_opt=theta_opt,
        method=SvcMethod.EXACT,
        m_f=m,
        m_b=m_b,
    )


def svc_laplace(
    model,
    data,
    spec,
    prior_logdensity: Optional[Callable],
    theta_opt,
    hessian_at_opt,
    temp: float,
    m_b: float,
    objective: Optional[Callable] = None,
    check_stationarity: bool = True,
) -> SvcResult:
    """
    Laplace approximation around the minimum-NKSD estimate:

        log K = -(N/T) NKSD(theta_N) + log pi(theta_N) - 1/2 log|det(H / T)|
                + ((m_F + m_B) / 2) log(2 pi / N)

    A Hessian that is not positive definite, or a theta_opt that is not stationary,
    flags the result through ``status`` rather than raising.
    """
    if temp <= 0:
        raise ConfigError(f"Temperature must be positive, got {temp}")
    theta_opt = np.asarray(theta_opt, dtype=float).reshape(-1)
    n = int(np.asarray(getattr(data, "values", data)).shape[0])
    objective = objective or nksd_objective(model, data, spec)
    log_prior = prior_logdensity if prior_logdensity is not None else model.log_prior
    m = theta_opt.shape[0]
    hessian = np.atleast_2d(np.asarray(hessian_at_opt, dtype=float)).reshape(m, m)
    hessian = 0.5 * (hessian + hessian.T)

    status = "ok"
    if m:
        eigvals = np.linalg.eigvalsh(hessian)
        if eigvals.min() <= 0:
            logger.warning(f"Laplace Hessian is not positive definite (smallest eigenvalue {eigvals.min():.3e})")
            status = "non_spd_hessian"
        if check_stationarity and status == "ok":
            grad_norm = float(np.linalg.norm(gradient_fd(objective, theta_opt)))
            if grad_norm > STATIONARITY_TOL:
                logger.warning(f"Laplace expansion point is not stationary (gradient norm {grad_norm:.3e})")
                status = "not_stationary"
        sign, log_det = np.linalg.slogdet(hessian / temp)
        if sign == 0:
            raise NumericError("Laplace Hessian is singular")
    else:
        log_det = 0.0

    value = float(objective(theta_opt))
    fit = -(n / temp) * value
    foreground = float(log_prior(theta_opt)) - 0.5 * log_det + volume(m, n)
    background = volume(m_b, n)
    log_k = fit + foreground + background
    if not np.isfinite(log_k):
        raise NumericError(f"Laplace log K is not finite (fit {fit}, foreground {foreground})")
    return SvcResult(
        log_k=log_k, fit_term=fit, foreground_volume=foreground, background_volume=background,
        theta_opt=theta_opt, hessian=hessian, method=SvcMethod.LAPLACE, m_f=m, m_b=m_b, status=status,
    )


def svc_bic(
    model,
    data,
    spec,
    theta_opt,
    temp: float,
    m_b: float,
    objective: Optional[Callable] = None,
    m_f: Optional[int] = None,
) -> SvcResult:
    """log K = -(N/T) NKSD(theta_N) + ((m_F + m_B) / 2) log(2 pi / N)."""
    if temp <= 0:
        raise ConfigError(f"Temperature must be positive, got {temp}")
    theta_opt = np.asarray(theta_opt, dtype=float).reshape(-1)
    n = int(np.asarray(getattr(data, "values", data)).shape[0])
    objective = objective or nksd_objective(model, data, spec)
    m = theta_opt.shape[0] if m_f is None else m_f
    fit = -(n / temp) * float(objective(theta_opt))
    foreground = volume(m, n)
    background = volume(m_b, n)
    return SvcResult(
        log_k=fit + foreground + background, fit_term=fit, foreground_volume=foreground,
        background_volume=background, theta_opt=theta_opt, method=SvcMethod.BIC, m_f=m, m_b=m_b,
    )


def gaussian_entropy(cov) -> float:
    """Differential entropy 1/2 log det(2 pi e cov)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    sign, log_det = np.linalg.slogdet(2.0 * math.pi * math.e * cov)
    if sign <= 0:
        raise NumericError("Generator covariance is not positive definite")
    return 0.5 * log_det


def alt_scores(instance: ToyInstance, qf: Optional[QuadraticForm] = None) -> AltScores:
    """
    Alternative criteria on a Gaussian-location foreground:

    k_a: foreground marginal likelihood times the background volume
    k_b: the SVC without the background volume
    k_c: like k_a with the empirical KL (cross-entropy minus true entropy) in the exponent
    k_d: background volume times exp(-(N/T) min NKSD-hat), ignoring the foreground volume
    """
    if instance.true_cov is None:
        raise UnsupportedConfigurationError("K^(c) needs the entropy of a known generator")
    model = instance.model
    x = np.asarray(instance.data, dtype=float)
    n = x.shape[0]
    background = volume(instance.m_b, n)

    qf = qf or quadratic_coeffs(model, x, instance.spec)
    exact = svc_exact_expfam(qf, model.prior_mean if model.param_dim else None,
                             model.prior_cov if model.param_dim else None, n, instance.temp, instance.m_b)
    log_marginal = model.log_marginal_likelihood(x)

    min_nksd = minimize_quadratic(qf).objective
    return AltScores(
        k_a=background + log_marginal,
        k_b=exact.log_k - background,
        k_c=background + log_marginal + n * gaussian_entropy(instance.true_cov),
        k_d=background - (n / instance.temp) * min_nksd,
    )
