"""
Minimum-NKSD estimation.

This module provides functionality to:
1. Minimise quadratic NKSD objectives in closed form
2. Fit pPCA by QR-retraction gradient descent with Armijo backtracking
3. Take central-difference gradients and Hessians of arbitrary objectives
4. Approximate optima across foregrounds by a single linear-response step
"""

import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg

from stein_select.config import make_rng
from stein_select.errors import DomainError, NumericError
from stein_select.kernel import precompute_pairwise
from stein_select.nksd import quadratic_coeffs
from stein_select.schemas import (
    KernelSpec,
    LinearResponse,
    OptimOptions,
    OptimResult,
    PairwiseStats,
    QuadraticForm,
)
from stein_select.score_models import ExpFamModel, PpcaModel, qf, random_stiefel

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12


def minimize_quadratic(qf_: QuadraticForm) -> OptimResult:
    """theta_N = -A^-1 B / 2 for symmetric positive definite A."""
    m = qf_.dim
    if m == 0:
        return OptimResult(theta_opt=np.zeros(0), objective=qf_.c_scalar, grad_norm=0.0, iterations=0, converged=True)
    a = qf_.a_sym
    try:
        factor = linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError:
        raise NumericError("Quadratic NKSD has an indefinite A; the minimum is undefined")
    theta = -0.5 * linalg.cho_solve(factor, qf_.b)
    objective = qf_.c_scalar - 0.25 * qf_.b @ linalg.cho_solve(factor, qf_.b)
    grad = 2.0 * a @ theta + qf_.b
    return OptimResult(
        theta_opt=theta,
        objective=float(objective),
        grad_norm=float(np.linalg.norm(grad)),
        iterations=0,
        converged=True,
    )


# ---------------------------
# Finite differences
# ---------------------------

def _steps(theta: np.ndarray, rel_step: float) -> np.ndarray:
    return rel_step * (1.0 + np.abs(theta))


def _checked(value: float, theta: np.ndarray) -> float:
    if not np.isfinite(value):
        raise NumericError(f"Objective is not finite at {theta}")
    return value


def gradient_fd(objective: Callable, theta, rel_step: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    grad = np.empty_like(theta)
    for i, h in enumerate(_steps(theta, rel_step)):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (
            _checked(objective(theta + step), theta + step) - _checked(objective(theta - step), theta - step)
        ) / (2.0 * h)
    return grad


def hessian_fd(objective: Callable, theta, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian, symmetrised."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    m = theta.shape[0]
    h = _steps(theta, rel_step)
    f0 = _checked(objective(theta), theta)

    def f(offsets):
        point = theta + offsets
        return _checked(objective(point), point)

    hess = np.empty((m, m))
    for i in range(m):
        e_i = np.zeros(m)
        e_i[i] = h[i]
        hess[i, i] = (f(e_i) - 2.0 * f0 + f(-e_i)) / h[i] ** 2
        for j in range(i + 1, m):
            e_j = np.zeros(m)
            e_j[j] = h[j]
            hess[i, j] = (f(e_i + e_j) - f(e_i - e_j) - f(e_j - e_i) + f(-e_i - e_j)) / (4.0 * h[i] * h[j])
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


# ---------------------------
# Linear response across foregrounds
# ---------------------------

def invert_hessian(hessian) -> Tuple[np.ndarray, float]:
    hessian = np.atleast_2d(np.asarray(hessian, dtype=float))
    condition = float(np.linalg.cond(hessian)) if hessian.size else 1.0
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise NumericError(f"Hessian of the reference objective is singular (condition number {condition:.3e})")
    return linalg.inv(hessian), condition


def approx_optimum(
    ell1_hessian,
    ell2_grad,
    theta_base,
    hessian_inv: Optional[np.ndarray] = None,
    condition_number: Optional[float] = None,
) -> LinearResponse:
    """
    theta(1) ~ theta(0) - (Hessian of l1 at theta(0))^-1 (gradient of l2 at theta(0)).

    Pass ``hessian_inv`` from an earlier response to reuse the inversion across many l2.
    """
    if hessian_inv is None:
        hessian_inv, condition_number = invert_hessian(ell1_hessian)
    theta_base = np.asarray(theta_base, dtype=float).reshape(-1)
    correction = -hessian_inv @ np.asarray(ell2_grad, dtype=float).reshape(-1)
    return LinearResponse(
        theta_base=theta_base,
        hessian_inv=hessian_inv,
        correction=correction,
        condition_number=condition_number if condition_number is not None else float(np.linalg.cond(hessian_inv)),
    )


# ---------------------------
# pPCA
# ---------------------------

def ppca_objective(stats: PairwiseStats, u: np.ndarray, l_diag: np.ndarray, v: float) -> float:
    """
    NKSD-hat of pPCA from pairwise statistics:

        [Tr(U^T S U D^2) + Tr(U^T (2 S / v - 2 Q) U D) + Tr(S) / v^2 - 2 Tr(Q) / v + K''] / K

    with S = X^T K X, Q = X^T K' and D = L^-1 - v^-1 I.
    """
    s_mat = stats.xt_k_x
    q_sym = 0.5 * (stats.xt_kdot + stats.xt_kdot.T)
    delta = 1.0 / l_diag - 1.0 / v
    s_a = np.einsum("da,de,ea->a", u, s_mat, u)
    q_a = np.einsum("da,de,ea->a", u, q_sym, u)
    total = (
        np.sum(delta ** 2 * s_a)
        + np.sum(delta * (2.0 * s_a / v - 2.0 * q_a))
        + np.trace(s_mat) / v ** 2
        - 2.0 * np.trace(q_sym) / v
        + stats.k_ddot
    )
    return float(total / stats.k_bar)


def ppca_gradient(
    stats: PairwiseStats, u: np.ndarray, l_diag: np.ndarray, v: float
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Gradient of ``ppca_objective`` in (U, eta, omega) with l = v + e^eta, v = e^omega.

    The U block is the Riemannian gradient on the Stiefel manifold.
    """
    s_mat = stats.xt_k_x
    q_sym = 0.5 * (stats.xt_kdot + stats.xt_kdot.T)
    delta = 1.0 / l_diag - 1.0 / v
    su = s_mat @ u
    qu = q_sym @ u
    s_a = np.einsum("da,da->a", u, su)
    q_a = np.einsum("da,da->a", u, qu)

    g_u = 2.0 * su * delta ** 2 + (4.0 / v) * su * delta - 4.0 * qu * delta
    sym = u.T @ g_u
    g_u = g_u - u @ (0.5 * (sym + sym.T))

    d_delta = 2.0 * delta * s_a + 2.0 * s_a / v - 2.0 * q_a
    g_eta = d_delta * (-(l_diag - v) / l_diag ** 2)
    explicit_v = np.sum(delta * (-2.0 * s_a / v ** 2)) - 2.0 * np.trace(s_mat) / v ** 3 + 2.0 * np.trace(q_sym) / v ** 2
    g_omega = v * explicit_v + np.sum(d_delta * (-v / l_diag ** 2 + 1.0 / v))
    k_bar = stats.k_bar
    return g_u / k_bar, g_eta / k_bar, float(g_omega / k_bar)


def _descend(stats, u, l_diag, v, opts: OptimOptions):
    eta = np.log(l_diag - v)
    omega = math.log(v)

    def unpack(eta_, omega_):
        v_ = math.exp(omega_)
        return v_ + np.exp(eta_), v_

    f = ppca_objective(stats, u, l_diag, v)
    trace = [f] if opts.record_trace else None
    step = opts.initial_step
    grad_norm = math.inf
    for iteration in range(opts.max_iter):
        l_cur, v_cur = unpack(eta, omega)
        g_u, g_eta, g_omega = ppca_gradient(stats, u, l_cur, v_cur)
        grad_norm = math.sqrt(np.sum(g_u ** 2) + np.sum(g_eta ** 2) + g_omega ** 2)
        if grad_norm <= opts.grad_tol:
            return u, eta, omega, f, grad_norm, iteration, True, trace

        t = step
        while True:
            u_new = qf(u - t * g_u)
            eta_new = eta - t * g_eta
            omega_new = omega - t * g_omega
            with np.errstate(over="ignore", invalid="ignore"):
                l_new, v_new = unpack(eta_new, omega_new)
                f_new = ppca_objective(stats, u_new, l_new, v_new) if np.isfinite(v_new) and v_new > 0 else math.inf
            if np.isfinite(f_new) and f_new <= f - opts.armijo_c * t * grad_norm ** 2:
                break
            t *= opts.shrink
            if t < 1e-20:
                logger.warning(f"Line search stalled after {iteration} iterations (gradient norm {grad_norm:.3e})")
                return u, eta, omega, f, grad_norm, iteration, False, trace
        u, eta, omega, f = u_new, eta_new, omega_new, f_new
        if trace is not None:
            trace.append(f)
        step = 2.0 * t
    return u, eta, omega, f, grad_norm, opts.max_iter, False, trace


def minimize_ppca(
    model: PpcaModel,
    data,
    spec: KernelSpec,
    opts: Optional[OptimOptions] = None,
    stats: Optional[PairwiseStats] = None,
) -> OptimResult:
    """
    Minimum-NKSD pPCA fit.

    The first start is ``model`` itself; the remaining ``n_starts - 1`` replace U with
    random Stiefel points. The best objective wins. The fitted model is returned
    re-anchored at the optimum, so ``theta_opt`` is the origin of its chart.
    """
    opts = opts or OptimOptions()
    x = np.asarray(getattr(data, "values", data), dtype=float)
    if x.shape[1] < model.latent_dim:
        raise DomainError(f"Cannot fit {model.latent_dim} latent dims to {x.shape[1]} columns")
    stats = stats or precompute_pairwise(spec, x)
    rng = make_rng(opts.seed)

    starts = [model.u] + [random_stiefel(model.data_dim, model.latent_dim, rng) for _ in range(opts.n_starts - 1)]
    best = None
    for index, u0 in enumerate(starts):
        run = _descend(stats, u0, model.l_diag, model.v, opts)
        logger.debug(f"pPCA start {index}: objective {run[3]:.6g}, converged {run[6]}")
        if best is None or run[3] < best[3]:
            best = run

    u, eta, omega, f, grad_norm, iterations, converged, trace = best
    v = math.exp(omega)
    fitted = PpcaModel(u, v + np.exp(eta), v, model.alpha)
    if not converged:
        logger.warning(f"pPCA fit did not converge (gradient norm {grad_norm:.3e} after {iterations} iterations)")
    return OptimResult(
        theta_opt=np.zeros(fitted.param_dim),
        objective=f,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        model=fitted,
        trace=trace,
    )


def fit(model, data, spec: KernelSpec, opts: Optional[OptimOptions] = None) -> OptimResult:
    """Minimum-NKSD estimate for any supported model."""
    if isinstance(model, PpcaModel):
        return minimize_ppca(model, data, spec, opts)
    if isinstance(model, ExpFamModel):
        return minimize_quadratic(quadratic_coeffs(model, data, spec))
    raise DomainError(f"No optimiser for {type(model).__name__}")
