"""
Normalized kernelized Stein discrepancy estimators.

All estimators are U-statistics over ordered pairs i != j: the diagonal is never
included. Numerator and denominator are accumulated in the same pass over pairs.
"""

import logging
import math
from typing import Callable, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from stein_select import kernel
from stein_select.errors import InputError, InsufficientDataError, KernelContractError
from stein_select.schemas import (
    ForegroundSpec,
    KernelFamily,
    KernelSpec,
    NksdEstimate,
    PairwiseStats,
    QuadraticForm,
)
from stein_select.score_models import ExpFamModel

logger = logging.getLogger(__name__)


def _as_data(data) -> np.ndarray:
    x = np.asarray(getattr(data, "values", data), dtype=float)
    if x.ndim != 2:
        raise InputError(f"Expected an (n, d) data matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError(f"The NKSD estimator needs at least 2 rows, got {x.shape[0]}")
    return x


def stein_kernel(scores_a, scores_b, k, grad_x, grad_y, trace) -> np.ndarray:
    """u over a block of pairs from the two score blocks and the kernel terms."""
    return (
        (scores_a @ scores_b.T) * k
        + np.einsum("id,ijd->ij", scores_a, grad_y)
        + np.einsum("jd,ijd->ij", scores_b, grad_x)
        + trace
    )


def u_pair(model, theta, x, y, spec: KernelSpec) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    s_x = np.atleast_2d(model.score(theta, x))
    s_y = np.atleast_2d(model.score(theta, y))
    terms = kernel.pair_terms(spec, x[None, :], y[None, :])
    return float(stein_kernel(s_x, s_y, *terms)[0, 0])


def _nksd_block(spec, x, scores, block):
    terms = kernel.pair_terms(spec, x[block], x)
    kernel.zero_diagonal(block, *terms)
    u = stein_kernel(scores[block], scores, *terms)
    return math.fsum(u.ravel()), math.fsum(terms[0].ravel())


def nksd_hat(model, theta, data, spec: KernelSpec, n_jobs: int = 1) -> NksdEstimate:
    """Generic U-statistic path: sum of u over i != j divided by the sum of k."""
    x = _as_data(data)
    n, d = x.shape
    scores = np.atleast_2d(model.score(theta, x))
    blocks = list(kernel.iter_blocks(n, d))
    if n_jobs == 1:
        partials = [_nksd_block(spec, x, scores, block) for block in blocks]
    else:
        partials = Parallel(n_jobs=n_jobs)(delayed(_nksd_block)(spec, x, scores, block) for block in blocks)
    pairs = n * (n - 1)
    numerator = math.fsum(p[0] for p in partials) / pairs
    denominator = math.fsum(p[1] for p in partials) / pairs
    return NksdEstimate(value=numerator / denominator, numerator=numerator, denominator=denominator, n=n)


# ---------------------------
# Exponential-family quadratic form
# ---------------------------

def _quadratic_block(model: ExpFamModel, spec, x, jac, lam, block):
    k, grad_x, grad_y, trace = kernel.pair_terms(spec, x[block], x)
    kernel.zero_diagonal(block, k, grad_x, grad_y, trace)
    jac_b, lam_b = jac[block], lam[block]

    weighted = np.einsum("ij,jmd->imd", k, jac)
    a = np.einsum("imd,ind->mn", jac_b, weighted)

    b = (
        np.einsum("jmd,jd->m", jac, k.T @ lam_b)
        + np.einsum("imd,id->m", jac_b, k @ lam)
        + np.einsum("jmd,jd->m", jac, grad_x.sum(axis=0))
        + np.einsum("imd,id->m", jac_b, grad_y.sum(axis=1))
    )

    c = (
        np.einsum("id,id->", lam_b, k @ lam)
        + np.einsum("id,ijd->", lam_b, grad_y)
        + np.einsum("ijd,jd->", grad_x, lam)
        + trace.sum()
    )
    return a, b, float(c), math.fsum(k.ravel())


def quadratic_coeffs(model: ExpFamModel, data, spec: KernelSpec, n_jobs: int = 1) -> QuadraticForm:
    """
    A, B, C with NKSD-hat(theta) = theta^T A theta + B^T theta + C.

    Shares the 1 / sum(k) normalisation across the three coefficients.
    """
    x = _as_data(data)
    n, d = x.shape
    jac = model.t_jacobians(x)
    lam = model.log_lambda_grads(x)
    blocks = list(kernel.iter_blocks(n, d))
    if n_jobs == 1:
        partials = [_quadratic_block(model, spec, x, jac, lam, block) for block in blocks]
    else:
        partials = Parallel(n_jobs=n_jobs)(
            delayed(_quadratic_block)(model, spec, x, jac, lam, block) for block in blocks
        )
    m = model.param_dim
    a = np.zeros((m, m))
    b = np.zeros(m)
    for pa, pb, _, _ in partials:
        a += pa
        b += pb
    k_sum = math.fsum(p[3] for p in partials)
    c = math.fsum(p[2] for p in partials)
    a = a / k_sum
    return QuadraticForm(a=0.5 * (a + a.T), b=b / k_sum, c_scalar=c / k_sum)


def evaluate_quadratic(qf: QuadraticForm, theta) -> float:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return float(theta @ qf.a @ theta + qf.b @ theta + qf.c_scalar)


# ---------------------------
# Affine scores from pairwise statistics
# ---------------------------

def nksd_from_stats(stats: PairwiseStats, m_mat: np.ndarray, m_vec: np.ndarray) -> float:
    """NKSD-hat of the score s(x) = M x + m, from precomputed statistics."""
    total = (
        np.sum((m_mat.T @ m_mat) * stats.xt_k_x)
        + 2.0 * m_vec @ (m_mat @ stats.k_x)
        + (m_vec @ m_vec) * stats.k_bar
        + 2.0 * np.trace(stats.xt_kdot @ m_mat)
        + 2.0 * m_vec @ stats.kdot_sum
        + stats.k_ddot
    )
    return float(total / stats.k_bar)


def nksd_objective(model, data, spec: KernelSpec, stats: Optional[PairwiseStats] = None) -> Callable:
    """
    theta -> NKSD-hat, using the cheapest exact path the model allows.

    Affine scores use pairwise statistics, other exponential families the quadratic
    form, and anything else the generic U-statistic.
    """
    if hasattr(model, "affine_score"):
        stats = stats or kernel.precompute_pairwise(spec, _as_data(data))
        return lambda theta: nksd_from_stats(stats, *model.affine_score(theta))
    if isinstance(model, ExpFamModel):
        qf = quadratic_coeffs(model, data, spec)
        return lambda theta: evaluate_quadratic(qf, theta)
    x = _as_data(data)
    return lambda theta: nksd_hat(model, theta, x, spec).value


# ---------------------------
# Subsystem split
# ---------------------------

def _check_factoring(spec_f: KernelSpec, spec_b: KernelSpec, data_dim: int) -> None:
    if spec_f.family != spec_b.family:
        raise KernelContractError("Foreground and background kernels belong to different families")
    if spec_f.dim + spec_b.dim != data_dim:
        raise KernelContractError(f"Kernel dimensions {spec_f.dim} + {spec_b.dim} do not cover d={data_dim}")
    if spec_f.family == KernelFamily.FACTORED_IMQ:
        if (spec_f.beta, spec_f.c) != (spec_b.beta, spec_b.c):
            raise KernelContractError("Factored IMQ parts must share beta and c")
        if spec_f.exponent != spec_b.exponent:
            raise KernelContractError(
                "Factored IMQ parts must share the exponent beta/d; build them with restrict(keep_exponent=True)"
            )
    elif spec_f.bandwidth != spec_b.bandwidth:
        raise KernelContractError("RBF parts must share the bandwidth")


def nksd_subsystem_split(
    model_f,
    theta_f,
    model_b,
    theta_b,
    data,
    foreground: ForegroundSpec,
    spec_f: KernelSpec,
    spec_b: Optional[KernelSpec],
) -> Tuple[float, float]:
    """
    Foreground and background parts of NKSD-hat under k = k_F k_B.

    Their sum is NKSD-hat of the product model under the product kernel.
    """
    x = _as_data(data)
    n, d = x.shape
    if foreground.data_dim != d:
        raise InputError(f"Foreground defined for d={foreground.data_dim}, data has d={d}")
    f_dims = list(foreground.included_dims)
    b_dims = [i for i in range(d) if i not in foreground.included_dims]
    if not b_dims:
        return nksd_hat(model_f, theta_f, x[:, f_dims], spec_f).value, 0.0
    if spec_b is None:
        raise KernelContractError("A background kernel is required when the background is nonempty")
    _check_factoring(spec_f, spec_b, d)

    x_f, x_b = x[:, f_dims], x[:, b_dims]
    s_f = np.atleast_2d(model_f.score(theta_f, x_f))
    s_b = np.atleast_2d(model_b.score(theta_b, x_b))
    sums = np.zeros(3)
    partials = []
    for block in kernel.iter_blocks(n, d):
        terms_f = kernel.pair_terms(spec_f, x_f[block], x_f)
        terms_b = kernel.pair_terms(spec_b, x_b[block], x_b)
        kernel.zero_diagonal(block, *terms_f, *terms_b)
        u_f = stein_kernel(s_f[block], s_f, *terms_f)
        u_b = stein_kernel(s_b[block], s_b, *terms_b)
        k_f, k_b = terms_f[0], terms_b[0]
        partials.append((
            math.fsum((u_f * k_b).ravel()),
            math.fsum((u_b * k_f).ravel()),
            math.fsum((k_f * k_b).ravel()),
        ))
    for i in range(3):
        sums[i] = math.fsum(p[i] for p in partials)
    return float(sums[0] / sums[2]), float(sums[1] / sums[2])

