"""
Kernel evaluation for the Stein discrepancy.

This module provides functionality to:
1. Evaluate the factored IMQ and RBF kernels with the derivatives the Stein kernel needs
2. Vectorise those terms over row blocks
3. Precompute the pairwise data statistics that make repeated NKSD evaluation cheap
"""

import logging
import math
from typing import Iterator, Tuple

import numpy as np
from joblib import Parallel, delayed

from stein_select import config
from stein_select.errors import InputError, InsufficientDataError
from stein_select.schemas import KernelFamily, KernelSpec, PairwiseStats

logger = logging.getLogger(__name__)


def pair_terms(
    spec: KernelSpec, xa: np.ndarray, xb: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Kernel terms for every pair (xa[i], xb[j]).

    Returns:
        k (a, b), grad_x (a, b, d), grad_y (a, b, d), trace_cross (a, b)
    """
    if xa.shape[-1] != spec.dim or xb.shape[-1] != spec.dim:
        raise InputError(
            f"Kernel of dimension {spec.dim} applied to points of dimension "
            f"{xa.shape[-1]} and {xb.shape[-1]}"
        )
    diff = xa[:, None, :] - xb[None, :, :]

    if spec.family == KernelFamily.FACTORED_IMQ:
        e = spec.exponent
        c2 = spec.c ** 2
        base = c2 + diff ** 2
        k = np.exp(e * np.log(base).sum(axis=-1))
        g = 2.0 * e * diff / base
        grad_x = k[..., None] * g
        curvature = g ** 2 + 2.0 * e * (c2 - diff ** 2) / base ** 2
        trace = -k * curvature.sum(axis=-1)
    else:
        h2 = spec.bandwidth ** 2
        sq = (diff ** 2).sum(axis=-1)
        k = np.exp(-sq / (2.0 * h2))
        grad_x = -k[..., None] * diff / h2
        trace = k * (spec.dim / h2 - sq / h2 ** 2)

    # stationary kernels: d/dy k(x - y) = -d/dx k(x - y)
    return k, grad_x, -grad_x, trace


def _single(spec: KernelSpec, x, y):
    xa = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    xb = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    return pair_terms(spec, xa, xb)


def evaluate(spec: KernelSpec, x, y) -> float:
    return float(_single(spec, x, y)[0][0, 0])


def evaluate_grad_x(spec: KernelSpec, x, y) -> np.ndarray:
    return _single(spec, x, y)[1][0, 0]


def evaluate_grad_y(spec: KernelSpec, x, y) -> np.ndarray:
    return _single(spec, x, y)[2][0, 0]


def evaluate_trace_cross(spec: KernelSpec, x, y) -> float:
    """Sum over b of d^2 k / dx_b dy_b."""
    return float(_single(spec, x, y)[3][0, 0])


# ---------------------------
# Pair-sum blocking
# ---------------------------

def block_rows(n: int, d: int) -> int:
    if config.BLOCK_ROWS > 0:
        return config.BLOCK_ROWS
    return max(1, min(n, config.BLOCK_ELEMENTS // max(1, n * d)))


def iter_blocks(n: int, d: int) -> Iterator[slice]:
    """Fixed row partition; independent of the worker count."""
    step = block_rows(n, d)
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def zero_diagonal(block: slice, *arrays: np.ndarray) -> None:
    """Drop the i == j terms of a (rows, n, ...) block in place."""
    rows = np.arange(block.stop - block.start)
    cols = np.arange(block.start, block.stop)
    for array in arrays:
        array[rows, cols] = 0.0


def _stats_block(spec: KernelSpec, x: np.ndarray, block: slice):
    k, grad_x, _, trace = pair_terms(spec, x[block], x)
    zero_diagonal(block, k, grad_x, trace)
    k_times_x = k @ x
    return (
        math.fsum(k.ravel()),
        x[block].T @ k_times_x,
        k_times_x.sum(axis=0),
        grad_x.sum(axis=0),
        math.fsum(trace.ravel()),
    )


def precompute_pairwise(spec: KernelSpec, data: np.ndarray, n_jobs: int = 1) -> PairwiseStats:
    """
    Pairwise statistics over ordered pairs i != j.

    Blocks of rows are reduced in a fixed order, so the result does not depend on
    ``n_jobs``.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise InputError(f"Expected an (n, d) data matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"Pairwise statistics need at least 2 rows, got {n}")
    if d != spec.dim:
        raise InputError(f"Kernel of dimension {spec.dim} applied to data of dimension {d}")

    blocks = list(iter_blocks(n, d))
    if n_jobs == 1:
        partials = [_stats_block(spec, x, block) for block in blocks]
    else:
        partials = Parallel(n_jobs=n_jobs)(delayed(_stats_block)(spec, x, block) for block in blocks)

    xt_k_x = np.zeros((d, d))
    k_x = np.zeros(d)
    kdot = np.zeros((n, d))
    for _, xkx, kx, kd, _ in partials:
        xt_k_x += xkx
        k_x += kx
        kdot += kd

    stats = PairwiseStats(
        k_bar=math.fsum(p[0] for p in partials),
        xt_k_x=0.5 * (xt_k_x + xt_k_x.T),
        xt_kdot=x.T @ kdot,
        k_ddot=math.fsum(p[4] for p in partials),
        n=n,
        k_x=k_x,
        kdot_sum=kdot.sum(axis=0),
    )
    logger.debug(f"Pairwise statistics for n={n}, d={d} over {len(blocks)} blocks")
    return stats
