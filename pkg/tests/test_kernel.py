import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from stein_select import config, kernel
from stein_select.errors import InputError, InsufficientDataError
from stein_select.schemas import KernelFamily, KernelSpec


def _fd_grad_x(spec, x, y, h=1e-5):
    grad = np.zeros_like(x)
    for b in range(x.shape[0]):
        e = np.zeros_like(x)
        e[b] = h
        grad[b] = (kernel.evaluate(spec, x + e, y) - kernel.evaluate(spec, x - e, y)) / (2 * h)
    return grad


def _fd_trace(spec, x, y, h=1e-4):
    total = 0.0
    for b in range(x.shape[0]):
        e = np.zeros_like(x)
        e[b] = h
        total += (
            kernel.evaluate(spec, x + e, y + e)
            - kernel.evaluate(spec, x + e, y - e)
            - kernel.evaluate(spec, x - e, y + e)
            + kernel.evaluate(spec, x - e, y - e)
        ) / (4 * h * h)
    return total


def test_known_values(imq, rbf):
    assert kernel.evaluate(imq(2), [0.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0)
    assert kernel.evaluate(imq(1), [0.0], [1.0]) == pytest.approx(2 ** -0.5, abs=1e-5)
    assert kernel.evaluate(rbf(2), [0.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0)
    assert kernel.evaluate_trace_cross(rbf(1), [0.0], [0.0]) == pytest.approx(1.0)


@pytest.mark.parametrize("family", ["imq", "rbf"])
def test_derivatives_match_finite_differences(family, imq, rbf, rng):
    spec = imq(3, beta=-0.3, c=1.3) if family == "imq" else rbf(3, bandwidth=1.7)
    for _ in range(5):
        x, y = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(kernel.evaluate_grad_x(spec, x, y), _fd_grad_x(spec, x, y), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(kernel.evaluate_grad_y(spec, x, y), kernel.evaluate_grad_x(spec, y, x), atol=1e-12)
        assert kernel.evaluate_trace_cross(spec, x, y) == pytest.approx(_fd_trace(spec, x, y), rel=1e-5, abs=1e-7)


def test_gradient_vanishes_at_zero_distance(imq, rbf):
    for spec in (imq(2), rbf(2)):
        np.testing.assert_array_equal(kernel.evaluate_grad_x(spec, [0.3, -1.0], [0.3, -1.0]), 0.0)


def test_symmetry_and_positivity(imq, rbf, rng):
    x = rng.normal(size=(200, 2)) * 3
    y = rng.normal(size=(200, 2)) * 3
    for spec in (imq(2), rbf(2, bandwidth=0.5)):
        forward = np.array([kernel.evaluate(spec, a, b) for a, b in zip(x, y)])
        backward = np.array([kernel.evaluate(spec, b, a) for a, b in zip(x, y)])
        np.testing.assert_array_equal(forward, backward)
        assert np.all(forward > 0)


def test_factored_imq_splits_exactly(imq, rng):
    spec = imq(4, beta=-0.4, c=0.8)
    split = [0, 2]
    rest = [1, 3]
    part_a = spec.restrict(split, keep_exponent=True)
    part_b = spec.restrict(rest, keep_exponent=True)
    for _ in range(20):
        x, y = rng.normal(size=4), rng.normal(size=4)
        full = kernel.evaluate(spec, x, y)
        product = kernel.evaluate(part_a, x[split], y[split]) * kernel.evaluate(part_b, x[rest], y[rest])
        assert full == pytest.approx(product, rel=1e-12)


def test_restrict_uses_own_exponent_by_default(imq):
    spec = imq(4)
    sub = spec.restrict([0, 1, 2])
    assert sub.dim == 3
    assert sub.exponent == pytest.approx(-0.5 / 3)
    assert spec.restrict([0, 1, 2], keep_exponent=True).exponent == pytest.approx(-0.5 / 4)


def test_dimension_mismatch(imq):
    with pytest.raises(InputError):
        kernel.evaluate(imq(2), [0.0], [0.0, 1.0])


def test_invalid_hyperparameters():
    with pytest.raises(ValidationError):
        KernelSpec(family=KernelFamily.FACTORED_IMQ, dim=2, beta=0.0)
    with pytest.raises(ValidationError):
        KernelSpec(family=KernelFamily.RBF, dim=2, bandwidth=-1.0)


def test_identical_rows_k_bar(imq):
    stats = kernel.precompute_pairwise(imq(2), np.zeros((2, 2)))
    assert stats.k_bar == pytest.approx(2.0)


def test_pairwise_statistics_match_double_loop(imq, rng):
    spec = imq(2)
    x = rng.normal(size=(5, 2))
    stats = kernel.precompute_pairwise(spec, x)

    k_bar, xkx, k_ddot = 0.0, np.zeros((2, 2)), 0.0
    kdot = np.zeros((5, 2))
    for i, j in itertools.permutations(range(5), 2):
        k = kernel.evaluate(spec, x[i], x[j])
        k_bar += k
        xkx += k * np.outer(x[i], x[j])
        kdot[j] += kernel.evaluate_grad_x(spec, x[i], x[j])
        k_ddot += kernel.evaluate_trace_cross(spec, x[i], x[j])

    assert stats.k_bar == pytest.approx(k_bar, rel=1e-12)
    np.testing.assert_allclose(stats.xt_k_x, xkx, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(stats.xt_kdot, x.T @ kdot, rtol=1e-10, atol=1e-13)
    assert stats.k_ddot == pytest.approx(k_ddot, rel=1e-12, abs=1e-12)


def test_permutation_and_blocking_invariance(imq, rng, monkeypatch):
    spec = imq(3)
    x = rng.normal(size=(40, 3))
    base = kernel.precompute_pairwise(spec, x)
    permuted = kernel.precompute_pairwise(spec, x[rng.permutation(40)])
    monkeypatch.setattr(config, "BLOCK_ROWS", 7)
    blocked = kernel.precompute_pairwise(spec, x)
    for other in (permuted, blocked):
        assert other.k_bar == pytest.approx(base.k_bar, rel=1e-12)
        assert other.k_ddot == pytest.approx(base.k_ddot, rel=1e-12, abs=1e-10)
        np.testing.assert_allclose(other.xt_k_x, base.xt_k_x, rtol=1e-12, atol=1e-10)


def test_pairwise_needs_two_rows(imq):
    with pytest.raises(InsufficientDataError):
        kernel.precompute_pairwise(imq(2), np.zeros((1, 2)))
