import itertools

import numpy as np
import pytest

from stein_select import kernel
from stein_select.errors import InsufficientDataError, KernelContractError
from stein_select.nksd import (
    evaluate_quadratic,
    nksd_from_stats,
    nksd_hat,
    nksd_objective,
    nksd_subsystem_split,
    quadratic_coeffs,
    u_pair,
)
from stein_select.schemas import ForegroundSpec
from stein_select.score_models import GaussianLocationModel, PpcaModel, ProductModel, random_stiefel


def _naive_u(model, theta, x, y, spec):
    s_x, s_y = model.score(theta, x), model.score(theta, y)
    k = kernel.evaluate(spec, x, y)
    return (
        s_x @ s_y * k
        + s_x @ kernel.evaluate_grad_y(spec, x, y)
        + s_y @ kernel.evaluate_grad_x(spec, x, y)
        + kernel.evaluate_trace_cross(spec, x, y)
    )


def test_u_pair_hand_value(rbf):
    model = GaussianLocationModel(np.eye(1))
    assert u_pair(model, np.zeros(1), [0.0], [0.0], rbf(1)) == pytest.approx(1.0)


def test_u_pair_symmetric_and_matches_naive(imq, rng):
    model = GaussianLocationModel(np.array([[1.0, 0.3], [0.3, 2.0]]))
    spec = imq(2)
    for _ in range(20):
        theta, x, y = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        value = u_pair(model, theta, x, y, spec)
        assert value == pytest.approx(u_pair(model, theta, y, x, spec), rel=1e-12, abs=1e-14)
        assert value == pytest.approx(_naive_u(model, theta, x, y, spec), rel=1e-12, abs=1e-14)


def test_nksd_hat_matches_double_loop(imq, rng):
    model = GaussianLocationModel(np.eye(2))
    spec = imq(2)
    x = rng.normal(size=(8, 2))
    theta = rng.normal(size=2)
    num = sum(_naive_u(model, theta, x[i], x[j], spec) for i, j in itertools.permutations(range(8), 2))
    den = sum(kernel.evaluate(spec, x[i], x[j]) for i, j in itertools.permutations(range(8), 2))
    estimate = nksd_hat(model, theta, x, spec)
    assert estimate.value == pytest.approx(num / den, rel=1e-10)
    assert estimate.denominator > 0
    assert estimate.n == 8


def test_nksd_hat_needs_two_rows(imq):
    with pytest.raises(InsufficientDataError):
        nksd_hat(GaussianLocationModel(np.eye(2)), np.zeros(2), np.zeros((1, 2)), imq(2))


@pytest.mark.parametrize("family", ["imq", "rbf"])
def test_quadratic_form_matches_generic_path(family, imq, rbf, rng):
    spec = imq(2) if family == "imq" else rbf(2)
    model = GaussianLocationModel(np.array([[1.2, -0.2], [-0.2, 0.7]]))
    x = rng.normal(size=(60, 2))
    qf = quadratic_coeffs(model, x, spec)
    np.testing.assert_allclose(qf.a, qf.a.T, atol=1e-10)
    for theta in rng.normal(size=(20, 2)):
        assert evaluate_quadratic(qf, theta) == pytest.approx(nksd_hat(model, theta, x, spec).value, rel=1e-10, abs=1e-12)
    assert qf.c_scalar == pytest.approx(nksd_hat(model, np.zeros(2), x, spec).value, rel=1e-10, abs=1e-12)


def test_statistics_path_matches_generic_path(imq, rng):
    spec = imq(5)
    u = random_stiefel(5, 2, rng)
    model = PpcaModel(u, np.array([3.0, 2.0]), 0.8)
    x = rng.normal(size=(50, 5))
    stats = kernel.precompute_pairwise(spec, x)
    objective = nksd_objective(model, x, spec, stats=stats)
    for theta in 0.2 * rng.normal(size=(5, model.param_dim)):
        expected = nksd_hat(model, theta, x, spec).value
        assert objective(theta) == pytest.approx(expected, rel=1e-9, abs=1e-12)
        assert nksd_from_stats(stats, *model.affine_score(theta)) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_permutation_invariance(imq, rng):
    model = GaussianLocationModel(np.eye(3))
    spec = imq(3)
    x = rng.normal(size=(30, 3))
    theta = rng.normal(size=3)
    a = nksd_hat(model, theta, x, spec).value
    b = nksd_hat(model, theta, x[rng.permutation(30)], spec).value
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_well_specified_mean_is_near_zero(rbf):
    model = GaussianLocationModel(np.eye(2))
    values = []
    for seed in range(40):
        x = np.random.default_rng(seed).normal(size=(200, 2))
        values.append(nksd_hat(model, np.zeros(2), x, rbf(2)).value)
    values = np.array(values)
    assert abs(values.mean()) < 3 * values.std(ddof=1) / np.sqrt(len(values))


def test_misspecified_mean_is_positive(rbf):
    model = GaussianLocationModel(np.eye(2))
    values = []
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(300, 2)) * np.sqrt([1.0, 0.5])
        values.append(nksd_hat(model, np.zeros(2), x, rbf(2)).value)
    assert np.mean(values) > 0


def _product_setup(imq, rng):
    spec = imq(3, beta=-0.4)
    fg = ForegroundSpec(included_dims=(0, 2), data_dim=3)
    spec_f = spec.restrict([0, 2], keep_exponent=True)
    spec_b = spec.restrict([1], keep_exponent=True)
    model_f = GaussianLocationModel(np.array([[1.0, 0.4], [0.4, 1.5]]))
    model_b = GaussianLocationModel(np.array([[0.6]]))
    x = rng.normal(size=(40, 3))
    return spec, fg, spec_f, spec_b, model_f, model_b, x


def test_subsystem_split_sums_to_product_estimate(imq, rng):
    spec, fg, spec_f, spec_b, model_f, model_b, x = _product_setup(imq, rng)
    theta_f, theta_b = rng.normal(size=2), rng.normal(size=1)
    part_f, part_b = nksd_subsystem_split(model_f, theta_f, model_b, theta_b, x, fg, spec_f, spec_b)
    product = ProductModel(model_f, model_b, fg)
    full = nksd_hat(product, np.concatenate([theta_f, theta_b]), x, spec).value
    assert part_f + part_b == pytest.approx(full, rel=1e-10, abs=1e-12)


def test_subsystem_split_rejects_non_factoring_kernels(imq, rng):
    spec, fg, spec_f, _, model_f, model_b, x = _product_setup(imq, rng)
    with pytest.raises(KernelContractError):
        nksd_subsystem_split(model_f, np.zeros(2), model_b, np.zeros(1), x, fg, spec_f, spec.restrict([1]))


def test_subsystem_split_full_foreground(imq, rng):
    model = GaussianLocationModel(np.eye(2))
    x = rng.normal(size=(20, 2))
    theta = rng.normal(size=2)
    part_f, part_b = nksd_subsystem_split(model, theta, None, None, x, ForegroundSpec.full(2), imq(2), None)
    assert part_b == 0.0
    assert part_f == pytest.approx(nksd_hat(model, theta, x, imq(2)).value)


def _nksd_at_truth(scale, n, seeds, rbf):
    model = GaussianLocationModel(np.eye(1))
    return np.array([
        nksd_hat(model, np.zeros(1), np.random.default_rng(seed).normal(size=(n, 1)) * scale, rbf(1)).value
        for seed in seeds
    ])


@pytest.mark.slow
def test_convergence_rate_depends_on_specification(rbf):
    grid = [100, 200, 400, 800, 1600]
    seeds = range(50)
    well = [np.mean(np.abs(_nksd_at_truth(1.0, n, seeds, rbf))) for n in grid]
    mis = [np.std(_nksd_at_truth(np.sqrt(0.5), n, seeds, rbf), ddof=1) for n in grid]
    assert np.polyfit(np.log(grid), np.log(well), 1)[0] == pytest.approx(-1.0, abs=0.3)
    assert np.polyfit(np.log(grid), np.log(mis), 1)[0] == pytest.approx(-0.5, abs=0.3)
