import math

import numpy as np
import pytest

from stein_select.calibrate import calibrate_t, gaussian_prior_sampler, ppca_prior_sampler, t_hat_statistic
from stein_select.errors import DomainError, NumericError
from stein_select.schemas import KernelFamily, KernelSpec


def test_t_hat_scaling():
    h = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert t_hat_statistic(3.0 * h, h) == pytest.approx(3.0)
    assert t_hat_statistic([[6.0]], [[2.0]]) == pytest.approx(3.0)
    assert t_hat_statistic(np.diag([4.0, 1.0]), np.eye(2)) == pytest.approx(2.0)


def test_t_hat_errors():
    with pytest.raises(NumericError):
        t_hat_statistic(np.diag([1.0, 0.0]), np.eye(2))
    with pytest.raises(DomainError):
        t_hat_statistic(np.eye(2), np.eye(3))
    with pytest.raises(DomainError):
        t_hat_statistic(np.zeros((0, 0)), np.zeros((0, 0)))


def test_gaussian_calibration(rbf):
    result = calibrate_t(gaussian_prior_sampler(), 200, 5, rbf(1), seed=7)
    assert result.n_used == 5
    assert result.excluded == 0
    assert result.t_median > 0
    assert result.t_median == pytest.approx(float(np.median(result.t_hat_samples)))
    assert result.spread >= 0


def test_calibration_is_independent_of_workers(rbf):
    serial = calibrate_t(gaussian_prior_sampler(), 100, 4, rbf(1), seed=3, n_jobs=1)
    parallel = calibrate_t(gaussian_prior_sampler(), 100, 4, rbf(1), seed=3, n_jobs=2)
    assert serial.t_hat_samples == parallel.t_hat_samples


def test_calibration_counts_excluded_draws(rbf):
    calls = []
    base = gaussian_prior_sampler()

    def sampler(rng):
        calls.append(None)
        if len(calls) % 2 == 0:
            raise NumericError("singular draw")
        return base(rng)

    result = calibrate_t(sampler, 50, 4, rbf(1))
    assert result.n_used == 2
    assert result.excluded == 2


def test_calibration_fails_when_every_draw_is_excluded(rbf):
    def sampler(rng):
        raise NumericError("singular draw")

    with pytest.raises(NumericError):
        calibrate_t(sampler, 50, 3, rbf(1))


def test_calibration_validates_arguments(rbf):
    with pytest.raises(DomainError):
        calibrate_t(gaussian_prior_sampler(), 50, 0, rbf(1))
    with pytest.raises(DomainError):
        calibrate_t(gaussian_prior_sampler(), 1, 3, rbf(1))


@pytest.mark.slow
def test_ppca_calibration_order_of_magnitude():
    spec = KernelSpec(family=KernelFamily.FACTORED_IMQ, dim=6)
    result = calibrate_t(ppca_prior_sampler(6, 2), 500, 3, spec, seed=0)
    assert result.n_used >= 1
    assert 0.005 <= result.t_median <= 0.5
    assert math.isfinite(result.spread)


@pytest.mark.slow
def test_ppca_calibration_matches_reported_scale():
    spec = KernelSpec(family=KernelFamily.FACTORED_IMQ, dim=6)
    result = calibrate_t(ppca_prior_sampler(6, 2), 2000, 10, spec, seed=0)
    assert 0.01 <= result.t_median <= 0.25
