"""
Parametric families evaluated through their Stein scores.

Every model exposes ``score(theta, x)`` (the gradient in x of log q(x | theta)),
``score_dtheta``, ``param_dim`` and ``foreground_dim``. Models with a score affine in x
also expose ``affine_score(theta) -> (M, m)`` with s(x) = M x + m, which lets the NKSD
be evaluated from precomputed pairwise statistics.
"""

import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats
from scipy.special import gammaln

from stein_select.errors import DomainError, InputError, NumericError

logger = logging.getLogger(__name__)

FD_STEP = 1e-4


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
        raise NumericError(f"{what} is not positive definite (smallest eigenvalue {eigs.min():.3e})")


def _spd_inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    factor = _cholesky(matrix, what)
    inverse = linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def _rows(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def qf(a: np.ndarray) -> np.ndarray:
    """Q factor of a thin QR with the sign convention diag(R) > 0."""
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def random_stiefel(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return qf(rng.standard_normal((d, k)))


# ---------------------------
# Exponential families
# ---------------------------

class ExpFamModel:
    """
    q(x | theta) = lambda(x) exp(theta^T t(x) - kappa(theta)).

    The score log_lambda_grad(x) + t_jacobian(x)^T theta is affine in theta.
    """

    def __init__(
        self,
        t_jacobian: Callable[[np.ndarray], np.ndarray],
        log_lambda_grad: Callable[[np.ndarray], np.ndarray],
        m_f: int,
        data_dim: int,
        prior_mean: Optional[np.ndarray] = None,
        prior_cov: Optional[np.ndarray] = None,
    ):
        self._t_jacobian = t_jacobian
        self._log_lambda_grad = log_lambda_grad
        self.m_f = int(m_f)
        self.data_dim = int(data_dim)
        self.prior_mean = None if prior_mean is None else np.asarray(prior_mean, dtype=float)
        self.prior_cov = None if prior_cov is None else np.asarray(prior_cov, dtype=float)
        if self.prior_cov is not None:
            _cholesky(self.prior_cov, "Prior covariance")

    @property
    def param_dim(self) -> int:
        return self.m_f

    def t_jacobians(self, x: np.ndarray) -> np.ndarray:
        """(n, m_F, d) stack of the Jacobians of t at the rows of x."""
        return np.stack([np.asarray(self._t_jacobian(row), dtype=float).reshape(self.m_f, self.data_dim) for row in x])

    def log_lambda_grads(self, x: np.ndarray) -> np.ndarray:
        return np.stack([np.asarray(self._log_lambda_grad(row), dtype=float).reshape(self.data_dim) for row in x])

    def _check(self, theta, x):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.param_dim:
            raise InputError(f"Expected {self.param_dim} parameters, got {theta.shape[0]}")
        if x.shape[1] != self.data_dim:
            raise InputError(f"Model of dimension {self.data_dim} applied to points of dimension {x.shape[1]}")
        return theta

    def score(self, theta, x) -> np.ndarray:
        rows, single = _rows(x)
        theta = self._check(theta, rows)
        s = self.log_lambda_grads(rows) + np.einsum("nmd,m->nd", self.t_jacobians(rows), theta)
        return s[0] if single else s

    def score_dtheta(self, theta, x) -> np.ndarray:
        rows, single = _rows(x)
        self._check(theta, rows)
        jac = np.transpose(self.t_jacobians(rows), (0, 2, 1))
        return jac[0] if single else jac

    def log_prior(self, theta) -> float:
        if self.param_dim == 0:
            return 0.0
        if self.prior_mean is None or self.prior_cov is None:
            raise InputError("Model has no prior")
        return float(stats.multivariate_normal.logpdf(np.asarray(theta, dtype=float), self.prior_mean, self.prior_cov))

    def foreground_dim(self, subset_size: int) -> int:
        return self.m_f


class GaussianLocationModel(ExpFamModel):
    """
    N(x | theta, sigma) with a Gaussian prior N(prior_mean, prior_cov) on theta.

    With ``fixed_mean`` the mean is not a parameter and the model has m_F = 0.
    """

    def __init__(
        self,
        sigma: np.ndarray,
        prior_mean: Optional[np.ndarray] = None,
        prior_cov: Optional[np.ndarray] = None,
        fixed_mean: Optional[np.ndarray] = None,
    ):
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        d = sigma.shape[0]
        if sigma.shape != (d, d) or not np.allclose(sigma, sigma.T):
            raise InputError(f"sigma must be a symmetric square matrix, got shape {sigma.shape}")
        self.sigma = sigma
        self.precision = _spd_inverse(sigma, "Model covariance")
        self.fixed_mean = None if fixed_mean is None else np.asarray(fixed_mean, dtype=float).reshape(d)
        m_f = 0 if self.fixed_mean is not None else d
        if self.fixed_mean is None:
            prior_mean = np.zeros(d) if prior_mean is None else prior_mean
            prior_cov = np.eye(d) if prior_cov is None else np.atleast_2d(prior_cov)
        super().__init__(None, None, m_f, d, prior_mean, prior_cov)

    def t_jacobians(self, x: np.ndarray) -> np.ndarray:
        if self.fixed_mean is not None:
            return np.zeros((x.shape[0], 0, self.data_dim))
        return np.broadcast_to(self.precision, (x.shape[0], self.data_dim, self.data_dim))

    def log_lambda_grads(self, x: np.ndarray) -> np.ndarray:
        centre = self.fixed_mean if self.fixed_mean is not None else 0.0
        return -(x - centre) @ self.precision

    def mean(self, theta) -> np.ndarray:
        if self.fixed_mean is not None:
            return self.fixed_mean
        return np.asarray(theta, dtype=float).reshape(self.data_dim)

    def affine_score(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        return -self.precision, self.precision @ self.mean(theta)

    def marginal_affine_score(self, theta, dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        dims = list(dims)
        precision = _spd_inverse(self.sigma[np.ix_(dims, dims)], "Marginal covariance")
        return -precision, precision @ self.mean(theta)[dims]

    def project(self, theta, dims: Sequence[int]) -> Tuple["GaussianLocationModel", np.ndarray]:
        """The marginal model on ``dims`` and its native parameters."""
        dims = list(dims)
        sigma = self.sigma[np.ix_(dims, dims)]
        if self.fixed_mean is not None:
            return GaussianLocationModel(sigma, fixed_mean=self.fixed_mean[dims]), np.zeros(0)
        sub = GaussianLocationModel(sigma, self.prior_mean[dims], self.prior_cov[np.ix_(dims, dims)])
        return sub, self.mean(theta)[dims]

    def log_density(self, theta, x) -> np.ndarray:
        rows, _ = _rows(x)
        return np.atleast_1d(stats.multivariate_normal.logpdf(rows, self.mean(theta), self.sigma))

    def mean_nll(self, theta, x) -> float:
        return -float(np.mean(self.log_density(theta, x)))

    def nll_hessian(self, theta, x) -> np.ndarray:
        if self.fixed_mean is not None:
            return np.zeros((0, 0))
        return self.precision.copy()

    def log_marginal_likelihood(self, x) -> float:
        """log of the integral of prod_i q(x_i | theta) against the prior."""
        rows, _ = _rows(x)
        if self.fixed_mean is not None:
            return float(np.sum(self.log_density(None, rows)))
        n = rows.shape[0]
        prior_precision = _spd_inverse(self.prior_cov, "Prior covariance")
        post_precision = prior_precision + n * self.precision
        post_cov = _spd_inverse(post_precision, "Posterior precision")
        post_mean = post_cov @ (prior_precision @ self.prior_mean + self.precision @ rows.sum(axis=0))
        return float(
            np.sum(self.log_density(post_mean, rows))
            + stats.multivariate_normal.logpdf(post_mean, self.prior_mean, self.prior_cov)
            - stats.multivariate_normal.logpdf(post_mean, post_mean, post_cov)
        )

    def sample(self, theta, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.sigma)
        return self.mean(theta) + rng.standard_normal((n, self.data_dim)) @ chol.T

    def prior_sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.fixed_mean is not None:
            return np.zeros(0)
        chol = np.linalg.cholesky(self.prior_cov)
        return self.prior_mean + chol @ rng.standard_normal(self.data_dim)

    def foreground_dim(self, subset_size: int) -> int:
        return 0 if self.fixed_mean is not None else int(subset_size)


# ---------------------------
# Probabilistic PCA
# ---------------------------

def stiefel_log_volume(d: int, k: int) -> float:
    """log of the volume of {U in R^(d x k): U^T U = I}."""
    i = np.arange(d - k + 1, d + 1)
    return float(np.sum(np.log(2.0) + 0.5 * i * np.log(np.pi) - gammaln(0.5 * i)))


class PpcaModel:
    """
    Probabilistic PCA, N(0, H H^T + v I) with H = U (L - v I)^(1/2).

    Parameters theta are coordinates of a chart centred on the stored point
    (u, l_diag, v): theta = 0 is that point, and

        U(theta) = qf(U0 + U0_perp B + U0 Omega),  l = v + (l0 - v0) e^eta,  v = v0 e^omega

    with B of shape (d - k, k) and Omega skew-symmetric, so len(theta) equals the
    model dimension d k - k(k+1)/2 + k + 1.
    """

    def __init__(self, u: np.ndarray, l_diag: np.ndarray, v: float, alpha: float = 0.1):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        d, k = u.shape
        if k > d:
            raise DomainError(f"latent_dim {k} exceeds data_dim {d}")
        if not np.allclose(u.T @ u, np.eye(k), atol=1e-8):
            raise InputError("u must have orthonormal columns")
        if v <= 0:
            raise InputError(f"Noise variance v must be positive, got {v}")
        if alpha <= 0:
            raise InputError(f"Prior hyperparameter alpha must be positive, got {alpha}")
        l_diag = np.asarray(l_diag, dtype=float).reshape(k)
        if np.any(l_diag <= v):
            logger.warning(f"Clamping latent variances {l_diag} above the noise variance {v}")
            l_diag = np.maximum(l_diag, v + 1e-8)
        self.u = u
        self.l_diag = l_diag
        self.v = float(v)
        self.alpha = float(alpha)
        self.data_dim = d
        self.latent_dim = k
        full, _ = np.linalg.qr(u, mode="complete")
        self._u_perp = full[:, k:]
        self._skew_index = np.triu_indices(k, 1)

    @property
    def param_dim(self) -> int:
        return self.foreground_dim(self.data_dim)

    def foreground_dim(self, subset_size: int) -> int:
        k = self.latent_dim
        if subset_size < k:
            raise DomainError(f"A foreground of {subset_size} dims cannot carry {k} latent dims")
        return subset_size * k - k * (k + 1) // 2 + k + 1

    # chart ------------------------------------------------------------------

    def unpack(self, theta=None) -> Tuple[np.ndarray, np.ndarray, float]:
        if theta is None:
            return self.u, self.l_diag, self.v
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.param_dim:
            raise InputError(f"Expected {self.param_dim} pPCA coordinates, got {theta.shape[0]}")
        d, k = self.data_dim, self.latent_dim
        nb = (d - k) * k
        ns = k * (k - 1) // 2
        b = theta[:nb].reshape(d - k, k)
        omega = np.zeros((k, k))
        omega[self._skew_index] = theta[nb:nb + ns]
        omega = omega - omega.T
        u = qf(self.u + self._u_perp @ b + self.u @ omega)
        v = self.v * np.exp(theta[-1])
        l_diag = v + (self.l_diag - self.v) * np.exp(theta[nb + ns:nb + ns + k])
        return u, l_diag, float(v)

    def at(self, theta) -> "PpcaModel":
        u, l_diag, v = self.unpack(theta)
        return PpcaModel(u, l_diag, v, self.alpha)

    # covariance structure ---------------------------------------------------

    def h_matrix(self, theta=None) -> np.ndarray:
        u, l_diag, v = self.unpack(theta)
        return u * np.sqrt(l_diag - v)

    def covariance(self, theta=None) -> np.ndarray:
        u, l_diag, v = self.unpack(theta)
        return (u * (l_diag - v)) @ u.T + v * np.eye(self.data_dim)

    def precision(self, theta=None) -> np.ndarray:
        """Woodbury: U (L^-1 - v^-1 I) U^T + v^-1 I."""
        u, l_diag, v = self.unpack(theta)
        return (u * (1.0 / l_diag - 1.0 / v)) @ u.T + np.eye(self.data_dim) / v

    def marginal_precision(self, theta, dims: Sequence[int]) -> np.ndarray:
        """Inverse of H_S H_S^T + v I for the rows S of H."""
        _, _, v = self.unpack(theta)
        h_s = self.h_matrix(theta)[list(dims)]
        inner = v * np.eye(self.latent_dim) + h_s.T @ h_s
        solved = linalg.cho_solve(_cholesky(inner, "pPCA inner matrix"), h_s.T)
        precision = (np.eye(len(dims)) - h_s @ solved) / v
        return 0.5 * (precision + precision.T)

    # scores -----------------------------------------------------------------

    def score(self, theta, x) -> np.ndarray:
        rows, single = _rows(x)
        if rows.shape[1] != self.data_dim:
            raise InputError(f"Model of dimension {self.data_dim} applied to points of dimension {rows.shape[1]}")
        s = -rows @ self.precision(theta)
        return s[0] if single else s

    def affine_score(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        return -self.precision(theta), np.zeros(self.data_dim)

    def marginal_affine_score(self, theta, dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        return -self.marginal_precision(theta, dims), np.zeros(len(dims))

    def score_dtheta(self, theta, x) -> np.ndarray:
        """Central differences in the chart, step 1e-4 (1 + |theta_i|)."""
        theta = np.zeros(self.param_dim) if theta is None else np.asarray(theta, dtype=float)
        rows, single = _rows(x)
        jac = np.empty(rows.shape + (self.param_dim,))
        for i in range(self.param_dim):
            h = FD_STEP * (1.0 + abs(theta[i]))
            step = np.zeros_like(theta)
            step[i] = h
            jac[..., i] = (self.score(theta + step, rows) - self.score(theta - step, rows)) / (2.0 * h)
        return jac[0] if single else jac

    def project(self, theta, dims: Sequence[int]) -> Tuple["PpcaModel", np.ndarray]:
        """The marginal on ``dims`` written as a pPCA of its own, at its chart origin."""
        _, _, v = self.unpack(theta)
        h_s = self.h_matrix(theta)[list(dims)]
        eigvals, eigvecs = np.linalg.eigh(h_s @ h_s.T)
        order = np.argsort(eigvals)[::-1][:self.latent_dim]
        lam = np.maximum(eigvals[order], 1e-8)
        sub = PpcaModel(qf(eigvecs[:, order]), v + lam, v, self.alpha)
        return sub, np.zeros(sub.param_dim)

    # likelihood and prior ---------------------------------------------------

    def log_density(self, theta, x) -> np.ndarray:
        rows, _ = _rows(x)
        return np.atleast_1d(stats.multivariate_normal.logpdf(rows, np.zeros(self.data_dim), self.covariance(theta)))

    def mean_nll(self, theta, x) -> float:
        return -float(np.mean(self.log_density(theta, x)))

    def _noise_prior(self) -> Tuple[float, float]:
        d, k, a = self.data_dim, self.latent_dim, self.alpha
        shape = (a / 2.0 + 1.0) * (d - k) - 1.0
        if shape <= 0:
            raise DomainError(f"Noise prior undefined for d={d}, k={k}, alpha={a}")
        return shape, (a / 2.0) * (d - k)

    @property
    def prior_constant(self) -> float:
        """Uniform Stiefel log-density."""
        return -stiefel_log_volume(self.data_dim, self.latent_dim)

    def log_prior(self, theta=None) -> float:
        """Prior density in chart coordinates, including the log-chart Jacobian."""
        _, l_diag, v = self.unpack(theta)
        a = self.alpha
        v_shape, v_scale = self._noise_prior()
        density = (
            np.sum(stats.invgamma.logpdf(l_diag, a / 2.0, scale=a / 2.0))
            + stats.invgamma.logpdf(v, v_shape, scale=v_scale)
        )
        jacobian = np.sum(np.log(l_diag - v)) + np.log(v)
        return float(density + jacobian + self.prior_constant)

    def sample(self, theta, n: int, rng: np.random.Generator) -> np.ndarray:
        _, _, v = self.unpack(theta)
        h = self.h_matrix(theta)
        z = rng.standard_normal((n, self.latent_dim))
        return z @ h.T + np.sqrt(v) * rng.standard_normal((n, self.data_dim))

    @classmethod
    def prior_sample(cls, d: int, k: int, alpha: float, rng: np.random.Generator, max_tries: int = 1000) -> "PpcaModel":
        """Draw (U, L, v) from the prior, truncated to l_i > v."""
        probe = cls(np.eye(d)[:, :k], np.full(k, 2.0), 1.0, alpha)
        v_shape, v_scale = probe._noise_prior()
        u = random_stiefel(d, k, rng)
        v = v_scale / rng.gamma(v_shape)
        l_diag = np.empty(k)
        for i in range(k):
            for _ in range(max_tries):
                l_i = (alpha / 2.0) / rng.gamma(alpha / 2.0)
                if l_i > v:
                    break
            else:
                logger.warning(f"Prior draw of l_{i} never exceeded v={v:.3g}; using v(1 + 1e-3)")
                l_i = v * (1.0 + 1e-3)
            l_diag[i] = l_i
        return cls(u, l_diag, v, alpha)

    @classmethod
    def from_data(cls, x: np.ndarray, latent_dim: int, alpha: float = 0.1) -> "PpcaModel":
        """Starting point from the eigendecomposition of the sample covariance."""
        x = np.asarray(x, dtype=float)
        d = x.shape[1]
        if latent_dim > d:
            raise DomainError(f"latent_dim {latent_dim} exceeds data_dim {d}")
        cov = np.cov(x, rowvar=False, bias=True).reshape(d, d)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals, eigvecs = np.maximum(eigvals[order], 1e-6), eigvecs[:, order]
        rest = eigvals[latent_dim:]
        v = float(rest.mean()) if rest.size else 0.5 * float(eigvals[-1])
        l_diag = np.maximum(eigvals[:latent_dim], v * (1.0 + 1e-3))
        return cls(qf(eigvecs[:, :latent_dim]), l_diag, v, alpha)


# ---------------------------
# Derived models
# ---------------------------

class ProjectedModel:
    """Marginal of ``base`` on ``dims``, as a function of the base parameters."""

    def __init__(self, base, dims: Sequence[int]):
        self.base = base
        self.dims = tuple(dims)
        self.data_dim = len(self.dims)

    @property
    def param_dim(self) -> int:
        return self.base.param_dim

    def affine_score(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        return self.base.marginal_affine_score(theta, self.dims)

    def score(self, theta, x) -> np.ndarray:
        rows, single = _rows(x)
        m_mat, m_vec = self.affine_score(theta)
        s = rows @ m_mat.T + m_vec
        return s[0] if single else s

    def log_prior(self, theta) -> float:
        return self.base.log_prior(theta)


class ProductModel:
    """q(x_F | theta_F) q(x_B | theta_B): part scores side by side."""

    def __init__(self, model_f, model_b, foreground):
        self.model_f = model_f
        self.model_b = model_b
        self.foreground = list(foreground.included_dims)
        self.background = [i for i in range(foreground.data_dim) if i not in foreground.included_dims]
        self.data_dim = foreground.data_dim

    @property
    def param_dim(self) -> int:
        return self.model_f.param_dim + self.model_b.param_dim

    def split(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return theta[:self.model_f.param_dim], theta[self.model_f.param_dim:]

    def score(self, theta, x) -> np.ndarray:
        rows, single = _rows(x)
        theta_f, theta_b = self.split(theta)
        s = np.empty_like(rows)
        s[:, self.foreground] = self.model_f.score(theta_f, rows[:, self.foreground])
        s[:, self.background] = self.model_b.score(theta_b, rows[:, self.background])
        return s[0] if single else s


# ---------------------------
# Families over dimension subsets
# ---------------------------

class GaussianLocationFamily:
    def __init__(self, sigma_scale: float = 1.0, prior_var: float = 10.0):
        self.sigma_scale = sigma_scale
        self.prior_var = prior_var

    def model_for(self, x: np.ndarray) -> GaussianLocationModel:
        d = x.shape[1]
        return GaussianLocationModel(self.sigma_scale * np.eye(d), np.zeros(d), self.prior_var * np.eye(d))

    def foreground_dim(self, subset_size: int) -> int:
        return int(subset_size)


class PpcaFamily:
    def __init__(self, latent_dim: int, alpha: float = 0.1):
        self.latent_dim = latent_dim
        self.alpha = alpha

    def model_for(self, x: np.ndarray) -> PpcaModel:
        return PpcaModel.from_data(x, self.latent_dim, self.alpha)

    def foreground_dim(self, subset_size: int) -> int:
        k = self.latent_dim
        if subset_size < k:
            raise DomainError(f"A foreground of {subset_size} dims cannot carry {k} latent dims")
        return subset_size * k - k * (k + 1) // 2 + k + 1


# ---------------------------
# Functional interface
# ---------------------------

def score(model, theta, x) -> np.ndarray:
    return model.score(theta, x)


def score_dtheta(model, theta, x) -> np.ndarray:
    return model.score_dtheta(theta, x)


def foreground_dim(model, subset_size: int) -> int:
    return model.foreground_dim(subset_size)
