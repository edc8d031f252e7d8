"""Bayesian data and model selection with the Stein volume criterion."""

from stein_select.calibrate import calibrate_t, t_hat_statistic
from stein_select.data import generate_ppca_sim, generate_toy, ingest_csv
from stein_select.kernel import precompute_pairwise
from stein_select.nksd import nksd_hat, nksd_subsystem_split, quadratic_coeffs
from stein_select.optimize import approx_optimum, fit, minimize_ppca, minimize_quadratic
from stein_select.results import emit_results
from stein_select.schemas import KernelSpec, SvcMethod
from stein_select.score_models import GaussianLocationModel, PpcaModel
from stein_select.selection import (
    balanced_accuracy,
    consistency_curves,
    criticism_scores,
    finite_n_offset,
    leave_one_out,
)
from stein_select.svc import alt_scores, background_dim, svc_bic, svc_exact_expfam, svc_laplace

__version__ = "0.1.0"

__all__ = [
    "GaussianLocationModel",
    "KernelSpec",
    "PpcaModel",
    "SvcMethod",
    "alt_scores",
    "approx_optimum",
    "background_dim",
    "balanced_accuracy",
    "calibrate_t",
    "consistency_curves",
    "criticism_scores",
    "emit_results",
    "finite_n_offset",
    "fit",
    "generate_ppca_sim",
    "generate_toy",
    "ingest_csv",
    "leave_one_out",
    "minimize_ppca",
    "minimize_quadratic",
    "nksd_hat",
    "nksd_subsystem_split",
    "precompute_pairwise",
    "quadratic_coeffs",
    "svc_bic",
    "svc_exact_expfam",
    "svc_laplace",
    "t_hat_statistic",
]
