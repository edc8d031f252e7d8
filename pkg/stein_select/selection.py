"""
Data selection with the Stein volume criterion.

This module provides functionality to:
1. Run leave-one-out selection against the full space, re-optimising each foreground
   or moving the reference optimum by one linear-response step
2. Compute criticism scores that attribute misfit to single dimensions
3. Score decisions against a known truth (balanced accuracy)
4. Run the synthetic consistency suite comparing the SVC with alternative criteria
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from stein_select.config import make_rng
from stein_select.data import TOY_COVARIANCES, generate_ppca_sim, generate_toy
from stein_select.errors import ConfigError, DomainError, InputError, SteinSelectError, UnsupportedConfigurationError
from stein_select.kernel import precompute_pairwise
from stein_select.nksd import evaluate_quadratic, nksd_objective, quadratic_coeffs
from stein_select.optimize import approx_optimum, fit, gradient_fd, hessian_fd, invert_hessian, minimize_quadratic
from stein_select.schemas import (
    CriticismScore,
    Decision,
    ForegroundScore,
    ForegroundSpec,
    KernelSettings,
    KernelSpec,
    MatchedPolicy,
    OptimOptions,
    PerDimPolicy,
    PerDimSqrtNPolicy,
    PitmanYorPolicy,
    PpcaScenario,
    ResultRow,
    SelectionReport,
    SvcMethod,
    ToyInstance,
    ToyScenario,
    ToyScore,
)
from stein_select.score_models import ExpFamModel, GaussianLocationModel, PpcaFamily, ProjectedModel
from stein_select.svc import alt_scores, background_dim, gaussian_entropy, pitman_yor_rate, svc_bic, svc_exact_expfam, svc_laplace

logger = logging.getLogger(__name__)


def _values(data) -> np.ndarray:
    return np.asarray(getattr(data, "values", data), dtype=float)


# ---------------------------
# Leave-one-out selection
# ---------------------------

class LeaveOneOut:
    """
    Compares each foreground X_Fj (all dimensions but j) with the full space X_F0.

    The reference fit, its objective and, for the fast path, the inverse Hessian are
    computed once and shared by every foreground.
    """

    def __init__(self, family, data, spec: KernelSpec, policy, temp: float,
                 method: SvcMethod = SvcMethod.BIC, fast: bool = True,
                 opts: Optional[OptimOptions] = None):
        self.x = _values(data)
        self.n, self.d = self.x.shape
        if self.d < 2:
            raise InputError("Leave-one-out selection needs at least 2 dimensions")
        if spec.dim != self.d:
            raise InputError(f"Kernel of dimension {spec.dim} given for {self.d}-dimensional data")
        if temp <= 0:
            raise ConfigError(f"Temperature must be positive, got {temp}")
        self.family = family
        self.spec = spec
        self.policy = policy
        self.temp = temp
        self.method = method
        self.fast = fast
        self.opts = opts or OptimOptions()
        self.m_f0 = family.foreground_dim(self.d)

        reference = fit(family.model_for(self.x), self.x, spec, self.opts)
        self.model0 = reference.model if reference.model is not None else family.model_for(self.x)
        self.theta0 = reference.theta_opt
        self.reference_fit = reference
        self.objective0 = nksd_objective(self.model0, self.x, spec)
        self._hessian0 = None
        self._hessian_inv = None
        self._condition = None
        logger.info(f"Reference fit on {self.d} dims: NKSD {reference.objective:.6g}, converged {reference.converged}")

    @property
    def hessian0(self) -> np.ndarray:
        if self._hessian0 is None:
            self._hessian0 = hessian_fd(self.objective0, self.theta0)
        return self._hessian0

    def _background(self, r_b: int, m_f: int) -> float:
        if isinstance(self.policy, MatchedPolicy):
            return float(self.m_f0 - m_f)
        return background_dim(self.policy, self.n, r_b)

    def _score(self, model, theta, x, spec, objective, m_f, m_b, hessian=None):
        if self.method == SvcMethod.EXACT:
            if not isinstance(model, ExpFamModel):
                raise UnsupportedConfigurationError(f"No closed-form SVC for {type(model).__name__}")
            return svc_exact_expfam(quadratic_coeffs(model, x, spec), model.prior_mean, model.prior_cov,
                                    self.n, self.temp, m_b)
        if self.method == SvcMethod.BIC:
            return svc_bic(model, x, spec, theta, self.temp, m_b, objective=objective, m_f=m_f)
        hessian = hessian if hessian is not None else hessian_fd(objective, theta)
        return svc_laplace(model, x, spec, model.log_prior, theta, hessian, self.temp, m_b, objective=objective)

    def reference(self) -> ForegroundScore:
        foreground = ForegroundSpec.full(self.d)
        m_b = self._background(0, self.m_f0)
        result = self._score(self.model0, self.theta0, self.x, self.spec, self.objective0, self.m_f0, m_b,
                             hessian=self.hessian0 if self.method == SvcMethod.LAPLACE else None)
        return ForegroundScore(
            foreground=foreground, log_k=result.log_k, log_ratio=0.0, decision=Decision.INCLUDE,
            objective=-result.fit_term * self.temp / self.n, m_f=self.m_f0, m_b=m_b,
            status=result.status if self.reference_fit.converged else "not_converged",
        )

    def _foreground_fit(self, dims, x_s, spec_s, stats):
        if self.fast:
            if self._hessian_inv is None:
                self._hessian_inv, self._condition = invert_hessian(self.hessian0)
            projected = nksd_objective(ProjectedModel(self.model0, dims), x_s, spec_s, stats=stats)
            response = approx_optimum(
                self.hessian0, gradient_fd(projected, self.theta0), self.theta0,
                hessian_inv=self._hessian_inv, condition_number=self._condition,
            )
            model, theta = self.model0.project(response.theta, dims)
            return model, theta, True
        result = fit(self.family.model_for(x_s), x_s, spec_s, self.opts)
        model = result.model if result.model is not None else self.family.model_for(x_s)
        return model, result.theta_opt, result.converged

    def score_foreground(self, left_out: int, reference: ForegroundScore) -> ForegroundScore:
        foreground = ForegroundSpec.leave_out(left_out, self.d)
        dims = list(foreground.included_dims)
        x_s = self.x[:, dims]
        spec_s = self.spec.restrict(dims)
        m_f = self.family.foreground_dim(len(dims))
        m_b = self._background(foreground.r_b, m_f)
        try:
            stats = precompute_pairwise(spec_s, x_s)
            model, theta, converged = self._foreground_fit(dims, x_s, spec_s, stats)
            objective = nksd_objective(model, x_s, spec_s, stats=stats)
            result = self._score(model, theta, x_s, spec_s, objective, m_f, m_b)
        except SteinSelectError as e:
            logger.error(f"Foreground without dim {left_out + 1} failed: {e}")
            return ForegroundScore(foreground=foreground, left_out=left_out, m_f=m_f, m_b=m_b,
                                   status="error", error=str(e))
        log_ratio = result.log_k - reference.log_k
        status = result.status if converged else "not_converged"
        if not converged:
            logger.warning(f"Foreground without dim {left_out + 1}: optimiser did not converge")
        return ForegroundScore(
            foreground=foreground,
            left_out=left_out,
            log_k=result.log_k,
            log_ratio=log_ratio,
            decision=Decision.INCLUDE if log_ratio <= 0 else Decision.EXCLUDE,
            objective=-result.fit_term * self.temp / self.n,
            m_f=m_f,
            m_b=m_b,
            status=status,
        )

    def run(self, truth: Optional[Sequence[Decision]] = None, criticism: bool = False) -> SelectionReport:
        reference = self.reference()
        entries = [self.score_foreground(j, reference) for j in range(self.d)]
        report = SelectionReport(reference=reference, per_foreground=entries)
        if criticism:
            report.criticism = criticism_scores(self.model0, self.x, self.spec, self.theta0, self.temp)
        if truth is not None:
            decisions = [entry.decision for entry in entries]
            if any(decision is None for decision in decisions):
                logger.warning("Balanced accuracy skipped: some foregrounds failed")
            else:
                report.balanced_accuracy = balanced_accuracy(decisions, truth)
        return report


def leave_one_out(family, data, spec: KernelSpec, policy, temp: float,
                  method: SvcMethod = SvcMethod.BIC, fast: bool = True,
                  opts: Optional[OptimOptions] = None,
                  truth: Optional[Sequence[Decision]] = None,
                  criticism: bool = False) -> SelectionReport:
    return LeaveOneOut(family, data, spec, policy, temp, method, fast, opts).run(truth, criticism)


def criticism_scores(model, data, spec: KernelSpec, theta_full, temp: float) -> List[CriticismScore]:
    """log E_j - log E_0 = -(N/T) NKSD-hat(X_Fj; theta_full) + (N/T) NKSD-hat(X; theta_full)."""
    x = _values(data)
    n, d = x.shape
    full = nksd_objective(model, x, spec)(theta_full)
    scores = []
    for j in range(d):
        dims = [i for i in range(d) if i != j]
        projected = nksd_objective(ProjectedModel(model, dims), x[:, dims], spec.restrict(dims))
        value = projected(theta_full)
        scores.append(CriticismScore(dim=j, log_e_ratio=-(n / temp) * value + (n / temp) * full))
    return scores


def balanced_accuracy(decisions: Sequence[Decision], truth: Sequence[Decision]) -> float:
    """(TN / negatives + TP / positives) / 2 with "include" as the positive class."""
    if len(decisions) != len(truth):
        raise InputError(f"{len(decisions)} decisions for {len(truth)} truth labels")
    truth = [Decision(t) for t in truth]
    decisions = [Decision(p) for p in decisions]
    positives = sum(t == Decision.INCLUDE for t in truth)
    negatives = len(truth) - positives
    if positives == 0 or negatives == 0:
        raise DomainError("Balanced accuracy is undefined when the truth has a single class")
    tp = sum(t == p == Decision.INCLUDE for t, p in zip(truth, decisions))
    tn = sum(t == p == Decision.EXCLUDE for t, p in zip(truth, decisions))
    return 0.5 * (tn / negatives + tp / positives)


def ppca_simulation(scenario: PpcaScenario, n: int, seeds: Sequence[int], latent_dim: int, temp: float,
                    policy, method: SvcMethod, fast: bool, kernel: KernelSettings, alpha: float = 0.1,
                    criticism: bool = True, opts: Optional[OptimOptions] = None,
                    n_jobs: int = 1) -> List[Tuple[int, SelectionReport]]:
    """Leave-one-out selection on the corrupted pPCA simulation, one report per seed."""

    def run(seed):
        data, truth = generate_ppca_sim(scenario, n, seed)
        logger.info(f"pPCA scenario {scenario.value}, n={n}, seed {seed}")
        return seed, leave_one_out(
            PpcaFamily(latent_dim, alpha), data, kernel.for_dim(data.d), policy, temp,
            method, fast, opts, truth=truth, criticism=criticism,
        )

    if n_jobs == 1:
        return [run(seed) for seed in seeds]
    return Parallel(n_jobs=n_jobs)(delayed(run)(seed) for seed in seeds)


# ---------------------------
# Synthetic consistency suite
# ---------------------------

class ToyCandidate:
    def __init__(self, name: str, dims: Tuple[int, ...], model: GaussianLocationModel):
        self.name = name
        self.dims = dims
        self.model = model

    @property
    def r_b(self) -> int:
        return 2 - len(self.dims)


def _location(dim: int, scale: float = 1.0, fixed: bool = False) -> GaussianLocationModel:
    if fixed:
        return GaussianLocationModel(scale * np.eye(dim), fixed_mean=np.zeros(dim))
    return GaussianLocationModel(scale * np.eye(dim), np.zeros(dim), 10.0 * np.eye(dim))


def toy_candidates(scenario: ToyScenario) -> Tuple[ToyCandidate, ToyCandidate]:
    """The pair (1, 2) compared in each synthetic scenario; 1 is always the right answer."""
    scenario = ToyScenario(scenario)
    if scenario == ToyScenario.DS:
        return ToyCandidate("{1}", (0,), _location(1)), ToyCandidate("{2}", (1,), _location(1))
    if scenario == ToyScenario.NESTED_DS:
        return ToyCandidate("{1,2}", (0, 1), _location(2)), ToyCandidate("{1}", (0,), _location(1))
    if scenario == ToyScenario.MS:
        return ToyCandidate("N(theta,I)", (0, 1), _location(2)), ToyCandidate("N(theta,2I)", (0, 1), _location(2, 2.0))
    return ToyCandidate("N(0,I)", (0, 1), _location(2, fixed=True)), ToyCandidate("N(theta,I)", (0, 1), _location(2))


def toy_log_scores(candidate: ToyCandidate, x: np.ndarray, scores: Sequence[ToyScore], temp: float,
                   policy, kernel: KernelSettings, true_cov: np.ndarray) -> Dict[ToyScore, float]:
    x_f = x[:, list(candidate.dims)]
    n = x_f.shape[0]
    spec = kernel.for_dim(len(candidate.dims))
    model = candidate.model
    m_b = background_dim(policy, n, candidate.r_b)
    qf = quadratic_coeffs(model, x_f, spec)
    objective = lambda theta: evaluate_quadratic(qf, theta)
    prior_mean = model.prior_mean if model.param_dim else None
    prior_cov = model.prior_cov if model.param_dim else None

    out = {}
    alternatives = None
    theta = minimize_quadratic(qf).theta_opt
    for score in scores:
        if score == ToyScore.SVC:
            out[score] = svc_exact_expfam(qf, prior_mean, prior_cov, n, temp, m_b).log_k
        elif score == ToyScore.BIC:
            out[score] = svc_bic(model, x_f, spec, theta, temp, m_b, objective=objective).log_k
        elif score == ToyScore.LAPLACE:
            out[score] = svc_laplace(model, x_f, spec, model.log_prior, theta, 2.0 * qf.a_sym, temp, m_b,
                                     objective=objective, check_stationarity=False).log_k
        else:
            if alternatives is None:
                instance = ToyInstance(model=model, data=x_f, spec=spec, temp=temp, m_b=m_b,
                                       true_cov=true_cov[np.ix_(candidate.dims, candidate.dims)])
                alternatives = alt_scores(instance, qf=qf)
            out[score] = getattr(alternatives, score.value)
    return out


def _growth(policy, n: int) -> float:
    """Factor by which m_B grows with n; 1 for policies constant in n."""
    if isinstance(policy, PerDimSqrtNPolicy):
        return math.sqrt(n)
    if isinstance(policy, PitmanYorPolicy):
        return n ** policy.alpha
    return 1.0


def normalizer(scenario: ToyScenario, score: ToyScore, n: int, policy) -> float:
    """Scale turning log(K1 / K2) into a statistic with a finite limit."""
    scenario, score = ToyScenario(scenario), ToyScore(score)
    if scenario in (ToyScenario.DS, ToyScenario.MS):
        return 1.0 / n
    if scenario == ToyScenario.NESTED_DS:
        if score == ToyScore.K_A:
            return 1.0 / n
        if score == ToyScore.K_C:
            return 1.0 / math.sqrt(n)
        if score == ToyScore.K_B:
            return 1.0 / math.log(n)
        return 1.0 / (_growth(policy, n) * math.log(n))
    if score == ToyScore.K_D:
        return 1.0
    return 1.0 / math.log(n)


def _cross_entropy(model: GaussianLocationModel, true_cov: np.ndarray) -> float:
    """E_p[-log q(x | theta*)] for p = N(0, true_cov) and the mean-matched model."""
    d = true_cov.shape[0]
    _, log_det = np.linalg.slogdet(model.sigma)
    return 0.5 * (d * math.log(2.0 * math.pi) + log_det + np.trace(model.precision @ true_cov))


def population_nksd(model, true_cov: np.ndarray, spec: KernelSpec, n_ref: int = 10000, seed: int = 0) -> float:
    """Minimised NKSD-hat on one large sample from N(0, true_cov)."""
    rng = make_rng(seed)
    chol = np.linalg.cholesky(true_cov)
    x = rng.standard_normal((n_ref, true_cov.shape[0])) @ chol.T
    value = fit(model, x, spec).objective
    logger.info(f"Reference NKSD {value:.6g} from {n_ref} draws")
    return value


def reference_limit(scenario: ToyScenario, score: ToyScore, temp: float, policy,
                    kernel: KernelSettings, n_ref: int = 10000, seed: int = 0) -> Optional[float]:
    """
    Limit of the normalised statistic as n grows, or None where it has no deterministic
    limit. NKSD values come from ``population_nksd``; everything else is analytic.
    """
    scenario, score = ToyScenario(scenario), ToyScore(score)
    first, second = toy_candidates(scenario)
    cov = TOY_COVARIANCES[scenario]

    def sub(candidate):
        return cov[np.ix_(candidate.dims, candidate.dims)]

    if scenario in (ToyScenario.DS, ToyScenario.MS):
        if score in (ToyScore.K_A, ToyScore.K_C):
            gap = _cross_entropy(second.model, sub(second)) - _cross_entropy(first.model, sub(first))
            if score == ToyScore.K_C:
                gap -= gaussian_entropy(sub(second)) - gaussian_entropy(sub(first))
            return gap
        nksd = [population_nksd(c.model, sub(c), kernel.for_dim(len(c.dims)), n_ref, seed) for c in (first, second)]
        return (nksd[1] - nksd[0]) / temp

    m_f = [c.model.foreground_dim(len(c.dims)) for c in (first, second)]
    if scenario == ToyScenario.NESTED_MS:
        return None if score == ToyScore.K_D else 0.5 * (m_f[1] - m_f[0])

    if score == ToyScore.K_A:
        return gaussian_entropy(sub(second)) - gaussian_entropy(sub(first))
    if score == ToyScore.K_C:
        return None
    if score == ToyScore.K_B:
        return 0.5 * (m_f[1] - m_f[0])
    # m_B growing in n dominates the foreground volumes after normalisation
    if isinstance(policy, PerDimSqrtNPolicy):
        return 0.5 * policy.c_b * (second.r_b - first.r_b)
    if isinstance(policy, PitmanYorPolicy):
        rate = pitman_yor_rate(policy)
        return 0.5 * rate * ((second.r_b - first.r_b) if policy.scale_by_r_b else 0.0)
    m_b = [background_dim(policy, 1, c.r_b) for c in (first, second)]
    volume_gap = 0.5 * (m_b[1] - m_b[0])
    if score == ToyScore.K_D:
        return volume_gap
    return volume_gap + 0.5 * (m_f[1] - m_f[0])


def finite_n_offset(scenario: ToyScenario, score: ToyScore, n: int, temp: float, policy) -> Optional[float]:
    """
    Deterministic O(1) part of log(K1 / K2) on the nested scenarios: the constants of the
    closed-form foreground integral and the 2 pi of the background volume. The normalised
    statistic at n is close to limit + offset * normalizer(n), up to fit noise. None where
    the statistic has no such decomposition.
    """
    scenario, score = ToyScenario(scenario), ToyScore(score)
    if scenario not in (ToyScenario.NESTED_DS, ToyScenario.NESTED_MS):
        return None
    if score not in (ToyScore.SVC, ToyScore.K_B, ToyScore.K_D):
        return None

    def constant(candidate):
        model = candidate.model
        value = 0.0
        if score != ToyScore.K_D and model.param_dim:
            m = model.param_dim
            _, log_det_prior = np.linalg.slogdet(model.prior_cov)
            _, log_det_a = np.linalg.slogdet(model.precision @ model.precision)
            value += -0.5 * m * math.log(2.0 / temp) - 0.5 * log_det_prior - 0.5 * log_det_a
        if score != ToyScore.K_B:
            value += 0.5 * background_dim(policy, n, candidate.r_b) * math.log(2.0 * math.pi)
        return value

    first, second = toy_candidates(scenario)
    return constant(first) - constant(second)


def _toy_seed_rows(scenario, scores, n, seed, temp, policy, kernel) -> List[ResultRow]:
    data = generate_toy(scenario, n, seed)
    cov = TOY_COVARIANCES[ToyScenario(scenario)]
    first, second = toy_candidates(scenario)
    s1 = toy_log_scores(first, data.values, scores, temp, policy, kernel, cov)
    s2 = toy_log_scores(second, data.values, scores, temp, policy, kernel, cov)
    label = f"{first.name} vs {second.name}"
    rows = []
    for score in scores:
        value = s1[score] - s2[score]
        rows.append(ResultRow(
            experiment="toy", scenario=ToyScenario(scenario).value, score=score.value, n=n, seed=str(seed),
            foreground=label, value=value, normalized_value=value * normalizer(scenario, score, n, policy),
            decision="1" if value > 0 else "2",
        ))
    return rows


def consistency_curves(scenario: ToyScenario, scores: Sequence[ToyScore], n_grid: Sequence[int],
                       seeds: Sequence[int], temp: float = 5.0, policy=PerDimPolicy(c_b=5.0),
                       kernel: KernelSettings = KernelSettings(family="rbf", bandwidth=1.0),
                       n_jobs: int = 1, limits: bool = True) -> List[ResultRow]:
    """
    log(K1 / K2) per (n, seed) and score, the normalised statistic, the per-n mean and,
    with ``limits``, the reference limit of the normalised statistic.
    """
    scenario = ToyScenario(scenario)
    scores = [ToyScore(s) for s in scores]
    if isinstance(policy, MatchedPolicy):
        raise ConfigError("The matched policy is not defined for the synthetic comparison")
    jobs = [(n, seed) for n in n_grid for seed in seeds]
    if n_jobs == 1:
        per_seed = [_toy_seed_rows(scenario, scores, n, seed, temp, policy, kernel) for n, seed in jobs]
    else:
        per_seed = Parallel(n_jobs=n_jobs)(
            delayed(_toy_seed_rows)(scenario, scores, n, seed, temp, policy, kernel) for n, seed in jobs
        )
    rows = [row for chunk in per_seed for row in chunk]

    summary = []
    label = rows[0].foreground if rows else ""
    for score in scores:
        limit = reference_limit(scenario, score, temp, policy, kernel) if limits else None
        for n in n_grid:
            chosen = [r for r in rows if r.score == score.value and r.n == n]
            mean = float(np.mean([r.value for r in chosen]))
            normalized = float(np.mean([r.normalized_value for r in chosen]))
            summary.append(ResultRow(
                experiment="toy", scenario=scenario.value, score=score.value, n=n, seed="mean",
                foreground=label, value=mean, normalized_value=normalized, decision="1" if mean > 0 else "2",
            ))
            if limit is not None:
                summary.append(ResultRow(
                    experiment="toy", scenario=scenario.value, score=score.value, n=n, seed="limit",
                    foreground=label, value=None, normalized_value=limit,
                ))
    return rows + summary


def log_n_slope(rows: Sequence[ResultRow], score: ToyScore) -> float:
    """Slope of the seed-averaged log(K1 / K2) against log n; free of O(1) offsets."""
    score = ToyScore(score)
    chosen = [r for r in rows if r.score == score.value and r.seed not in ("mean", "limit")]
    grid = sorted({r.n for r in chosen})
    if len(grid) < 2:
        raise InputError("A slope needs at least two sample sizes")
    means = [np.mean([r.value for r in chosen if r.n == n]) for n in grid]
    return float(np.polyfit(np.log(grid), means, 1)[0])
