from enum import Enum
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, field_validator, model_validator


# ---------------------------
# Kernels
# ---------------------------

class KernelFamily(str, Enum):
    FACTORED_IMQ = "imq"
    RBF = "rbf"


def _check_kernel(family: "KernelFamily", beta: float, c: float, bandwidth: float) -> None:
    if family == KernelFamily.FACTORED_IMQ:
        if not -0.5 <= beta < 0:
            raise ValueError(f"FactoredIMQ beta must lie in [-0.5, 0), got {beta}")
        if c <= 0:
            raise ValueError(f"FactoredIMQ offset c must be positive, got {c}")
    elif bandwidth <= 0:
        raise ValueError(f"RBF bandwidth must be positive, got {bandwidth}")


class KernelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: KernelFamily = KernelFamily.FACTORED_IMQ
    dim: int = Field(gt=0)
    beta: float = -0.5
    c: float = 1.0
    bandwidth: float = 1.0
    # dimension in the FactoredIMQ exponent beta/d; differs from dim only for exact factors
    exponent_dim: Optional[int] = None

    @model_validator(mode="after")
    def _check_hyperparameters(self):
        _check_kernel(self.family, self.beta, self.c, self.bandwidth)
        if self.exponent_dim is not None and self.exponent_dim < self.dim:
            raise ValueError("exponent_dim cannot be smaller than dim")
        return self

    @property
    def exponent(self) -> float:
        return self.beta / (self.exponent_dim or self.dim)

    def restrict(self, dims: Sequence[int], keep_exponent: bool = False) -> "KernelSpec":
        """Kernel on a subset of dimensions.

        keep_exponent=True keeps beta/d of the parent so the full kernel is exactly the
        product of the restrictions to a split; otherwise the subset gets its own beta/|S|.
        """
        size = len(dims)
        if size == 0:
            raise ValueError("Cannot restrict a kernel to an empty set of dimensions")
        exponent_dim = (self.exponent_dim or self.dim) if keep_exponent else None
        return self.model_copy(update={"dim": size, "exponent_dim": exponent_dim})


class KernelSettings(BaseModel):
    """Kernel choice before the data dimension is known (CLI / configs)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: KernelFamily = KernelFamily.FACTORED_IMQ
    beta: float = -0.5
    c: float = 1.0
    bandwidth: float = 1.0

    @model_validator(mode="after")
    def _check_hyperparameters(self):
        _check_kernel(self.family, self.beta, self.c, self.bandwidth)
        return self

    def for_dim(self, dim: int) -> KernelSpec:
        return KernelSpec(family=self.family, dim=dim, beta=self.beta, c=self.c, bandwidth=self.bandwidth)


class PairwiseStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    k_bar: float
    xt_k_x: np.ndarray
    xt_kdot: np.ndarray
    k_ddot: float
    n: int
    k_x: np.ndarray
    kdot_sum: np.ndarray


# ---------------------------
# Estimators
# ---------------------------

class NksdEstimate(BaseModel):
    value: float
    numerator: float
    denominator: float
    n: int


class QuadraticForm(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    a: np.ndarray
    b: np.ndarray
    c_scalar: float

    @property
    def dim(self) -> int:
        return int(self.b.shape[0])

    @property
    def a_sym(self) -> np.ndarray:
        return 0.5 * (self.a + self.a.T)


# ---------------------------
# Background dimension policies
# ---------------------------

class ConstantPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["constant"] = "constant"
    m_b: float = Field(ge=0)


class PerDimPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["perdim"] = "perdim"
    c_b: float = Field(ge=0)


class PerDimSqrtNPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["sqrt"] = "sqrt"
    c_b: float = Field(ge=0)


class PitmanYorPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["pitman-yor"] = "pitman-yor"
    alpha: float = Field(gt=0, lt=1)
    theta_py: float
    d_py: float = Field(gt=0)
    scale_by_r_b: bool = True

    @model_validator(mode="after")
    def _check_theta(self):
        if self.theta_py <= -self.alpha:
            raise ValueError(f"Pitman-Yor theta must exceed -alpha, got {self.theta_py}")
        return self


class MatchedPolicy(BaseModel):
    """m_Bj = m_F0 - m_Fj; resolved by the leave-one-out driver."""

    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["matched"] = "matched"


BackgroundDimPolicy = Annotated[
    Union[ConstantPolicy, PerDimPolicy, PerDimSqrtNPolicy, PitmanYorPolicy, MatchedPolicy],
    Field(discriminator="kind"),
]


# ---------------------------
# SVC / optimisation results
# ---------------------------

class SvcMethod(str, Enum):
    EXACT = "exact"
    LAPLACE = "laplace"
    BIC = "bic"


class SvcResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    log_k: float
    fit_term: float
    foreground_volume: float
    background_volume: float
    theta_opt: np.ndarray
    hessian: Optional[np.ndarray] = None
    method: SvcMethod
    m_f: int
    m_b: float
    status: str = "ok"


class OptimResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta_opt: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    # fitted model re-anchored at the optimum, for charted families
    model: Optional[Any] = None
    # objective after each accepted step, when requested
    trace: Optional[List[float]] = None


class OptimOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grad_tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=5000, ge=1)
    armijo_c: float = Field(default=1e-4, gt=0, lt=1)
    shrink: float = Field(default=0.5, gt=0, lt=1)
    initial_step: float = Field(default=1.0, gt=0)
    n_starts: int = Field(default=3, ge=1)
    seed: int = 0
    record_trace: bool = False


class LinearResponse(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta_base: np.ndarray
    hessian_inv: np.ndarray
    correction: np.ndarray
    condition_number: float

    @property
    def theta(self) -> np.ndarray:
        return self.theta_base + self.correction


class AltScores(BaseModel):
    k_a: float
    k_b: float
    k_c: float
    k_d: float


class ToyInstance(BaseModel):
    """Gaussian-location foreground of a synthetic run, with its generator covariance."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: Any
    data: np.ndarray
    spec: KernelSpec
    temp: float = Field(gt=0)
    m_b: float = Field(ge=0)
    true_cov: Optional[np.ndarray] = None


# ---------------------------
# Selection
# ---------------------------

class Decision(str, Enum):
    INCLUDE = "include"
    EXCLUDE = "exclude"


class ForegroundSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    included_dims: Tuple[int, ...]
    data_dim: int = Field(gt=0)

    @field_validator("included_dims")
    @classmethod
    def _sorted_unique(cls, dims):
        if len(set(dims)) != len(dims):
            raise ValueError(f"Foreground dimensions must be unique, got {dims}")
        return tuple(sorted(dims))

    @model_validator(mode="after")
    def _in_range(self):
        if not self.included_dims:
            raise ValueError("Foreground must include at least one dimension")
        if self.included_dims[0] < 0 or self.included_dims[-1] >= self.data_dim:
            raise ValueError(f"Foreground dimensions {self.included_dims} out of range for d={self.data_dim}")
        return self

    @property
    def r_b(self) -> int:
        return self.data_dim - len(self.included_dims)

    @property
    def size(self) -> int:
        return len(self.included_dims)

    @property
    def label(self) -> str:
        return "-".join(str(i + 1) for i in self.included_dims)

    @classmethod
    def full(cls, data_dim: int) -> "ForegroundSpec":
        return cls(included_dims=tuple(range(data_dim)), data_dim=data_dim)

    @classmethod
    def leave_out(cls, dim: int, data_dim: int) -> "ForegroundSpec":
        return cls(included_dims=tuple(i for i in range(data_dim) if i != dim), data_dim=data_dim)


class ForegroundScore(BaseModel):
    foreground: ForegroundSpec
    left_out: Optional[int] = None
    log_k: Optional[float] = None
    log_ratio: Optional[float] = None
    decision: Optional[Decision] = None
    objective: Optional[float] = None
    m_f: Optional[int] = None
    m_b: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None


class CriticismScore(BaseModel):
    dim: int
    log_e_ratio: float


class SelectionReport(BaseModel):
    reference: ForegroundScore
    per_foreground: List[ForegroundScore]
    criticism: Optional[List[CriticismScore]] = None
    balanced_accuracy: Optional[float] = None

    @property
    def decisions(self) -> List[Optional[Decision]]:
        return [entry.decision for entry in self.per_foreground]


# ---------------------------
# Calibration
# ---------------------------

class CalibrationResult(BaseModel):
    t_hat_samples: List[float]
    t_median: float
    n_used: int
    excluded: int = 0
    spread: float = 0.0


# ---------------------------
# Data and results
# ---------------------------

class DataMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    column_names: Optional[List[str]] = None

    @field_validator("values")
    @classmethod
    def _finite_matrix(cls, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"Data must be a 2-D matrix, got shape {values.shape}")
        if values.shape[0] < 2:
            raise ValueError(f"Data needs at least 2 rows, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Data contains NaN or infinite values")
        return values

    @model_validator(mode="after")
    def _names_match(self):
        if self.column_names is not None and len(self.column_names) != self.values.shape[1]:
            raise ValueError("column_names length does not match the number of columns")
        return self

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])


class ResultRow(BaseModel):
    experiment: str
    scenario: str
    score: str
    n: int
    seed: str
    foreground: str = ""
    value: Optional[float] = None
    normalized_value: Optional[float] = None
    decision: str = ""


# ---------------------------
# Experiment configs
# ---------------------------

class ToyScenario(str, Enum):
    DS = "ds"
    NESTED_DS = "nested_ds"
    MS = "ms"
    NESTED_MS = "nested_ms"


class ToyScore(str, Enum):
    SVC = "svc"
    BIC = "bic"
    LAPLACE = "laplace"
    K_A = "k_a"
    K_B = "k_b"
    K_C = "k_c"
    K_D = "k_d"


class PpcaScenario(str, Enum):
    A = "A"
    B = "B"


class _ExperimentBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out_dir: Path
    plot: bool = True
    n_jobs: int = 1

    @field_validator("n_jobs")
    @classmethod
    def _jobs(cls, value):
        if value == 0 or value < -1:
            raise ValueError("n_jobs must be a positive integer or -1")
        return value


def _check_seeds(seeds: List[int]) -> List[int]:
    if not seeds:
        raise ValueError("At least one seed is required")
    if any(seed < 0 for seed in seeds):
        raise ValueError("Seeds must be nonnegative")
    return seeds


SeedList = Annotated[List[int], AfterValidator(_check_seeds)]


class ToyConfig(_ExperimentBase):
    command: Literal["toy"] = "toy"
    scenario: ToyScenario
    scores: List[ToyScore] = Field(default_factory=lambda: [ToyScore.SVC])
    n_grid: List[int] = Field(default_factory=lambda: [100, 1000, 10000])
    seeds: SeedList = Field(default_factory=lambda: list(range(5)))
    temp: float = Field(default=5.0, gt=0)
    policy: BackgroundDimPolicy = PerDimPolicy(c_b=5.0)
    kernel: KernelSettings = KernelSettings(family=KernelFamily.RBF, bandwidth=1.0)

    @field_validator("n_grid")
    @classmethod
    def _grid(cls, values):
        if not values or any(n < 2 for n in values):
            raise ValueError("n_grid needs sample sizes of at least 2")
        return sorted(set(values))

    @field_validator("scores")
    @classmethod
    def _scores(cls, values):
        if not values:
            raise ValueError("At least one score is required")
        return list(dict.fromkeys(values))

    @model_validator(mode="after")
    def _policy_supported(self):
        if isinstance(self.policy, MatchedPolicy):
            raise ValueError("The matched background policy only applies to leave-one-out selection")
        return self


class PpcaSimConfig(_ExperimentBase):
    command: Literal["ppca-sim"] = "ppca-sim"
    scenario: PpcaScenario
    n: int = Field(default=2000, ge=2)
    latent_dim: int = Field(default=2, ge=1)
    temp: float = Field(default=0.05, gt=0)
    policy: BackgroundDimPolicy = PitmanYorPolicy(alpha=0.5, theta_py=1.0, d_py=0.2)
    method: SvcMethod = SvcMethod.BIC
    fast: bool = True
    seeds: SeedList = Field(default_factory=lambda: list(range(5)))
    alpha: float = Field(default=0.1, gt=0)
    kernel: KernelSettings = KernelSettings()
    criticism: bool = True

    @model_validator(mode="after")
    def _method_supported(self):
        if self.method == SvcMethod.EXACT:
            raise ValueError("pPCA has no closed-form SVC; use bic or laplace")
        if self.latent_dim >= 5:
            raise ValueError("latent_dim must leave room for leave-one-out foregrounds of 5 dims")
        return self


class SelectConfig(_ExperimentBase):
    command: Literal["select"] = "select"
    input: Path
    model: Literal["ppca", "gaussian"] = "ppca"
    latent_dim: Optional[int] = Field(default=None, ge=1)
    temp: float = Field(default=1.0, gt=0)
    policy: BackgroundDimPolicy = PitmanYorPolicy(alpha=0.5, theta_py=1.0, d_py=0.2)
    method: SvcMethod = SvcMethod.BIC
    fast: bool = True
    standardize: bool = True
    alpha: float = Field(default=0.1, gt=0)
    kernel: KernelSettings = KernelSettings()
    criticism: bool = True

    @model_validator(mode="after")
    def _model_options(self):
        if self.model == "ppca" and self.latent_dim is None:
            raise ValueError("--latent-dim is required for the ppca model")
        if self.model == "gaussian" and self.latent_dim is not None:
            raise ValueError("latent_dim only applies to the ppca model")
        if self.method == SvcMethod.EXACT and self.model == "ppca":
            raise ValueError("pPCA has no closed-form SVC; use bic or laplace")
        return self


class CalibrateConfig(_ExperimentBase):
    command: Literal["calibrate"] = "calibrate"
    model: Literal["gaussian", "ppca"] = "ppca"
    n: int = Field(default=2000, ge=2)
    draws: int = Field(default=10, ge=1)
    dim: Optional[int] = Field(default=None, ge=1)
    latent_dim: int = Field(default=2, ge=1)
    alpha: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)
    kernel: Optional[KernelSettings] = None

    @model_validator(mode="after")
    def _defaults(self):
        if self.dim is None:
            self.dim = 6 if self.model == "ppca" else 1
        if self.kernel is None:
            self.kernel = (
                KernelSettings() if self.model == "ppca"
                else KernelSettings(family=KernelFamily.RBF, bandwidth=1.0)
            )
        if self.model == "ppca" and self.latent_dim >= self.dim:
            raise ValueError("latent_dim must be smaller than dim")
        return self


ExperimentConfig = Annotated[
    Union[ToyConfig, PpcaSimConfig, SelectConfig, CalibrateConfig],
    Field(discriminator="command"),
]
