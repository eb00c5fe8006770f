"""
Two-arm (treat / control) Bayesian linear contextual bandit.

Each arm keeps a Normal-Inverse-Gamma posterior over its reward weights w and noise
variance s2:  s2 ~ InvGamma(shape, rate),  w | s2 ~ N(mean, s2 * precision^-1).
Arms are assigned by Thompson sampling; the probability of assigning `treat` and its
derivative with respect to the context back the sensitivity analysis.
"""
import copy
import logging
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.stats import norm

from utils import NudgeEngineError, stable_hash

logger = logging.getLogger(__name__)

TREAT = "treat"
CONTROL = "control"
ARMS = (TREAT, CONTROL)

_SYMMETRY_TOL = 1e-10


class DimensionMismatch(NudgeEngineError):
    pass


class NonFiniteInput(NudgeEngineError):
    pass


class CholeskyFailure(NudgeEngineError):
    pass


class ShapeTooSmall(NudgeEngineError):
    pass


class InsufficientSample(NudgeEngineError):
    pass


class ArmPosterior:
    """Normal-Inverse-Gamma state of one arm's Bayesian linear model."""

    def __init__(self, mean, precision, shape: float, rate: float, n_obs: int = 0):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.precision = np.asarray(precision, dtype=float)
        self.shape = float(shape)
        self.rate = float(rate)
        self.n_obs = int(n_obs)
        self.check()

    @classmethod
    def prior(cls, dim: int, mean: float = 0.0, precision: float = 1.0, shape: float = 2.0, rate: float = 1.0):
        return cls(np.full(dim, mean), np.eye(dim) * precision, shape, rate)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def check(self):
        d = self.dim
        if self.precision.shape != (d, d):
            raise DimensionMismatch(f"precision has shape {self.precision.shape}, expected {(d, d)}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.precision))):
            raise NonFiniteInput("posterior parameters must be finite")
        if np.max(np.abs(self.precision - self.precision.T), initial=0.0) >= _SYMMETRY_TOL * max(1.0, np.max(np.abs(self.precision))):
            raise CholeskyFailure("precision matrix is not symmetric")
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"shape and rate must be positive, got a={self.shape}, b={self.rate}")

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor L of the precision (precision = L L^T)."""
        try:
            return cholesky(self.precision, lower=True)
        except LinAlgError as e:
            raise CholeskyFailure(f"precision is not positive-definite: {e}") from e

    def covariance_quadratic(self, x: np.ndarray) -> float:
        """x^T precision^-1 x."""
        L = self.cholesky()
        v = solve_triangular(L, x, lower=True)
        return float(v @ v)

    def plugin_noise_variance(self) -> float:
        if self.shape <= 1:
            raise ShapeTooSmall(f"plug-in noise variance needs shape > 1, got {self.shape}")
        return self.rate / (self.shape - 1.0)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "precision": self.precision.tolist(),
            "shape": self.shape,
            "rate": self.rate,
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, state: dict):
        return cls(state["mean"], state["precision"], state["shape"], state["rate"], state.get("n_obs", 0))

    def __copy__(self):
        return ArmPosterior(self.mean.copy(), self.precision.copy(), self.shape, self.rate, self.n_obs)

    def __deepcopy__(self, memodict={}):
        return self.__copy__()


def posterior_update(posterior: ArmPosterior, contexts, rewards) -> ArmPosterior:
    X = np.asarray(contexts, dtype=float)
    y = np.asarray(rewards, dtype=float).reshape(-1)
    if X.size == 0 and y.size == 0:
        return copy.copy(posterior)
    X = X.reshape(len(y), -1) if X.ndim == 1 else X
    if X.ndim != 2 or X.shape[1] != posterior.dim:
        raise DimensionMismatch(f"contexts have shape {X.shape}, posterior dimension is {posterior.dim}")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} contexts but {y.shape[0]} rewards")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("contexts and rewards must be finite")

    precision = posterior.precision + X.T @ X
    precision = 0.5 * (precision + precision.T)
    try:
        factor = cholesky(precision, lower=True)
    except LinAlgError as e:
        raise CholeskyFailure(f"updated precision is not positive-definite: {e}") from e
    mean = cho_solve((factor, True), posterior.precision @ posterior.mean + X.T @ y)

    # Residual form of b' = b + (y'y + m'Lm - m_n'L_n m_n) / 2
    residual = y - X @ mean
    shift = mean - posterior.mean
    rate = posterior.rate + 0.5 * (residual @ residual + shift @ posterior.precision @ shift)
    assert rate > 0, "rate must stay positive after a finite update"

    return ArmPosterior(mean, precision, posterior.shape + 0.5 * len(y), rate, posterior.n_obs + len(y))


class BanditState:
    """Per-arm posteriors of the shared two-arm bandit plus the prior they started from."""

    def __init__(self, arms: Dict[str, ArmPosterior], seed: int, prior: Optional[dict] = None, feature_names=None):
        if set(arms) != set(ARMS):
            raise ValueError(f"a bandit state needs arms {ARMS}, got {sorted(arms)}")
        if arms[TREAT].dim != arms[CONTROL].dim:
            raise DimensionMismatch("treat and control posteriors have different dimensions")
        self.arms = arms
        self.seed = int(seed)
        self.prior = dict(prior or {})
        self.feature_names = list(feature_names) if feature_names is not None else None

    @classmethod
    def initial(cls, dim: int, seed: int, mean: float = 0.0, precision: float = 1.0, shape: float = 2.0, rate: float = 1.0, feature_names=None):
        prior = {"mean": mean, "precision": precision, "shape": shape, "rate": rate}
        arms = {arm: ArmPosterior.prior(dim, **prior) for arm in ARMS}
        return cls(arms, seed, prior, feature_names)

    @property
    def dim(self) -> int:
        return self.arms[TREAT].dim

    @property
    def n_obs(self) -> int:
        return sum(a.n_obs for a in self.arms.values())

    def snapshot(self) -> "BanditState":
        return BanditState({k: copy.copy(v) for k, v in self.arms.items()}, self.seed, self.prior, self.feature_names)

    def to_dict(self) -> dict:
        return {
            "arms": {k: v.to_dict() for k, v in self.arms.items()},
            "seed": self.seed,
            "prior": self.prior,
            "feature_names": self.feature_names,
        }

    @classmethod
    def from_dict(cls, state: dict):
        arms = {k: ArmPosterior.from_dict(v) for k, v in state["arms"].items()}
        return cls(arms, state["seed"], state.get("prior"), state.get("feature_names"))


class Assignment(BaseModel):
    arm: str
    scores: Dict[str, float]


def user_rng(seed: int, week: int, user: str) -> np.random.Generator:
    """Independent stream per (seed, week, user); order of evaluation never matters."""
    return np.random.default_rng([int(seed), int(week), stable_hash(user)])


def _check_context(state: BanditState, context) -> np.ndarray:
    x = np.asarray(context, dtype=float).reshape(-1)
    if x.shape[0] != state.dim:
        raise DimensionMismatch(f"context has length {x.shape[0]}, bandit dimension is {state.dim}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("context must be finite")
    return x


def sample_score(posterior: ArmPosterior, x: np.ndarray, rng: np.random.Generator) -> float:
    # s2 ~ InvGamma(a, b), then w ~ N(mean, s2 * precision^-1)
    noise_variance = posterior.rate / rng.gamma(posterior.shape)
    L = posterior.cholesky()
    z = rng.standard_normal(posterior.dim)
    weights = posterior.mean + np.sqrt(noise_variance) * solve_triangular(L.T, z, lower=False)
    return float(x @ weights)


def sample_scores(posterior: ArmPosterior, x: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """`n` independent Thompson draws of x . w at once."""
    noise_variance = posterior.rate / rng.gamma(posterior.shape, size=n)
    L = posterior.cholesky()
    z = rng.standard_normal((posterior.dim, n))
    weights = posterior.mean[:, None] + np.sqrt(noise_variance)[None, :] * solve_triangular(L.T, z, lower=False)
    return x @ weights


def thompson_assign(state: BanditState, context, rng: np.random.Generator) -> Assignment:
    x = _check_context(state, context)
    scores = {arm: sample_score(state.arms[arm], x, rng) for arm in ARMS}
    # Ties go to control (no message)
    arm = TREAT if scores[TREAT] > scores[CONTROL] else CONTROL
    return Assignment(arm=arm, scores=scores)


def _mean_and_scale(state: BanditState, x: np.ndarray):
    treat, control = state.arms[TREAT], state.arms[CONTROL]
    delta = treat.mean - control.mean
    M = treat.plugin_noise_variance() * np.linalg.inv(treat.precision) + control.plugin_noise_variance() * np.linalg.inv(control.precision)
    M = 0.5 * (M + M.T)
    return delta, M


def arm_probability(state: BanditState, context, method: str = "analytic", n: int = 10000, rng: Optional[np.random.Generator] = None) -> float:
    """
    P(treat score > control score) under the joint posterior.

    analytic: normal approximation with plug-in noise variance b/(a-1) per arm,
        P = Phi(x.(m_t - m_c) / s(x)),  s^2 = sum_arms b/(a-1) x' precision^-1 x.
    monte_carlo: fraction of `n` Thompson draws won by treat.
    """
    x = _check_context(state, context)
    if method == "analytic":
        for posterior in state.arms.values():
            posterior.cholesky()
        treat, control = state.arms[TREAT], state.arms[CONTROL]
        diff = float(x @ (treat.mean - control.mean))
        variance = treat.plugin_noise_variance() * treat.covariance_quadratic(x) + control.plugin_noise_variance() * control.covariance_quadratic(x)
        if variance <= 0:
            return 0.5 if diff == 0 else float(diff > 0)
        return float(norm.cdf(diff / np.sqrt(variance)))
    if method == "monte_carlo":
        if rng is None:
            rng = np.random.default_rng(state.seed)
        wins = sample_scores(state.arms[TREAT], x, rng, n) > sample_scores(state.arms[CONTROL], x, rng, n)
        return float(np.mean(wins))
    raise ValueError(f"unknown method {method!r}")


def arm_probability_jacobian(state: BanditState, context) -> np.ndarray:
    """d P(treat | x) / dx of the analytic arm probability, both the mean and s(x) terms included."""
    x = _check_context(state, context)
    delta, M = _mean_and_scale(state, x)
    m = float(x @ delta)
    Mx = M @ x
    s2 = float(x @ Mx)
    if s2 <= 0:
        return np.zeros_like(x)
    s = np.sqrt(s2)
    g = m / s
    grad_g = delta / s - m * Mx / s ** 3
    return norm.pdf(g) * grad_g


class SensitivityReport(BaseModel):
    feature_names: list
    sensitivity: list
    raw_mean: list
    raw_std: list
    thresholds: list
    n_participants: int


def soft_threshold(values: np.ndarray, threshold) -> np.ndarray:
    return np.sign(values) * np.maximum(np.abs(values) - threshold, 0.0)


def sensitivity(state: BanditState, contexts, feature_names=None, drop_intercept: bool = True) -> SensitivityReport:
    """
    Per-feature Jacobian of the treat probability, soft-thresholded per participant at half
    the sample standard deviation of that feature's derivative, then averaged.
    """
    X = np.asarray(contexts, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientSample(f"sensitivity needs at least 2 participants, got {0 if X.ndim != 2 else X.shape[0]}")
    J = np.vstack([arm_probability_jacobian(state, x) for x in X])
    names = list(feature_names) if feature_names is not None else (state.feature_names or [f"x{j}" for j in range(X.shape[1])])
    if drop_intercept:
        J = J[:, 1:]
        names = names[1:] if len(names) == X.shape[1] else names

    thresholds = 0.5 * J.std(axis=0, ddof=1)
    report = soft_threshold(J, thresholds).mean(axis=0)
    return SensitivityReport(
        feature_names=names,
        sensitivity=report.tolist(),
        raw_mean=J.mean(axis=0).tolist(),
        raw_std=J.std(axis=0, ddof=1).tolist(),
        thresholds=thresholds.tolist(),
        n_participants=X.shape[0],
    )


def scale_rewards(rewards, scale: float = 1000.0, winsor_quantile: float = 0.99) -> np.ndarray:
    """Rewards in `scale` currency units, winsorized at the batch's upper quantile."""
    y = np.asarray(rewards, dtype=float) / scale
    if y.size == 0 or winsor_quantile >= 1.0:
        return y
    return np.minimum(y, np.quantile(y, winsor_quantile))
