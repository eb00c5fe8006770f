"""
Statistical tests and models of the impact analysis: Welch t-tests with Cohen's d and
post-hoc power, the daily/accumulated expenditure series they run on, strata, a
logistic regression fitted by IRLS and a random-intercept linear mixed model fitted by REML.
"""
import logging
from datetime import datetime, timedelta
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy import optimize
from scipy.stats import norm, t as student_t

from events import EventKind, as_index
from utils import NudgeEngineError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.10
BASELINE_WEEKS = 8
SEPARATION_COEF = 25.0
FITTED_PROB_FLOOR = 1e-8
MAX_INFORMATION_COND = 1e12


class DegenerateSample(NudgeEngineError):
    pass


class SeparationDetected(NudgeEngineError):
    pass


class NonConvergence(NudgeEngineError):
    pass


class RankDeficientDesign(NudgeEngineError):
    pass


class TestResult(BaseModel):
    day: int = 0
    t_statistic: float
    df: float
    p_value: float
    cohen_d: float
    power: float
    mean_difference: float
    ci_low: float
    ci_high: float
    alpha: float
    significant: bool

    # not a pytest test class
    __test__ = False


def post_hoc_power(d: float, n_a: float, n_b: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Two-sided normal-approximation power at effect size d."""
    z = norm.ppf(1.0 - alpha / 2.0)
    lam = abs(d) * np.sqrt(n_a * n_b / (n_a + n_b))
    return float(norm.cdf(lam - z) + norm.cdf(-lam - z))


def solve_sample_size(d: float, alpha: float = DEFAULT_ALPHA, power: float = 0.8) -> float:
    """Per-group size (equal groups) at which `post_hoc_power` reaches `power`."""
    if d == 0:
        raise ValueError("no sample size detects a zero effect")
    if not alpha < power < 1.0:
        raise ValueError(f"power must be in (alpha, 1), got {power}")
    return float(optimize.brentq(lambda n: post_hoc_power(d, n, n, alpha) - power, 1.0, 1e12))


def welch_ttest(sample_a, sample_b, alpha: float = DEFAULT_ALPHA, day: int = 0) -> TestResult:
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n_a, n_b = len(a), len(b)
    if n_a < 2 or n_b < 2:
        raise DegenerateSample(f"each sample needs at least 2 values, got {n_a} and {n_b}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DegenerateSample("samples must be finite")

    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    pooled = ((n_a - 1) * var_a + (n_b - 1) * var_b) / (n_a + n_b - 2)
    if pooled == 0:
        raise DegenerateSample("both samples are constant")

    diff = a.mean() - b.mean()
    se_a, se_b = var_a / n_a, var_b / n_b
    se = np.sqrt(se_a + se_b)
    # Welch-Satterthwaite
    df = (se_a + se_b) ** 2 / (se_a ** 2 / (n_a - 1) + se_b ** 2 / (n_b - 1))
    t_stat = diff / se
    p_value = float(min(1.0, 2.0 * student_t.sf(abs(t_stat), df)))
    d = diff / np.sqrt(pooled)
    half_width = student_t.ppf(1.0 - alpha / 2.0, df) * se

    return TestResult(
        day=day,
        t_statistic=float(t_stat),
        df=float(df),
        p_value=p_value,
        cohen_d=float(d),
        power=post_hoc_power(d, n_a, n_b, alpha),
        mean_difference=float(diff),
        ci_low=float(diff - half_width),
        ci_high=float(diff + half_width),
        alpha=alpha,
        significant=p_value < alpha,
    )


class SeriesTable(BaseModel):
    """Per-participant daily values; rows follow `users`."""
    mode: str
    metric: str
    start: datetime
    users: List[str]
    groups: List[str]
    values: List[List[float]]

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float).reshape(len(self.users), -1)

    def group_matrix(self, group: str) -> np.ndarray:
        mask = np.array([g == group for g in self.groups], dtype=bool)
        return self.matrix[mask] if len(mask) else self.matrix


def participants(decisions) -> Dict[str, tuple]:
    """user -> (group, pharmacy) from the first record of each user."""
    seen = {}
    for record in sorted(decisions, key=lambda r: (r.week, r.user_id)):
        seen.setdefault(record.user_id, (record.group.value, record.pharmacy_id))
    return seen


def expenditure_series(decisions, events, mode: str = "accumulated", n_days: Optional[int] = None, metric: str = "expenditure") -> SeriesTable:
    """
    Daily pharmacy expenditure (or user login counts) of every participant, day 0 starting
    at the first decision time; `accumulated` is the running sum over days.
    """
    if mode not in ("daily", "accumulated"):
        raise ValueError(f"mode must be daily or accumulated, got {mode!r}")
    if metric not in ("expenditure", "logins"):
        raise ValueError(f"metric must be expenditure or logins, got {metric!r}")
    index = as_index(events)
    people = participants(decisions)
    start = min(r.decision_time for r in decisions)
    if n_days is None:
        n_days = 7 * max(r.week for r in decisions)
    users = sorted(people)

    daily = np.zeros((len(users), n_days))
    end = start + timedelta(days=n_days)
    for i, user in enumerate(users):
        if metric == "expenditure":
            pharmacy = people[user][1]
            series = [(e.timestamp, e.payload.expenditure) for e in index.pharmacy_orders.get(pharmacy, []) if start <= e.timestamp < end]
        else:
            series = [(e.timestamp, 1.0) for e in index.user_events(user, start, end, kinds={EventKind.LOGIN})]
        for ts, value in series:
            daily[i, int((ts - start).total_seconds() // 86400)] += value

    values = daily if mode == "daily" else np.cumsum(daily, axis=1)
    return SeriesTable(mode=mode, metric=metric, start=start, users=users, groups=[people[u][0] for u in users], values=values.tolist())


class EvolutionResult(BaseModel):
    mode: str
    results: List[TestResult]
    skipped_days: List[int]
    significant_fraction: float


def evolution_tests(matrix_a, matrix_b, alpha: float = DEFAULT_ALPHA, mode: str = "accumulated") -> EvolutionResult:
    """One Welch test per day (column); degenerate days are skipped and listed."""
    A = np.atleast_2d(np.asarray(matrix_a, dtype=float))
    B = np.atleast_2d(np.asarray(matrix_b, dtype=float))
    n_days = max(A.shape[1], B.shape[1])
    results, skipped = [], []
    for day in range(n_days):
        try:
            results.append(welch_ttest(A[:, day], B[:, day], alpha, day))
        except DegenerateSample as e:
            logger.debug("Day %d skipped: %s", day, e)
            skipped.append(day)
    fraction = sum(r.significant for r in results) / n_days if n_days else 0.0
    return EvolutionResult(mode=mode, results=results, skipped_days=skipped, significant_fraction=fraction)


def stratified_evolution_tests(matrix_a, matrix_b, labels_a: Sequence[str], labels_b: Sequence[str], alpha: float = DEFAULT_ALPHA, mode: str = "accumulated") -> Dict[str, EvolutionResult]:
    A, B = np.asarray(matrix_a, dtype=float), np.asarray(matrix_b, dtype=float)
    labels_a, labels_b = np.asarray(labels_a), np.asarray(labels_b)
    out = {}
    for stratum in sorted(set(labels_a.tolist()) | set(labels_b.tolist())):
        out[stratum] = evolution_tests(A[labels_a == stratum], B[labels_b == stratum], alpha, mode)
    return out


def summarize_evolution(evolution: EvolutionResult) -> dict:
    """Days with a significant effect, their average/largest effect and power, and the longest significant run."""
    significant = [r for r in evolution.results if r.significant]
    longest = run = 0
    previous = None
    for r in evolution.results:
        if not r.significant:
            run = 0
        elif previous is not None and previous.significant and r.day == previous.day + 1:
            run += 1
        else:
            run = 1
        previous = r
        longest = max(longest, run)
    summary = {
        "days_significant": len(significant),
        "significant_fraction": evolution.significant_fraction,
        "first_significant_day": significant[0].day if significant else None,
        "longest_significant_run": longest,
        "average_effect": None,
        "largest_effect": None,
        "average_power": None,
        "largest_power": None,
    }
    if significant:
        d = np.array([r.cohen_d for r in significant])
        power = np.array([r.power for r in significant])
        summary.update(
            average_effect=float(d.mean()),
            largest_effect=float(d[np.argmax(np.abs(d))]),
            average_power=float(power.mean()),
            largest_power=float(power.max()),
        )
    return summary


STRATA = ("region", "baseline_spend", "purchase_frequency")


def _terciles(values: Dict[str, float]) -> Dict[str, str]:
    x = np.array(list(values.values()), dtype=float)
    if len(x) == 0:
        return {}
    low, high = np.quantile(x, [1.0 / 3.0, 2.0 / 3.0])
    return {u: ("low" if v <= low else "mid" if v <= high else "high") for u, v in values.items()}


def assign_strata(decisions, events, kind: str, baseline_weeks: int = BASELINE_WEEKS) -> Dict[str, str]:
    """Stratum label of every participant from data before the first decision time."""
    index = as_index(events)
    people = participants(decisions)
    start = min(r.decision_time for r in decisions)
    baseline_start = start - timedelta(weeks=baseline_weeks)

    if kind == "region":
        labels = {}
        for user in people:
            regions = [e.payload.region for e in index.user_events(user, end=start, kinds={EventKind.LOGIN}) if e.payload.region]
            labels[user] = regions[-1] if regions else "unknown"
        return labels
    if kind == "baseline_spend":
        return _terciles({u: index.pharmacy_spend(p, baseline_start, start) for u, (_, p) in people.items()})
    if kind == "purchase_frequency":
        days = {}
        for user, (_, pharmacy) in people.items():
            orders = index.pharmacy_orders.get(pharmacy, [])
            days[user] = float(len({e.timestamp.date() for e in orders if baseline_start <= e.timestamp < start}))
        return _terciles(days)
    raise ValueError(f"unknown stratum {kind!r}, expected one of {STRATA}")


class RegressionEstimate(BaseModel):
    names: List[str]
    coefficients: List[float]
    standard_errors: List[float]
    z_values: List[float]
    p_values: List[float]
    ci_low: List[float]
    ci_high: List[float]
    alpha: float
    iterations: int
    converged: bool

    def coefficient(self, name: str) -> float:
        return self.coefficients[self.names.index(name)]

    def as_rows(self) -> List[dict]:
        return [
            {
                "name": n,
                "coefficient": c,
                "standard_error": s,
                "z": z,
                "p_value": p,
                "ci_low": lo,
                "ci_high": hi,
                "significant": p < self.alpha,
            }
            for n, c, s, z, p, lo, hi in zip(self.names, self.coefficients, self.standard_errors, self.z_values, self.p_values, self.ci_low, self.ci_high)
        ]


def _wald(names, beta, cov, alpha, iterations, converged) -> RegressionEstimate:
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    p = 2.0 * norm.sf(np.abs(z))
    q = norm.ppf(1.0 - alpha / 2.0)
    return RegressionEstimate(
        names=list(names),
        coefficients=beta.tolist(),
        standard_errors=se.tolist(),
        z_values=z.tolist(),
        p_values=p.tolist(),
        ci_low=(beta - q * se).tolist(),
        ci_high=(beta + q * se).tolist(),
        alpha=alpha,
        iterations=iterations,
        converged=converged,
    )


def logit_score(X, y, beta) -> np.ndarray:
    """Gradient of the log-likelihood."""
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    return X.T @ (y - p)


def fit_logit(X, y, names=None, alpha: float = DEFAULT_ALPHA, tol: float = 1e-8, max_iter: int = 100) -> RegressionEstimate:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    if set(np.unique(y).tolist()) != {0.0, 1.0}:
        raise SeparationDetected("the outcome needs both classes")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientDesign(f"design of {X.shape[1]} columns has rank {np.linalg.matrix_rank(X)}")

    beta = np.zeros(X.shape[1])
    for iteration in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = p * (1.0 - p)
        information = X.T @ (X * w[:, None])
        score = X.T @ (y - p)
        if np.linalg.cond(information) > MAX_INFORMATION_COND:
            raise SeparationDetected("information matrix became singular; the outcome is (quasi-)separated")
        beta = beta + np.linalg.solve(information, score)
        if np.any(np.abs(beta) > SEPARATION_COEF):
            raise SeparationDetected(f"coefficients diverge: {np.round(beta, 2).tolist()}")
        if np.max(np.abs(logit_score(X, y, beta))) < tol:
            break
    else:
        raise NonConvergence(f"IRLS did not converge in {max_iter} iterations")

    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    saturated = np.minimum(p, 1.0 - p) < FITTED_PROB_FLOOR
    if saturated.any():
        # the score can vanish while a covariate pattern is fitted to 0 or 1
        raise SeparationDetected(f"{int(saturated.sum())} observations fitted to probability 0 or 1; the outcome is quasi-separated")
    information = X.T @ (X * (p * (1.0 - p))[:, None])
    if np.linalg.cond(information) > MAX_INFORMATION_COND:
        raise SeparationDetected("information matrix at the optimum is singular; the outcome is quasi-separated")
    return _wald(names, beta, np.linalg.inv(information), alpha, iteration, True)


class LmmEstimate(BaseModel):
    fixed: RegressionEstimate
    random_intercept_variance: float
    residual_variance: float
    variance_ratio: float
    reml_objective: float
    converged: bool
    n_users: int
    n_observations: int


class _Grouped:
    """Per-group sums that make the random-intercept REML objective O(p^2 * groups)."""

    def __init__(self, X, y, groups):
        self.X, self.y = X, y
        _, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
        self.counts = counts.astype(float)
        self.sx = np.zeros((len(counts), X.shape[1]))
        np.add.at(self.sx, inverse, X)
        self.sy = np.bincount(inverse, weights=y, minlength=len(counts))
        self.XtX, self.Xty, self.yty = X.T @ X, X.T @ y, float(y @ y)

    def solve(self, lam: float):
        # H = I + lam * Z Z^T, block inverse I - c 11^T with c = lam / (1 + n lam)
        c = lam / (1.0 + self.counts * lam)
        XtHX = self.XtX - (self.sx * c[:, None]).T @ self.sx
        XtHy = self.Xty - (self.sx * c[:, None]).T @ self.sy
        yHy = self.yty - float(np.sum(c * self.sy ** 2))
        beta = np.linalg.solve(XtHX, XtHy)
        rss = yHy - float(beta @ XtHy)
        logdet_H = float(np.sum(np.log1p(self.counts * lam)))
        return beta, max(rss, 0.0), XtHX, logdet_H


def reml_objective(X, y, groups, lam: float) -> float:
    """-2 x restricted log-likelihood, profiled over the residual variance, up to a constant."""
    return _reml(_Grouped(np.asarray(X, dtype=float), np.asarray(y, dtype=float), np.asarray(groups)), lam)


def _reml(data: _Grouped, lam: float) -> float:
    beta, rss, XtHX, logdet_H = data.solve(lam)
    dof = len(data.y) - data.X.shape[1]
    if rss <= 0:
        return -np.inf
    _, logdet_XtHX = np.linalg.slogdet(XtHX)
    return float(dof * np.log(rss / dof) + logdet_H + logdet_XtHX)


def fit_lmm(X, y, groups, names=None, alpha: float = DEFAULT_ALPHA, log_bounds=(-12.0, 8.0), max_iter: int = 500) -> LmmEstimate:
    """
    Gaussian LMM y = X b + u_group + e, u ~ N(0, s2_u), e ~ N(0, s2_e), by REML profiled over
    log(lambda), lambda = s2_u / s2_e. The lambda = 0 boundary is always compared.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    groups = np.asarray(groups)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p or n <= p:
        raise RankDeficientDesign(f"design of {p} columns has rank {np.linalg.matrix_rank(X)} over {n} rows")

    data = _Grouped(X, y, groups)
    result = optimize.minimize_scalar(lambda s: _reml(data, np.exp(s)), bounds=log_bounds, method="bounded", options={"xatol": 1e-10, "maxiter": max_iter})
    if not result.success:
        raise NonConvergence(f"REML optimisation failed: {result.message}")

    lam = float(np.exp(result.x))
    objective = float(result.fun)
    boundary = _reml(data, 0.0)
    if boundary <= objective:
        lam, objective = 0.0, boundary

    beta, rss, XtHX, _ = data.solve(lam)
    sigma2 = rss / (n - p)
    fixed = _wald(names, beta, sigma2 * np.linalg.inv(XtHX), alpha, int(result.nfev), True)
    return LmmEstimate(
        fixed=fixed,
        random_intercept_variance=lam * sigma2,
        residual_variance=sigma2,
        variance_ratio=lam,
        reml_objective=objective,
        converged=True,
        n_users=len(data.counts),
        n_observations=n,
    )
