"""
Cohort eligibility and per-user context vectors computed from the event log as of a decision point.

Every computation only looks at events strictly before `as_of`.
"""
import logging
from datetime import datetime, timedelta
from typing import Dict, Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, validator

from configs import ContextSpec, EligibilityCriteria, Extractor, FeatureDescriptor, Normalization
from events import EventKind, as_index, between
from utils import NudgeEngineError, parallel_map

logger = logging.getLogger(__name__)

ZSCORE_CLIP = 5.0
DEFAULT_NUDGE_RECENCY_CAP_DAYS = 28.0
SECONDS_PER_DAY = 86400.0

LOGIN = {EventKind.LOGIN}


class EmptyLog(NudgeEngineError):
    def __init__(self, as_of: datetime):
        self.as_of = as_of
        super().__init__(f"no events before {as_of.isoformat()}")


class UnknownCategory(NudgeEngineError):
    def __init__(self, feature: str, value):
        self.feature = feature
        self.value = value
        super().__init__(f"feature '{feature}': category {value!r} is not in the one-hot list")


class ContextVector(BaseModel):
    as_of: datetime
    user_id: str
    values: List[float]

    class Config:
        allow_mutation = False

    @validator("values")
    def _finite(cls, v):
        if not np.all(np.isfinite(v)):
            raise ValueError("context values must be finite")
        return v

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


class CohortStats(BaseModel):
    """Mean/std of every z-scored feature, frozen at experiment start."""
    as_of: datetime
    mean: Dict[str, float] = {}
    std: Dict[str, float] = {}


def _days(delta: timedelta) -> float:
    return delta.total_seconds() / SECONDS_PER_DAY


def _last_login_value(index, user, as_of, key):
    for event in reversed(index.user_events(user, end=as_of, kinds=LOGIN)):
        value = getattr(event.payload, key)
        if value is not None:
            return value
    return None


def eligible_cohort(events, criteria: EligibilityCriteria, as_of: datetime) -> set:
    index = as_index(events)
    users = sorted(index.users_before(as_of))
    if not users:
        raise EmptyLog(as_of)
    pharmacies = sorted(index.pharmacies_before(as_of))

    # Pharmacy-level expenditure decides the top-spender exclusion
    spend_start = as_of - timedelta(days=criteria.spend_lookback_days)
    spend = {p: index.pharmacy_spend(p, spend_start, as_of) for p in pharmacies}
    threshold = float(np.quantile(list(spend.values()), criteria.top_spender_exclusion_quantile))

    login_start = as_of - timedelta(days=criteria.min_weekly_login_rate_window_days)
    recent_start = as_of - timedelta(days=criteria.require_login_within_days)

    eligible = set()
    reasons = {"login_rate": 0, "recency": 0, "pharmacy_size": 0, "top_spender": 0, "language": 0}
    for user in users:
        pharmacy = index.pharmacy_of(user, as_of)
        login_days = {e.timestamp.date() for e in index.user_events(user, login_start, as_of, kinds=LOGIN)}
        if len(login_days) < criteria.min_login_days:
            reasons["login_rate"] += 1
            continue
        if not index.user_events(user, recent_start, as_of, kinds=LOGIN):
            reasons["recency"] += 1
            continue
        if len(index.pharmacy_users(pharmacy, as_of)) > criteria.max_users_per_pharmacy:
            reasons["pharmacy_size"] += 1
            continue
        if spend[pharmacy] > threshold:
            reasons["top_spender"] += 1
            continue
        if criteria.language is not None and _last_login_value(index, user, as_of, "lang") != criteria.language:
            reasons["language"] += 1
            continue
        eligible.add(user)

    logger.info("Eligible cohort as of %s: %d of %d users (excluded: %s)", as_of.isoformat(), len(eligible), len(users), reasons)
    return eligible


def _recency_cap(feature: FeatureDescriptor) -> float:
    if feature.cap is not None:
        return feature.cap
    if feature.window_days is not None:
        return float(feature.window_days)
    return DEFAULT_NUDGE_RECENCY_CAP_DAYS


def _extract(index, user: str, pharmacy: Optional[str], feature: FeatureDescriptor, as_of: datetime):
    extractor = feature.extractor
    start = as_of - timedelta(days=feature.window_days) if feature.window_days is not None else None

    if extractor == Extractor.REGION:
        return _last_login_value(index, user, as_of, "region")

    if extractor == Extractor.DAYS_SINCE_LAST_NUDGE:
        sent = index.user_events(user, end=as_of, kinds={EventKind.NUDGE_SENT})
        if not sent:
            return _recency_cap(feature)
        return _days(as_of - sent[-1].timestamp)

    if extractor == Extractor.ORDER_DAYS:
        if pharmacy is None:
            return 0.0
        orders = between(index.pharmacy_orders.get(pharmacy, []), start, as_of)
        return float(len({e.timestamp.date() for e in orders}))

    if extractor == Extractor.EXPENDITURE:
        if pharmacy is None:
            return 0.0
        return float(index.pharmacy_spend(pharmacy, start, as_of))

    if extractor == Extractor.MEAN_DAYS_BETWEEN_LOGINS:
        days = sorted({e.timestamp.date() for e in index.user_events(user, start, as_of, kinds=LOGIN)})
        if len(days) < 2:
            return float(feature.window_days)
        return float(np.mean([(b - a).days for a, b in zip(days[:-1], days[1:])]))

    if extractor == Extractor.DAYS_SINCE_FIRST_LOGIN:
        logins = index.user_events(user, end=as_of, kinds=LOGIN)
        return _days(as_of - logins[0].timestamp) if logins else 0.0

    if extractor == Extractor.NUDGES_OPENED:
        return float(len(index.user_events(user, start, as_of, kinds={EventKind.NUDGE_OPENED})))

    if extractor == Extractor.APP_MINUTES:
        logins = index.user_events(user, start, as_of, kinds=LOGIN)
        return sum(e.payload.session_seconds or 0.0 for e in logins) / 60.0

    raise ValueError(f"unsupported extractor {extractor}")


def raw_features(events, user: str, spec: ContextSpec, as_of: datetime) -> Dict[str, object]:
    """Un-normalized feature values keyed by feature name (categoricals stay strings)."""
    index = as_index(events)
    pharmacy = index.pharmacy_of(user, as_of)
    return {f.name: _extract(index, user, pharmacy, f, as_of) for f in spec.features}


def fit_cohort_stats(events, users: Iterable[str], spec: ContextSpec, as_of: datetime) -> CohortStats:
    index = as_index(events)
    users = sorted(users)
    zscored = [f for f in spec.features if f.normalization == Normalization.ZSCORE]
    stats = CohortStats(as_of=as_of)
    if not zscored or not users:
        return stats

    rows = parallel_map(lambda u: raw_features(index, u, spec, as_of), users)
    for feature in zscored:
        values = np.array([row[feature.name] for row in rows], dtype=float)
        std = float(values.std())
        stats.mean[feature.name] = float(values.mean())
        stats.std[feature.name] = std if std > 0 else 1.0
    return stats


def _encode(feature: FeatureDescriptor, raw, stats: Optional[CohortStats]) -> List[float]:
    if feature.one_hot_categories is not None:
        encoded = [1.0 if raw == c else 0.0 for c in feature.one_hot_categories]
        if raw not in feature.one_hot_categories:
            if not feature.allow_other:
                raise UnknownCategory(feature.name, raw)
            return encoded + [1.0]
        return encoded + ([0.0] if feature.allow_other else [])

    value = float(raw)
    if feature.normalization == Normalization.MINMAX_CAP:
        cap = feature.cap if feature.cap is not None else float(feature.window_days)
        return [min(max(value, 0.0) / cap, 1.0)]
    if feature.normalization == Normalization.ZSCORE and stats is not None:
        z = (value - stats.mean[feature.name]) / stats.std[feature.name]
        return [float(np.clip(z, -ZSCORE_CLIP, ZSCORE_CLIP))]
    return [value]


def build_context(events, user: str, spec: ContextSpec, as_of: datetime, stats: Optional[CohortStats] = None) -> ContextVector:
    raw = raw_features(events, user, spec, as_of)
    values = [1.0]
    for feature in spec.features:
        values.extend(_encode(feature, raw[feature.name], stats))
    return ContextVector(as_of=as_of, user_id=user, values=values)


def build_contexts(events, users: Iterable[str], spec: ContextSpec, as_of: datetime, stats: Optional[CohortStats] = None) -> Dict[str, ContextVector]:
    index = as_index(events)
    users = sorted(users)
    vectors = parallel_map(lambda u: build_context(index, u, spec, as_of, stats), users)
    return dict(zip(users, vectors))
