from datetime import datetime, timedelta, timezone

import pytest

from configs import ContextSpec, EligibilityCriteria, ExperimentConfig, FeatureDescriptor, SimConfig
from events import EventKind, EventRecord, LoginPayload, NudgePayload, OrderLine, OrderPayload

# A Monday, midnight UTC
T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)


def at(day: float, hours: float = 0.0) -> datetime:
    return T0 + timedelta(days=day, hours=hours)


def login(user, pharmacy, when, lang="id", region="Jakarta", seconds=60.0):
    return EventRecord(
        timestamp=when,
        user_id=user,
        pharmacy_id=pharmacy,
        kind=EventKind.LOGIN,
        payload=LoginPayload(lang=lang, region=region, session_seconds=seconds),
    )


def order(user, pharmacy, when, lines):
    """lines: [(sku, qty, price)]"""
    return EventRecord(
        timestamp=when,
        user_id=user,
        pharmacy_id=pharmacy,
        kind=EventKind.ORDER,
        payload=OrderPayload(lines=[OrderLine(sku=s, quantity=q, unit_price=p) for s, q, p in lines]),
    )


def nudge(kind, user, pharmacy, when, decision="d1", anchor="A", target="B"):
    return EventRecord(
        timestamp=when,
        user_id=user,
        pharmacy_id=pharmacy,
        kind=kind,
        payload=NudgePayload(decision_id=decision, anchor_sku=anchor, target_sku=target),
    )


def weekly_logins(user, pharmacy, weeks, start_day=0, **kwargs):
    return [login(user, pharmacy, at(start_day + 7 * w, 9), **kwargs) for w in range(weeks)]


@pytest.fixture
def small_sim_config():
    return SimConfig(n_pharmacies=40, n_skus=12, n_blocks=3, history_weeks=10, seed=11, uplift_effect=1.15, close_probability=0.1)


@pytest.fixture
def small_context():
    return ContextSpec(
        features=[
            FeatureDescriptor(name="days_since_last_nudge", extractor="days_since_last_nudge", normalization="minmax_cap", cap=28),
            FeatureDescriptor(name="order_days_30d", extractor="order_days", window_days=30, normalization="zscore"),
            FeatureDescriptor(name="expenditure_30d", extractor="expenditure", window_days=30, normalization="zscore"),
        ]
    )


@pytest.fixture
def small_experiment(small_context):
    """Starts right at the end of SimConfig's default history."""
    return ExperimentConfig(
        name="toy",
        start="2024-02-05",
        duration_weeks=2,
        pure_control_fraction=0.3,
        eligibility=EligibilityCriteria(min_login_days=2, top_spender_exclusion_quantile=1.0),
        context=small_context,
        top_k=50,
        seed=5,
    )
