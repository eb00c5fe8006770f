import json
import logging
import os
from datetime import datetime, timedelta
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, root_validator

from bandit import (
    BanditState,
    ShapeTooSmall,
    TREAT,
    CONTROL,
    arm_probability,
    posterior_update,
    scale_rewards,
    thompson_assign,
    user_rng,
)
from configs import ExperimentConfig
from events import (
    EventIndex,
    EventKind,
    EventRecord,
    NudgePayload,
    as_index,
    merge_events,
    read_event_log,
    save_event_log,
)
from features import CohortStats, build_contexts, eligible_cohort, fit_cohort_stats
from recommender import NoEligiblePair, build_candidates, build_profile, load_stock, recommend_pair
from utils import NudgeEngineError, parallel_map, stable_hash, to_json

logger = logging.getLogger(__name__)

SPLIT_MODULUS = 10 ** 6


class Group(str, Enum):
    PURE_CONTROL = "pure_control"
    ADAPTIVE = "adaptive"


class Arm(str, Enum):
    TREAT = TREAT
    CONTROL = CONTROL


class Reaction(str, Enum):
    OPENED = "opened"
    CLOSED = "closed"
    IGNORED = "ignored"
    NOT_APPLICABLE = "not_applicable"


class WindowNotElapsed(NudgeEngineError):
    def __init__(self, decision_id: str, window_end: datetime, log_end: Optional[datetime]):
        self.decision_id = decision_id
        self.window_end = window_end
        self.log_end = log_end
        super().__init__(f"decision {decision_id}: reward window ends {window_end.isoformat()} but the log ends {log_end.isoformat() if log_end else 'before it starts'}")


class StageError(NudgeEngineError):
    def __init__(self, week: int, user: Optional[str], cause: Exception):
        self.week = week
        self.user = user
        self.cause = cause
        who = f", user {user}" if user else ""
        super().__init__(f"week {week}{who}: {type(cause).__name__}: {cause}")


class DecisionRecord(BaseModel):
    decision_id: str
    week: int
    user_id: str
    pharmacy_id: str
    decision_time: datetime
    group: Group
    arm: Optional[Arm] = None
    treat_probability: Optional[float] = None
    context: List[float]
    sent: bool = False
    anchor_sku: Optional[str] = None
    target_sku: Optional[str] = None
    recommendation_reason: Optional[str] = None
    reward: Optional[float] = None
    reaction: Reaction = Reaction.NOT_APPLICABLE

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        if values["group"] == Group.PURE_CONTROL:
            if values.get("arm") is not None or values.get("anchor_sku") is not None or values.get("sent"):
                raise ValueError("pure-control records carry no arm and no pair")
        if values.get("sent") and (values.get("arm") != Arm.TREAT or values.get("target_sku") is None):
            raise ValueError("only treat records with a pair can be sent")
        if values.get("reward") is not None and values["reward"] < 0:
            raise ValueError("reward must be >= 0")
        return values


def decision_id(config: ExperimentConfig, week: int, user: str) -> str:
    return f"{config.name}-w{week:02d}-{user}"


def split_pure_control(cohort, fraction: float, seed: int) -> Tuple[set, set]:
    """Keyed-hash split; independent of cohort order and stable across runs."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    threshold = fraction * SPLIT_MODULUS
    pure_control, adaptive = set(), set()
    for user in cohort:
        if stable_hash(seed, user) % SPLIT_MODULUS < threshold:
            pure_control.add(user)
        else:
            adaptive.add(user)
    return pure_control, adaptive


def _treat_probability(state: BanditState, context) -> Optional[float]:
    try:
        return arm_probability(state, context)
    except ShapeTooSmall:
        return None


def run_decision_point(
    state: BanditState,
    events,
    config: ExperimentConfig,
    week: int,
    adaptive,
    pure_control=(),
    stats: Optional[CohortStats] = None,
    stock: Optional[set] = None,
) -> Tuple[List[DecisionRecord], List[EventRecord]]:
    """
    Assign every adaptive user against a frozen snapshot of `state`, pick pairs for the
    treated ones and return the week's records (pure control included) and nudge_sent events.
    """
    index = as_index(events)
    as_of = config.decision_time(week)
    snapshot = state.snapshot()
    users = sorted(set(adaptive) | set(pure_control))
    contexts = build_contexts(index, users, config.context, as_of, stats)
    candidates = build_candidates(index, stock, as_of, config.top_k, config.candidate_lookback_days)

    def decide(user: str) -> DecisionRecord:
        try:
            x = contexts[user].values
            record = dict(
                decision_id=decision_id(config, week, user),
                week=week,
                user_id=user,
                pharmacy_id=index.pharmacy_of(user, as_of),
                decision_time=as_of,
                context=x,
            )
            if user not in adaptive:
                return DecisionRecord(group=Group.PURE_CONTROL, **record)

            assignment = thompson_assign(snapshot, x, user_rng(snapshot.seed, week, user))
            record.update(group=Group.ADAPTIVE, arm=assignment.arm, treat_probability=_treat_probability(snapshot, x))
            if assignment.arm != TREAT:
                return DecisionRecord(**record)
            try:
                profile = build_profile(index, user, as_of, config.profile_lookback_days)
                pair = recommend_pair(profile, candidates)
            except NoEligiblePair:
                logger.warning("SkippedNoPair: week %d, user %s has no eligible pair", week, user)
                return DecisionRecord(**record)
            record.update(sent=True, anchor_sku=pair.anchor_sku, target_sku=pair.target_sku, recommendation_reason=pair.reason.value, reaction=Reaction.IGNORED)
            return DecisionRecord(**record)
        except NudgeEngineError as e:
            raise StageError(week, user, e) from e

    records = parallel_map(decide, users)
    sent = [
        EventRecord(
            timestamp=r.decision_time,
            user_id=r.user_id,
            pharmacy_id=r.pharmacy_id,
            kind=EventKind.NUDGE_SENT,
            payload=NudgePayload(decision_id=r.decision_id, anchor_sku=r.anchor_sku, target_sku=r.target_sku),
        )
        for r in records
        if r.sent
    ]
    n_treat = sum(r.arm == Arm.TREAT for r in records)
    logger.info("Week %d: %d adaptive, %d pure control, %d treat, %d nudges sent", week, len(set(adaptive)), len(set(pure_control)), n_treat, len(sent))
    return records, sent


def _reaction(index: EventIndex, record: DecisionRecord, expiry_days: int) -> Reaction:
    expiry = record.decision_time + timedelta(days=expiry_days)
    for event in index.decision_events(record.decision_id):
        if record.decision_time <= event.timestamp <= expiry:
            if event.kind == EventKind.NUDGE_OPENED:
                return Reaction.OPENED
            if event.kind == EventKind.NUDGE_CLOSED:
                return Reaction.CLOSED
    return Reaction.IGNORED


def collect_rewards(events, decisions: List[DecisionRecord], reward_window_days: int, expiry_days: int = 7, log_end: Optional[datetime] = None) -> List[DecisionRecord]:
    """Reward = pharmacy spend in (decision_time, decision_time + window]; reaction from the nudge lifecycle."""
    index = as_index(events)
    log_end = log_end if log_end is not None else index.end
    updated = []
    for record in decisions:
        window_end = record.decision_time + timedelta(days=reward_window_days)
        if log_end is None or log_end < window_end:
            raise WindowNotElapsed(record.decision_id, window_end, log_end)
        reward = index.pharmacy_spend(record.pharmacy_id, record.decision_time, window_end, closed="right")
        reaction = _reaction(index, record, expiry_days) if record.sent else record.reaction
        updated.append(record.copy(update={"reward": float(reward), "reaction": reaction}))
    return updated


def expire_nudges(events, as_of: datetime, expiry_days: int) -> List[EventRecord]:
    """nudge_expired for every message untouched for more than `expiry_days`; already expired ones are skipped."""
    index = as_index(events)
    expiry = timedelta(days=expiry_days)
    expired = []
    for decision, lifecycle in index.by_decision.items():
        sent = [e for e in lifecycle if e.kind == EventKind.NUDGE_SENT]
        if not sent:
            continue
        sent = sent[0]
        if as_of - sent.timestamp <= expiry:
            continue
        touched = any(
            e.kind == EventKind.NUDGE_EXPIRED or (e.kind in (EventKind.NUDGE_OPENED, EventKind.NUDGE_CLOSED) and e.timestamp <= sent.timestamp + expiry)
            for e in lifecycle
        )
        if not touched:
            expired.append(sent.copy(update={"kind": EventKind.NUDGE_EXPIRED, "timestamp": sent.timestamp + expiry}))
    return expired


def update_bandit(state: BanditState, records: List[DecisionRecord], scale: float, winsor_quantile: float) -> BanditState:
    """
    Apply one week's adaptive (context, reward) pairs per arm. Treat-assigned users that
    were not sent a nudge are left out.
    """
    used = [r for r in records if r.group == Group.ADAPTIVE and (r.arm == Arm.CONTROL or r.sent)]
    if not used:
        return state
    rewards = scale_rewards([r.reward for r in used], scale, winsor_quantile)
    updated = state.snapshot()
    for arm in (Arm.TREAT, Arm.CONTROL):
        mask = np.array([r.arm == arm for r in used])
        if mask.any():
            X = np.array([r.context for r in used])[mask]
            updated.arms[arm.value] = posterior_update(updated.arms[arm.value], X, rewards[mask])
    return updated


class ExperimentResult(NamedTuple):
    decisions: List[DecisionRecord]
    state: BanditState
    events: List[EventRecord]
    weeks_completed: int


class NudgeEngine:
    """
    Weekly experiment loop: decision point, advance time (simulator or recorded log),
    collect rewards, update the bandit, sweep expired nudges, checkpoint.
    """

    def __init__(self, config: ExperimentConfig, events, simulator=None, stock: Optional[set] = None, out_dir: Optional[str] = None):
        self.config = config
        self.events = list(events.records if isinstance(events, EventIndex) else events)
        self.simulator = simulator
        self.stock = stock if stock is not None else (load_stock(config.stock_path) if config.stock_path else None)
        self.out_dir = out_dir
        self.state = None
        self.stats = None
        self.adaptive = set()
        self.pure_control = set()
        self.decisions = []
        self.week = 0
        self.log_end = max((e.timestamp for e in self.events), default=None)

    def _add_events(self, new_events):
        if new_events:
            self.events = merge_events(self.events, new_events)

    def initialize(self):
        start = self.config.decision_time(1)
        if self.simulator is not None and self.simulator.clock < start:
            self._add_events(self.simulator.advance(start))
            self.log_end = start
        try:
            index = EventIndex(self.events)
            cohort = eligible_cohort(index, self.config.eligibility, start) - set(self.config.excluded_users)
            self.pure_control, self.adaptive = split_pure_control(cohort, self.config.pure_control_fraction, self.config.seed)
            self.stats = fit_cohort_stats(index, cohort, self.config.context, start)
        except NudgeEngineError as e:
            raise StageError(1, None, e) from e

        prior = self.config.prior
        self.state = BanditState.initial(self.config.context.dimension, self.config.seed, prior.mean, prior.precision, prior.shape, prior.rate, self.config.context.column_names)
        logger.info("Experiment %s: cohort of %d users, %d adaptive, %d pure control", self.config.name, len(cohort), len(self.adaptive), len(self.pure_control))

    def step(self):
        week = self.week + 1
        t = self.config.decision_time(week)
        records, sent = run_decision_point(self.state, EventIndex(self.events), self.config, week, self.adaptive, self.pure_control, self.stats, self.stock)
        self._add_events(sent)

        if self.simulator is not None:
            week_end = t + timedelta(days=7)
            self._add_events(self.simulator.advance(week_end, sent))
            self.log_end = week_end
        else:
            self.log_end = max((e.timestamp for e in self.events), default=None)

        try:
            index = EventIndex(self.events)
            records = collect_rewards(index, records, self.config.reward_window_days, self.config.nudge_expiry_days, self.log_end)
            self.state = update_bandit(self.state, records, self.config.reward_scale, self.config.reward_winsor_quantile)
            self._add_events(expire_nudges(index, self.log_end, self.config.nudge_expiry_days))
        except NudgeEngineError as e:
            raise StageError(week, None, e) from e

        self.decisions.extend(records)
        self.week = week
        if self.out_dir is not None:
            self.checkpoint(self.out_dir)
        return records

    def run(self, stop_after_week: Optional[int] = None) -> ExperimentResult:
        if self.state is None:
            self.initialize()
        last = self.config.duration_weeks if stop_after_week is None else min(stop_after_week, self.config.duration_weeks)
        while self.week < last:
            self.step()
        return ExperimentResult(self.decisions, self.state, self.events, self.week)

    def checkpoint(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "decisions.jsonl"), "w") as file:
            for record in self.decisions:
                file.write(record.json() + "\n")
        save_event_log(os.path.join(out_dir, "events.jsonl"), self.events)
        to_json(self.state.to_dict(), os.path.join(out_dir, "bandit_state.json"))
        to_json(
            {
                "week": self.week,
                "log_end": self.log_end.isoformat() if self.log_end else None,
                "adaptive": sorted(self.adaptive),
                "pure_control": sorted(self.pure_control),
                "stats": json.loads(self.stats.json()),
            },
            os.path.join(out_dir, "checkpoint.json"),
        )

    @classmethod
    def resume(cls, config: ExperimentConfig, out_dir: str, simulator=None, stock: Optional[set] = None) -> "NudgeEngine":
        with open(os.path.join(out_dir, "checkpoint.json"), "r") as file:
            checkpoint = json.load(file)
        engine = cls(config, read_event_log(os.path.join(out_dir, "events.jsonl")), simulator, stock, out_dir)
        with open(os.path.join(out_dir, "bandit_state.json"), "r") as file:
            engine.state = BanditState.from_dict(json.load(file))
        with open(os.path.join(out_dir, "decisions.jsonl"), "r") as file:
            engine.decisions = [DecisionRecord.parse_raw(line) for line in file if line.strip()]
        engine.week = checkpoint["week"]
        engine.adaptive = set(checkpoint["adaptive"])
        engine.pure_control = set(checkpoint["pure_control"])
        engine.stats = CohortStats.parse_obj(checkpoint["stats"])
        if checkpoint["log_end"] is not None:
            engine.log_end = datetime.fromisoformat(checkpoint["log_end"])
            if simulator is not None:
                simulator.clock = engine.log_end
        logger.info("Resuming experiment %s after week %d", config.name, engine.week)
        return engine


def run_experiment(config: ExperimentConfig, events, simulator=None, stock: Optional[set] = None, out_dir: Optional[str] = None) -> ExperimentResult:
    return NudgeEngine(config, events, simulator, stock, out_dir).run()
