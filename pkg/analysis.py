"""
Impact analysis over the decisions and event log of a finished experiment.

RCT angle: adaptive vs pure control (daily/accumulated Welch tests, strata, logit, LMM).
Bandit angle: allocation over time, sensitivity of the treat probability, t-SNE of contexts.
Recommendation angle: reactions to messages and later purchases of recommended skus.
"""
import json
import logging
import os
from collections import defaultdict
from datetime import datetime, timedelta
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import numpy as np
import pandas as pd
from jsonschema import validate
from matplotlib import pyplot as plt
from pydantic import BaseModel

from bandit import CONTROL, TREAT, BanditState, InsufficientSample, SensitivityReport, arm_probability, sensitivity
from events import as_index
from NudgeEngine import Arm, Group, Reaction
from schemas import report_schema
from stat_functions import (
    BASELINE_WEEKS,
    DEFAULT_ALPHA,
    STRATA,
    EvolutionResult,
    LmmEstimate,
    NonConvergence,
    RankDeficientDesign,
    RegressionEstimate,
    SeparationDetected,
    assign_strata,
    evolution_tests,
    expenditure_series,
    fit_lmm,
    fit_logit,
    participants,
    stratified_evolution_tests,
    summarize_evolution,
)
from tsne import TooFewPoints, tsne_embed
from utils import to_json

logger = logging.getLogger(__name__)

ADAPTIVE = Group.ADAPTIVE.value
PURE_CONTROL = Group.PURE_CONTROL.value
LMM_COLUMNS = ["intercept", "adaptive_arm", "nudged_that_week", "baseline_expenditure"]
LOGIT_COLUMNS = ["intercept", "adaptive", "baseline_expenditure_thousands"]


class AllocationSeries(BaseModel):
    weekly_treat_fraction: List[float]
    mean_treat_fraction: float
    majority_nudged_weeks: int


class AnalysisReport(BaseModel):
    alpha: float
    n_days: int
    n_weeks: int
    group_sizes: Dict[str, int]
    daily: EvolutionResult
    accumulated: EvolutionResult
    login_daily: Optional[EvolutionResult] = None
    login_accumulated: Optional[EvolutionResult] = None
    ttest_summary: Dict[str, dict] = {}
    stratified: Dict[str, EvolutionResult] = {}
    logit: Optional[RegressionEstimate] = None
    lmm: Optional[LmmEstimate] = None
    allocation: AllocationSeries
    sensitivity: Optional[SensitivityReport] = None
    embedding: Optional[dict] = None
    reactions: dict
    weekly_reactions: List[dict] = []
    success_fraction: float
    notes: List[str] = []

    def to_dict(self) -> dict:
        return json.loads(self.json())


def bandit_allocation_series(decisions) -> AllocationSeries:
    """Treat share of the adaptive group per week; majority weeks have a share above one half."""
    by_week = defaultdict(list)
    for record in decisions:
        if record.group == Group.ADAPTIVE:
            by_week[record.week].append(record.arm == Arm.TREAT)
    fractions = [float(np.mean(by_week[w])) for w in sorted(by_week)]
    return AllocationSeries(
        weekly_treat_fraction=fractions,
        mean_treat_fraction=float(np.mean(fractions)) if fractions else 0.0,
        majority_nudged_weeks=sum(f > 0.5 for f in fractions),
    )


def reaction_breakdown(decisions) -> dict:
    sent = [r for r in decisions if r.sent]
    counts = {reaction: sum(r.reaction == reaction for r in sent) for reaction in (Reaction.OPENED, Reaction.CLOSED, Reaction.IGNORED)}
    total = len(sent)
    out = {reaction.value: (count / total if total else 0.0) for reaction, count in counts.items()}
    out["sent"] = total
    return out


def weekly_reaction_breakdown(decisions) -> List[dict]:
    by_week = defaultdict(list)
    for record in decisions:
        by_week[record.week].append(record)
    return [dict(week=w, **reaction_breakdown(by_week[w])) for w in sorted(by_week)]


def recommendation_success(decisions, events, horizon: Optional[datetime] = None):
    """
    A sent nudge succeeds when its target sku is later bought by the user's pharmacy
    (after the send, before `horizon`). Returns (fraction over sent nudges, per-decision flags).
    """
    index = as_index(events)
    sent = [r for r in decisions if r.sent]
    if horizon is None:
        horizon = index.end
    flags = {}
    for record in sent:
        flags[record.decision_id] = any(
            record.target_sku in order.payload.skus
            for order in index.pharmacy_orders.get(record.pharmacy_id, [])
            if record.decision_time < order.timestamp < horizon
        )
    fraction = sum(flags.values()) / len(flags) if flags else 0.0
    return fraction, flags


def final_contexts(decisions):
    """Users and contexts of the adaptive participants at the last decision point."""
    last = max(r.week for r in decisions)
    records = sorted((r for r in decisions if r.week == last and r.group == Group.ADAPTIVE), key=lambda r: r.user_id)
    return [r.user_id for r in records], np.array([r.context for r in records], dtype=float)


def embed_contexts(decisions, state: BanditState, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> dict:
    users, X = final_contexts(decisions)
    result = tsne_embed(X[:, 1:] if len(X) else X, perplexity, iterations, seed)
    probability = [arm_probability(state, x) for x in X]
    return {
        "users": users,
        "x": result.embedding[:, 0].tolist(),
        "y": result.embedding[:, 1].tolist(),
        "best_arm": [TREAT if p >= 0.5 else CONTROL for p in probability],
        "treat_probability": probability,
        "probability_gap": [abs(2.0 * p - 1.0) for p in probability],
        "kl_initial": result.kl_initial,
        "kl_final": result.kl_final,
        "perplexity": result.perplexity,
    }


def _baselines(decisions, events, start: datetime) -> Dict[str, float]:
    """Pharmacy spend over the pre-experiment weeks of every participant."""
    index = as_index(events)
    baseline_start = start - timedelta(weeks=BASELINE_WEEKS)
    return {u: index.pharmacy_spend(p, baseline_start, start) for u, (_, p) in participants(decisions).items()}


def logit_table(decisions, events, accumulated) -> pd.DataFrame:
    start = min(r.decision_time for r in decisions)
    baselines = _baselines(decisions, events, start)
    final = accumulated.matrix[:, -1]
    return pd.DataFrame(
        {
            "user": accumulated.users,
            "outcome": (final > 0).astype(float),
            "intercept": 1.0,
            "adaptive": [1.0 if g == ADAPTIVE else 0.0 for g in accumulated.groups],
            "baseline_expenditure_thousands": [baselines[u] / 1000.0 for u in accumulated.users],
        }
    )


def lmm_table(decisions, events) -> pd.DataFrame:
    """One row per (participant, week) with that week's pharmacy expenditure."""
    index = as_index(events)
    start = min(r.decision_time for r in decisions)
    baselines = _baselines(decisions, events, start)
    rows = []
    for record in sorted(decisions, key=lambda r: (r.user_id, r.week)):
        week_end = record.decision_time + timedelta(days=7)
        rows.append(
            {
                "user": record.user_id,
                "week": record.week,
                "expenditure": index.pharmacy_spend(record.pharmacy_id, record.decision_time, week_end),
                "intercept": 1.0,
                "adaptive_arm": 1.0 if record.group == Group.ADAPTIVE else 0.0,
                "nudged_that_week": 1.0 if record.sent else 0.0,
                "baseline_expenditure": baselines[record.user_id] / BASELINE_WEEKS,
            }
        )
    return pd.DataFrame(rows)


def analyze(
    decisions,
    events,
    state: Optional[BanditState] = None,
    alpha: float = DEFAULT_ALPHA,
    strata=STRATA,
    tsne: bool = True,
    seed: int = 0,
    perplexity: float = 30.0,
    extra_lmm_columns: Optional[Dict[str, List[float]]] = None,
) -> AnalysisReport:
    if not decisions:
        raise ValueError("no decisions to analyze")
    index = as_index(events)
    notes = []
    n_weeks = max(r.week for r in decisions)
    n_days = 7 * n_weeks
    start = min(r.decision_time for r in decisions)
    horizon = start + timedelta(days=n_days)

    daily = expenditure_series(decisions, index, "daily", n_days)
    accumulated = expenditure_series(decisions, index, "accumulated", n_days)
    daily_logins = expenditure_series(decisions, index, "daily", n_days, metric="logins")
    logins = expenditure_series(decisions, index, "accumulated", n_days, metric="logins")
    groups = {g: sum(x == g for x in accumulated.groups) for g in (ADAPTIVE, PURE_CONTROL)}

    daily_tests = evolution_tests(daily.group_matrix(ADAPTIVE), daily.group_matrix(PURE_CONTROL), alpha, "daily")
    accumulated_tests = evolution_tests(accumulated.group_matrix(ADAPTIVE), accumulated.group_matrix(PURE_CONTROL), alpha, "accumulated")
    daily_login_tests = evolution_tests(daily_logins.group_matrix(ADAPTIVE), daily_logins.group_matrix(PURE_CONTROL), alpha, "daily")
    login_tests = evolution_tests(logins.group_matrix(ADAPTIVE), logins.group_matrix(PURE_CONTROL), alpha, "accumulated")
    for name, tests in (("daily", daily_tests), ("accumulated", accumulated_tests)):
        if tests.skipped_days:
            notes.append(f"{name}: {len(tests.skipped_days)} degenerate days skipped")

    stratified = {}
    group_of = dict(zip(accumulated.users, accumulated.groups))
    for kind in strata:
        labels = assign_strata(decisions, index, kind)
        labels_a = [labels[u] for u in accumulated.users if group_of[u] == ADAPTIVE]
        labels_b = [labels[u] for u in accumulated.users if group_of[u] == PURE_CONTROL]
        per_stratum = stratified_evolution_tests(accumulated.group_matrix(ADAPTIVE), accumulated.group_matrix(PURE_CONTROL), labels_a, labels_b, alpha)
        stratified.update({f"{kind}={label}": result for label, result in per_stratum.items()})

    logit = None
    table = logit_table(decisions, index, accumulated)
    try:
        logit = fit_logit(table[LOGIT_COLUMNS].to_numpy(), table["outcome"].to_numpy(), LOGIT_COLUMNS, alpha)
    except (SeparationDetected, NonConvergence, RankDeficientDesign) as e:
        notes.append(f"logit skipped: {e}")
        logger.warning("Logit skipped: %s", e)

    lmm = None
    table = lmm_table(decisions, index)
    columns = list(LMM_COLUMNS)
    for name, values in (extra_lmm_columns or {}).items():
        table[name] = values
        columns.append(name)
    try:
        lmm = fit_lmm(table[columns].to_numpy(), table["expenditure"].to_numpy(), table["user"].to_numpy(), columns, alpha)
    except (NonConvergence, RankDeficientDesign) as e:
        notes.append(f"lmm skipped: {e}")
        logger.warning("LMM skipped: %s", e)

    report_sensitivity, embedding = None, None
    if state is not None:
        users, X = final_contexts(decisions)
        try:
            report_sensitivity = sensitivity(state, X)
        except InsufficientSample as e:
            notes.append(f"sensitivity skipped: {e}")
        if tsne:
            try:
                embedding = embed_contexts(decisions, state, perplexity, seed=seed)
            except TooFewPoints as e:
                notes.append(f"embedding skipped: {e}")

    success, _ = recommendation_success(decisions, index, horizon)
    report = AnalysisReport(
        alpha=alpha,
        n_days=n_days,
        n_weeks=n_weeks,
        group_sizes={"adaptive": groups[ADAPTIVE], "pure_control": groups[PURE_CONTROL]},
        daily=daily_tests,
        accumulated=accumulated_tests,
        login_daily=daily_login_tests,
        login_accumulated=login_tests,
        ttest_summary={
            "daily": summarize_evolution(daily_tests),
            "accumulated": summarize_evolution(accumulated_tests),
            "login_daily": summarize_evolution(daily_login_tests),
        },
        stratified=stratified,
        logit=logit,
        lmm=lmm,
        allocation=bandit_allocation_series(decisions),
        sensitivity=report_sensitivity,
        embedding=embedding,
        reactions=reaction_breakdown(decisions),
        weekly_reactions=weekly_reaction_breakdown(decisions),
        success_fraction=success,
        notes=notes,
    )
    validate(report.to_dict(), report_schema)
    return report


def _tests_frame(evolution: EvolutionResult) -> pd.DataFrame:
    return pd.DataFrame([r.dict() for r in evolution.results], columns=list(evolution.results[0].dict()) if evolution.results else None)


def plot_accumulated_difference(evolution: EvolutionResult, n_days: int, filename: str):
    days = np.arange(n_days)
    diff = np.full(n_days, np.nan)
    low = np.full(n_days, np.nan)
    high = np.full(n_days, np.nan)
    for r in evolution.results:
        diff[r.day], low[r.day], high[r.day] = r.mean_difference, r.ci_low, r.ci_high

    level = int(round(100 * (1 - evolution.results[0].alpha))) if evolution.results else 90
    plt.rcParams["svg.hashsalt"] = "nudge-engine"
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(days, diff, color="tab:blue", label="adaptive - pure control")
    ax.fill_between(days, low, high, color="tab:blue", alpha=0.2, label=f"{level}% CI")
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_xlabel("Day of experiment")
    ax.set_ylabel("Mean accumulated expenditure difference")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(filename, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(report: AnalysisReport, out_dir: str) -> Dict[str, str]:
    """Writes analysis.json, the CSV tables and the accumulated-difference chart; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in ("analysis.json", "ttest_daily.csv", "ttest_accumulated.csv", "lmm.csv", "sensitivity.csv", "embedding.csv", "accumulated_difference.svg")}

    to_json(report.to_dict(), paths["analysis.json"])
    _tests_frame(report.daily).to_csv(paths["ttest_daily.csv"], index=False)
    _tests_frame(report.accumulated).to_csv(paths["ttest_accumulated.csv"], index=False)

    lmm_rows = report.lmm.fixed.as_rows() if report.lmm else []
    pd.DataFrame(lmm_rows, columns=["name", "coefficient", "standard_error", "z", "p_value", "ci_low", "ci_high", "significant"]).to_csv(paths["lmm.csv"], index=False)

    s = report.sensitivity
    pd.DataFrame(
        {"feature": s.feature_names, "sensitivity": s.sensitivity, "raw_mean": s.raw_mean, "raw_std": s.raw_std, "threshold": s.thresholds} if s else {},
        columns=["feature", "sensitivity", "raw_mean", "raw_std", "threshold"],
    ).to_csv(paths["sensitivity.csv"], index=False)

    e = report.embedding
    embedding_columns = ["users", "x", "y", "best_arm", "treat_probability", "probability_gap"]
    pd.DataFrame({c: e[c] for c in embedding_columns} if e else {}, columns=embedding_columns).rename(columns={"users": "user"}).to_csv(paths["embedding.csv"], index=False)

    plot_accumulated_difference(report.accumulated, report.n_days, paths["accumulated_difference.svg"])
    logger.info("Analysis written to %s", out_dir)
    return paths


def _fmt(value, pattern="{:.3f}"):
    return "n/a" if value is None else pattern.format(value)


def summary_table(report: AnalysisReport) -> List[tuple]:
    """(metric, value) rows in the layout of an experiment results table."""
    rows = []
    for name in ("daily", "accumulated"):
        s = report.ttest_summary.get(name, {})
        rows += [
            (f"T-test ({name}): days with significant effect", f"{s.get('days_significant', 0)} / {report.n_days}"),
            (f"T-test ({name}): average effect (Cohen's d)", _fmt(s.get("average_effect"))),
            (f"T-test ({name}): largest effect (Cohen's d)", _fmt(s.get("largest_effect"))),
            (f"T-test ({name}): average statistical power", _fmt(s.get("average_power"))),
            (f"T-test ({name}): largest statistical power", _fmt(s.get("largest_power"))),
        ]
    logins = report.ttest_summary.get("login_daily", {})
    rows.append(("T-test (daily logins): days with significant effect", f"{logins.get('days_significant', 0)} / {report.n_days}"))
    if report.logit is not None:
        rows.append(("Logit: adaptive coefficient", _fmt(report.logit.coefficient("adaptive"))))
    if report.lmm is not None:
        for name in ("adaptive_arm", "nudged_that_week", "baseline_expenditure"):
            rows.append((f"LMM: {name.replace('_', ' ')}", _fmt(report.lmm.fixed.coefficient(name))))
    rows += [
        ("Bandit: assigned to nudge (mean over weeks)", _fmt(100 * report.allocation.mean_treat_fraction, "{:.1f}%")),
        ("Bandit: majority assigned to nudge", f"{report.allocation.majority_nudged_weeks} / {report.n_weeks} weeks"),
        ("Nudges sent", str(report.reactions["sent"])),
        ("Nudges opened", _fmt(100 * report.reactions["opened"], "{:.1f}%")),
        ("Nudges closed", _fmt(100 * report.reactions["closed"], "{:.1f}%")),
        ("Nudges ignored", _fmt(100 * report.reactions["ignored"], "{:.1f}%")),
        ("Successful recommendations", _fmt(100 * report.success_fraction, "{:.1f}%")),
    ]
    return rows
