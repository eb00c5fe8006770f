import os

import pandas as pd
import pytest

from analysis import analyze, bandit_allocation_series, reaction_breakdown, recommendation_success, summary_table, write_report
from conftest import at, order
from NudgeEngine import Arm, DecisionRecord, Group, NudgeEngine, Reaction
from simulator import PharmacySimulator


def adaptive(user, week, arm, sent=False, reaction=Reaction.NOT_APPLICABLE, target="B", pharmacy=None):
    pair = dict(anchor_sku="A", target_sku=target) if sent else {}
    return DecisionRecord(
        decision_id=f"x-w{week:02d}-{user}",
        week=week,
        user_id=user,
        pharmacy_id=pharmacy or f"p-{user}",
        decision_time=at(7 * (week - 1)),
        group=Group.ADAPTIVE,
        arm=arm,
        context=[1.0],
        sent=sent,
        reaction=reaction,
        **pair,
    )


def pure(user, week):
    return DecisionRecord(decision_id=f"x-w{week:02d}-{user}", week=week, user_id=user, pharmacy_id=f"p-{user}", decision_time=at(7 * (week - 1)), group=Group.PURE_CONTROL, context=[1.0])


def test_allocation_series():
    decisions = [adaptive(f"u{i}", 1, Arm.TREAT if i < 7 else Arm.CONTROL) for i in range(10)]
    decisions += [adaptive(f"u{i}", 2, Arm.TREAT if i < 2 else Arm.CONTROL) for i in range(10)]
    decisions += [pure(f"v{i}", w) for i in range(5) for w in (1, 2)]
    allocation = bandit_allocation_series(decisions)
    assert allocation.weekly_treat_fraction == [0.7, 0.2]
    assert allocation.mean_treat_fraction == pytest.approx(0.45)
    assert allocation.majority_nudged_weeks == 1


def test_reaction_breakdown():
    reactions = [Reaction.OPENED, Reaction.CLOSED, Reaction.IGNORED, Reaction.IGNORED]
    decisions = [adaptive(f"u{i}", 1, Arm.TREAT, sent=True, reaction=r) for i, r in enumerate(reactions)]
    decisions.append(adaptive("u9", 1, Arm.CONTROL))
    breakdown = reaction_breakdown(decisions)
    assert breakdown == {"opened": 0.25, "closed": 0.25, "ignored": 0.5, "sent": 4}
    assert reaction_breakdown([adaptive("u9", 1, Arm.CONTROL)]) == {"opened": 0.0, "closed": 0.0, "ignored": 0.0, "sent": 0}


def test_recommendation_success():
    decisions = [adaptive(f"u{i}", 2, Arm.TREAT, sent=True, reaction=Reaction.IGNORED) for i in range(9)]
    events = [
        order("u0", "p-u0", at(9), [("B", 1, 10.0)]),
        order("u1", "p-u1", at(8), [("C", 1, 10.0), ("B", 2, 5.0)]),
        # before the send, wrong sku, other pharmacy, after the horizon
        order("u2", "p-u2", at(6), [("B", 1, 10.0)]),
        order("u3", "p-u3", at(9), [("C", 1, 10.0)]),
        order("u4", "p-u0", at(9), [("B", 1, 10.0)]),
        order("u5", "p-u5", at(30), [("B", 1, 10.0)]),
    ]
    fraction, flags = recommendation_success(decisions, events, horizon=at(21))
    assert fraction == pytest.approx(2 / 9)
    assert {d for d, ok in flags.items() if ok} == {"x-w02-u0", "x-w02-u1"}
    assert recommendation_success([], events) == (0.0, {})


@pytest.fixture
def finished_run(small_sim_config, small_experiment):
    simulator = PharmacySimulator(small_sim_config)
    history = simulator.history()
    return NudgeEngine(small_experiment, history, simulator=simulator).run()


def test_analyze_a_finished_run(tmp_path, finished_run):
    report = analyze(finished_run.decisions, finished_run.events, finished_run.state, perplexity=5.0, seed=1)
    assert report.n_weeks == 2 and report.n_days == 14
    assert sum(report.group_sizes.values()) == len({r.user_id for r in finished_run.decisions})
    assert len(report.accumulated.results) + len(report.accumulated.skipped_days) == 14
    assert report.login_daily.mode == "daily" and report.login_accumulated.mode == "accumulated"
    assert len(report.login_daily.results) + len(report.login_daily.skipped_days) == 14
    assert "login_daily" in report.ttest_summary
    assert report.sensitivity is not None and report.sensitivity.feature_names[0] == "days_since_last_nudge"
    assert len(report.embedding["users"]) == report.group_sizes["adaptive"]
    assert 0.0 <= report.success_fraction <= 1.0
    if report.reactions["sent"]:
        assert report.reactions["opened"] + report.reactions["closed"] + report.reactions["ignored"] == pytest.approx(1.0)

    paths = write_report(report, str(tmp_path))
    assert all(os.path.exists(p) for p in paths.values())
    assert len(pd.read_csv(paths["ttest_accumulated.csv"])) == len(report.accumulated.results)
    assert list(pd.read_csv(paths["embedding.csv"]).columns) == ["user", "x", "y", "best_arm", "treat_probability", "probability_gap"]
    rows = dict(summary_table(report))
    assert rows["Nudges sent"] == str(report.reactions["sent"])
    assert rows["T-test (daily logins): days with significant effect"].endswith("/ 14")


def test_analysis_without_bandit_state(finished_run):
    report = analyze(finished_run.decisions, finished_run.events, strata=())
    assert report.sensitivity is None and report.embedding is None and report.stratified == {}


def test_nothing_to_analyze():
    with pytest.raises(ValueError):
        analyze([], [])
