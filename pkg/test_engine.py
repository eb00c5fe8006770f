import os
from datetime import timedelta

import numpy as np
import pytest

from analysis import bandit_allocation_series
from bandit import CONTROL, TREAT, ArmPosterior, BanditState
from configs import ExperimentConfig, SimConfig
from conftest import login, nudge, order
from events import EventKind, merge_events
from features import fit_cohort_stats
from NudgeEngine import (
    Arm,
    DecisionRecord,
    Group,
    NudgeEngine,
    Reaction,
    StageError,
    WindowNotElapsed,
    collect_rewards,
    expire_nudges,
    run_decision_point,
    split_pure_control,
    update_bandit,
)
from simulator import PharmacySimulator, stock_list
from stat_functions import evolution_tests, expenditure_series, summarize_evolution


@pytest.fixture
def history(small_sim_config):
    simulator = PharmacySimulator(small_sim_config)
    return simulator.history()


def fresh_simulator(sim_config):
    simulator = PharmacySimulator(sim_config)
    simulator.clock = sim_config.history_end
    return simulator


def test_split_extremes():
    users = [f"u{i}" for i in range(100)]
    assert split_pure_control(users, 0.0, 1) == (set(), set(users))
    assert split_pure_control(users, 1.0, 1) == (set(users), set())
    with pytest.raises(ValueError):
        split_pure_control(users, 1.5, 1)


def test_split_fraction_and_stability():
    users = [f"u{i}" for i in range(10000)]
    pure, adaptive = split_pure_control(users, 0.3, 2023)
    assert 0.29 <= len(pure) / len(users) <= 0.31
    assert pure | adaptive == set(users) and not pure & adaptive

    shuffled = list(np.random.default_rng(0).permutation(users))
    assert split_pure_control(shuffled, 0.3, 2023) == (pure, adaptive)
    assert split_pure_control(users, 0.3, 2024)[0] != pure


def test_decision_point_without_adaptive_users(history, small_experiment):
    state = BanditState.initial(small_experiment.context.dimension, 5)
    users = {e.user_id for e in history}
    records, sent = run_decision_point(state, history, small_experiment, 1, adaptive=set(), pure_control=users)
    assert sent == []
    assert all(r.group == Group.PURE_CONTROL and r.arm is None for r in records)
    assert state.n_obs == 0


def dominant_treat_state(dim, seed=5):
    treat = ArmPosterior(np.r_[1e4, np.zeros(dim - 1)], np.eye(dim) * 1e6, 1000.0, 1.0)
    return BanditState({TREAT: treat, CONTROL: ArmPosterior.prior(dim)}, seed)


def test_dominant_treat_arm(history, small_experiment):
    users = sorted({e.user_id for e in history})
    t = small_experiment.decision_time(1)
    stats = fit_cohort_stats(history, users, small_experiment.context, t)
    state = dominant_treat_state(small_experiment.context.dimension)
    records, sent = run_decision_point(state, history, small_experiment, 1, adaptive=set(users), stats=stats)

    assert all(r.arm == Arm.TREAT for r in records)
    assert all(r.treat_probability == pytest.approx(1.0) for r in records)
    assert any(r.sent for r in records)
    assert sorted(e.payload.decision_id for e in sent) == sorted(r.decision_id for r in records if r.sent)
    assert all(e.kind == EventKind.NUDGE_SENT and e.timestamp == t for e in sent)
    assert all(r.decision_id == f"toy-w01-{r.user_id}" for r in records)
    # The snapshot is frozen: nothing is learnt at the decision point
    assert state.n_obs == 0


def test_decision_point_is_order_independent(history, small_experiment):
    users = sorted({e.user_id for e in history})
    state = BanditState.initial(small_experiment.context.dimension, 5)
    first, _ = run_decision_point(state, history, small_experiment, 1, adaptive=set(users))
    second, _ = run_decision_point(state, history, small_experiment, 1, adaptive=set(reversed(users)))
    assert first == second


def decision(small_experiment, sent=True, pharmacy="p1"):
    t = small_experiment.decision_time(1)
    pair = dict(anchor_sku="A", target_sku="B", reaction=Reaction.IGNORED) if sent else {}
    return DecisionRecord(
        decision_id="d1",
        week=1,
        user_id="u1",
        pharmacy_id=pharmacy,
        decision_time=t,
        group=Group.ADAPTIVE,
        arm=Arm.TREAT if sent else Arm.CONTROL,
        context=[1.0, 0.0, 0.0, 0.0],
        sent=sent,
        **pair,
    )


def test_reward_window(small_experiment):
    record = decision(small_experiment)
    t = record.decision_time
    events = [
        order("u1", "p1", t, [("A", 1, 500.0)]),
        order("u1", "p1", t + timedelta(days=1), [("A", 1, 30.0)]),
        order("u2", "p1", t + timedelta(days=3), [("B", 1, 70.0)]),
        order("u3", "p2", t + timedelta(days=3), [("B", 1, 45.0)]),
        order("u1", "p1", t + timedelta(days=6.5), [("A", 1, 999.0)]),
        nudge(EventKind.NUDGE_SENT, "u1", "p1", t),
        nudge(EventKind.NUDGE_OPENED, "u1", "p1", t + timedelta(days=1)),
    ]
    [updated] = collect_rewards(events, [record], reward_window_days=6)
    assert updated.reward == 100.0
    assert updated.reaction == Reaction.OPENED


def test_reactions(small_experiment):
    record = decision(small_experiment)
    t = record.decision_time
    closed = [nudge(EventKind.NUDGE_CLOSED, "u1", "p1", t + timedelta(days=2)), login("u9", "p9", t + timedelta(days=7))]
    assert collect_rewards(closed, [record], 6)[0].reaction == Reaction.CLOSED
    late = [nudge(EventKind.NUDGE_OPENED, "u1", "p1", t + timedelta(days=8))]
    assert collect_rewards(late, [record], 6)[0].reaction == Reaction.IGNORED
    control = decision(small_experiment, sent=False)
    assert collect_rewards(closed, [control], 6)[0].reaction == Reaction.NOT_APPLICABLE


def test_window_not_elapsed(small_experiment):
    record = decision(small_experiment)
    events = [login("u1", "p1", record.decision_time + timedelta(days=5))]
    with pytest.raises(WindowNotElapsed):
        collect_rewards(events, [record], 6)
    assert collect_rewards(events, [record], 6, log_end=record.decision_time + timedelta(days=6))[0].reward == 0.0


def test_expire_nudges(small_experiment):
    t = small_experiment.decision_time(1)
    events = [nudge(EventKind.NUDGE_SENT, "u1", "p1", t, decision="d1"), nudge(EventKind.NUDGE_SENT, "u2", "p2", t, decision="d2")]
    events.append(nudge(EventKind.NUDGE_OPENED, "u2", "p2", t + timedelta(days=1), decision="d2"))

    assert expire_nudges(events, t + timedelta(days=7), 7) == []
    expired = expire_nudges(events, t + timedelta(days=8), 7)
    assert [(e.kind, e.payload.decision_id, e.timestamp) for e in expired] == [(EventKind.NUDGE_EXPIRED, "d1", t + timedelta(days=7))]
    assert expire_nudges(merge_events(events, expired), t + timedelta(days=9), 7) == []


def test_update_bandit_uses_control_and_sent_records(small_experiment):
    state = BanditState.initial(4, 5)
    sent = decision(small_experiment).copy(update={"reward": 500.0})
    control = decision(small_experiment, sent=False).copy(update={"reward": 200.0})
    unsent = control.copy(update={"arm": Arm.TREAT})
    pure = DecisionRecord(decision_id="d9", week=1, user_id="u9", pharmacy_id="p9", decision_time=sent.decision_time, group=Group.PURE_CONTROL, context=[1.0, 0, 0, 0], reward=800.0)
    updated = update_bandit(state, [sent, control, unsent, pure], scale=1000.0, winsor_quantile=1.0)
    assert updated.arms[TREAT].n_obs == 1 and updated.arms[CONTROL].n_obs == 1
    assert updated.arms[TREAT].mean[0] == pytest.approx(0.25)
    assert state.n_obs == 0
    assert update_bandit(state, [pure], 1000.0, 1.0) is state


def run(config, sim_config, history, out_dir=None, stop_after_week=None):
    engine = NudgeEngine(config, history, simulator=fresh_simulator(sim_config), out_dir=out_dir)
    return engine.run(stop_after_week)


def test_one_week_run(history, small_sim_config, small_experiment):
    config = small_experiment.copy(update={"duration_weeks": 1})
    result = run(config, small_sim_config, history)
    assert result.weeks_completed == 1
    adaptive = [r for r in result.decisions if r.group == Group.ADAPTIVE]
    used = [r for r in adaptive if r.arm == Arm.CONTROL or r.sent]
    assert adaptive
    assert all(r.reward is not None and r.reward >= 0 for r in result.decisions)
    assert result.state.n_obs == len(used)
    assert result.state.arms[TREAT].n_obs == sum(r.sent for r in adaptive)
    for arm in (TREAT, CONTROL):
        n = result.state.arms[arm].n_obs
        assert result.state.arms[arm].shape == pytest.approx(2.0 + n / 2)


def test_pure_control_is_never_nudged(history, small_sim_config, small_experiment):
    result = run(small_experiment, small_sim_config, history)
    pure = {r.user_id for r in result.decisions if r.group == Group.PURE_CONTROL}
    assert pure
    nudged = {e.user_id for e in result.events if e.kind == EventKind.NUDGE_SENT}
    assert not pure & nudged
    assert all(not r.sent and r.arm is None for r in result.decisions if r.group == Group.PURE_CONTROL)
    assert len(result.decisions) == 2 * len({r.user_id for r in result.decisions})


def test_run_is_deterministic(history, small_sim_config, small_experiment):
    a = run(small_experiment, small_sim_config, history)
    b = run(small_experiment, small_sim_config, history)
    assert a.decisions == b.decisions
    assert a.events == b.events
    assert a.state.to_dict() == b.state.to_dict()


def test_resume_matches_uninterrupted_run(tmp_path, history, small_sim_config, small_experiment):
    full = run(small_experiment, small_sim_config, history, out_dir=str(tmp_path / "full"))

    out = str(tmp_path / "interrupted")
    assert run(small_experiment, small_sim_config, history, out_dir=out, stop_after_week=1).weeks_completed == 1
    resumed = NudgeEngine.resume(small_experiment, out, simulator=fresh_simulator(small_sim_config)).run()

    assert resumed.weeks_completed == 2
    assert resumed.decisions == full.decisions
    assert resumed.events == full.events
    assert resumed.state.to_dict() == full.state.to_dict()


def test_empty_log_fails_the_first_week(small_experiment):
    with pytest.raises(StageError) as e:
        NudgeEngine(small_experiment, []).run()
    assert e.value.week == 1


CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def closed_loop(sim_config, config):
    simulator = PharmacySimulator(sim_config)
    history = simulator.history()
    return NudgeEngine(config, history, simulator, stock=set(stock_list(sim_config))).run()


@pytest.fixture
def bundled_sim_config():
    return SimConfig.parse_file(os.path.join(CONFIGS, "sim.json")).copy(update={"n_pharmacies": 300})


@pytest.mark.slow
@pytest.mark.parametrize("name, weeks", [("xp1.json", 8), ("xp2.json", 10)])
def test_bundled_experiment_configs(bundled_sim_config, name, weeks):
    config = ExperimentConfig.parse_file(os.path.join(CONFIGS, name))
    result = closed_loop(bundled_sim_config, config)
    assert result.weeks_completed == weeks
    assert sorted({r.week for r in result.decisions}) == list(range(1, weeks + 1))
    assert len(bandit_allocation_series(result.decisions).weekly_treat_fraction) == weeks

    groups = {r.user_id: r.group for r in result.decisions}
    share = sum(g == Group.PURE_CONTROL for g in groups.values()) / len(groups)
    assert share == pytest.approx(config.pure_control_fraction, abs=0.08)


@pytest.mark.slow
def test_planted_uplift_is_detected_on_the_accumulated_series():
    sim_config = SimConfig.parse_file(os.path.join(CONFIGS, "sim.json")).copy(update={"n_pharmacies": 800, "uplift_effect": 2.0})
    config = ExperimentConfig.parse_file(os.path.join(CONFIGS, "xp2.json")).copy(update={"duration_weeks": 8})
    result = closed_loop(sim_config, config)

    daily = expenditure_series(result.decisions, result.events, "daily")
    accumulated = expenditure_series(result.decisions, result.events, "accumulated")
    daily_tests = evolution_tests(daily.group_matrix("adaptive"), daily.group_matrix("pure_control"), 0.10, "daily")
    accumulated_tests = evolution_tests(accumulated.group_matrix("adaptive"), accumulated.group_matrix("pure_control"), 0.10, "accumulated")
    assert accumulated_tests.significant_fraction > daily_tests.significant_fraction
    assert summarize_evolution(accumulated_tests)["longest_significant_run"] >= 21
    assert accumulated_tests.results[-1].significant and accumulated_tests.results[-1].mean_difference > 0


@pytest.mark.slow
def test_planted_null_rejects_at_alpha(small_experiment):
    # nobody responds, so adaptive and pure control differ only by the split
    config = small_experiment.copy(update={"pure_control_fraction": 0.5})
    fractions = []
    for seed in range(30):
        sim_config = SimConfig(n_pharmacies=150, n_skus=12, n_blocks=3, history_weeks=10, seed=seed, responder_fraction=0.0, uplift_effect=1.0)
        result = closed_loop(sim_config, config)
        daily = expenditure_series(result.decisions, result.events, "daily")
        fractions.append(evolution_tests(daily.group_matrix("adaptive"), daily.group_matrix("pure_control"), 0.10, "daily").significant_fraction)
    assert 0.03 <= np.mean(fractions) <= 0.17
