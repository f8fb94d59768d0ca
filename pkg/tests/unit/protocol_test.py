import io
import math

import numpy as np
import pytest

from subnetra import analytics, protocol
from subnetra.agents import FixedAgent
from subnetra.protocol import (
    EventKind,
    LapInputs,
    LapState,
    Mode,
    Phase,
    RunMetrics,
)
from subnetra.types import AccessConfig, Update, validate_config

resolve_cases = [
    ({0: (1, 0), 1: (0, 1)}, 2, {0: True, 1: True}, (1, 1)),
    ({0: (1, 0), 1: (1, 0)}, 2, {0: False, 1: False}, (2, 0)),
    ({0: (1, 1), 1: (1, 0)}, 2, {0: True, 1: False}, (2, 1)),
    ({0: (1,)}, 1, {0: True}, (1,)),
    ({0: (0, 0), 1: (0, 1)}, 2, {0: False, 1: True}, (0, 1)),
]


@pytest.mark.parametrize("masks,M,success,counts", resolve_cases)
def test_cap_resolve(masks, M, success, counts):
    transmissions = {n: AccessConfig(m) for n, m in masks.items()}
    outcome = protocol.cap_resolve(transmissions, M)
    assert outcome.success == success
    assert outcome.channel_counts == counts


def test_cap_resolve_accepts_raw_masks():
    outcome = protocol.cap_resolve({3: (1, 1), 5: (0, 1)}, 2)
    assert outcome.success == {3: True, 5: False}
    assert outcome.collided


def test_cap_resolve_of_an_idle_slot():
    outcome = protocol.cap_resolve({}, 3)
    assert outcome.success == {}
    assert outcome.channel_counts == (0, 0, 0)
    assert not outcome.collided


def test_when_mask_length_differs_from_m_then_raises_value_error():
    with pytest.raises(ValueError):
        protocol.cap_resolve({0: (1, 0, 0)}, 2)


def test_cap_resolve_batch_stacks_slots():
    masks = np.array(
        [
            [[1, 0], [0, 1]],
            [[1, 0], [1, 0]],
        ]
    )
    success, counts = protocol.cap_resolve_batch(masks)
    assert success.tolist() == [[True, True], [False, False]]
    assert counts.tolist() == [[1, 1], [2, 0]]


@pytest.fixture
def lap(cfg):
    yield LapState(0, FixedAgent(cfg, index=1), cfg)


def _kinds(events):
    return [e.event for e in events]


def _step(lap, slot, cfg, streams, **inputs):
    return protocol.lap_step(
        lap, LapInputs(**inputs), slot, cfg=cfg, streams=streams
    )


def test_normal_lap_without_activation_stays_silent(lap, cfg, streams):
    tx, events = _step(lap, 0, cfg, streams)
    assert tx is None
    assert events == []
    assert lap.mode is Mode.NORMAL
    assert lap.chosen_config.mask == (0, 0)


def test_normal_lap_ignores_arrivals(lap, cfg, streams):
    _, events = _step(lap, 0, cfg, streams, arrival=True)
    assert events == []
    assert not lap.queue


def test_alarm_event_timeline(lap, cfg, streams):
    tx, events = _step(lap, 5, cfg, streams, activation=True)
    assert tx is None
    assert _kinds(events) == [EventKind.ACTIVATE, EventKind.PILOT]
    assert lap.mode is Mode.ALARM
    assert list(lap.queue) == [5]

    tx, events = _step(lap, 6, cfg, streams, cs=np.ones(2, dtype=complex))
    assert tx is None
    assert _kinds(events) == [EventKind.CS]
    assert lap.phase is Phase.TRANSMIT

    tx, events = _step(lap, 7, cfg, streams)
    assert tx == 1
    assert _kinds(events) == [EventKind.TX]
    assert lap.chosen_config.mask == (1, 0)

    tx, events = _step(lap, 8, cfg, streams, ack=True)
    assert tx is None
    (ack,) = events
    assert ack.event is EventKind.ACK
    assert ack.update == Update(generation_slot=5, delivery_slot=8)
    assert ack.update.delay == 3
    assert ack.reward == 1
    assert lap.mode is Mode.NORMAL
    assert lap.agent.events == 1
    assert lap.episodes == 1


def test_lap_waits_for_its_contention_signature(lap, cfg, streams):
    _step(lap, 0, cfg, streams, activation=True)
    tx, events = _step(lap, 1, cfg, streams)
    assert tx is None
    assert events == []
    assert lap.phase is Phase.CS


def _transmitting(lap, cfg, streams):
    _step(lap, 0, cfg, streams, activation=True)
    _step(lap, 1, cfg, streams, cs=np.ones(cfg.M, dtype=complex))
    tx, _ = _step(lap, 2, cfg, streams)
    assert tx is not None


def test_failed_attempt_is_retried_every_slot(lap, cfg, streams):
    _transmitting(lap, cfg, streams)
    for slot in range(3, 10):
        tx, _ = _step(lap, slot, cfg, streams, ack=False)
        assert tx == 1


def test_retries_are_spaced_by_ack_timeout(streams):
    cfg = validate_config({"K": 1, "M": 2, "t_ack": 3, "policy": "fixed"})
    lap = LapState(0, FixedAgent(cfg, index=1), cfg)
    _transmitting(lap, cfg, streams)
    sent = [
        slot for slot in range(3, 12) if _step(lap, slot, cfg, streams)[0]
    ]
    assert sent == [5, 8, 11]
    assert lap.timer_ack(11) == 3


def test_deadline_drop_closes_the_event_with_negative_reward(
    lap, cfg, streams
):
    _transmitting(lap, cfg, streams)
    for slot in range(3, 20):
        tx, events = _step(lap, slot, cfg, streams, ack=False)
        assert EventKind.DEADLINE_DROP not in _kinds(events)
    tx, events = _step(lap, 20, cfg, streams, ack=False)
    assert tx is None
    (drop,) = events
    assert drop.event is EventKind.DEADLINE_DROP
    assert drop.update.generation_slot == 0
    assert drop.reward == -1
    assert lap.mode is Mode.NORMAL
    assert lap.agent.events == 1


def test_only_the_first_stale_update_carries_the_reward(lap, cfg, streams):
    _step(lap, 0, cfg, streams, activation=True)
    _step(lap, 1, cfg, streams, arrival=True, cs=np.ones(2, dtype=complex))
    _step(lap, 2, cfg, streams)
    _, events = _step(lap, 22, cfg, streams, ack=False)
    drops = [e for e in events if e.event is EventKind.DEADLINE_DROP]
    assert [e.update.generation_slot for e in drops] == [0, 1]
    assert [e.reward for e in drops] == [-1, None]
    assert lap.agent.events == 1


def test_remaining_queue_starts_a_new_event(lap, cfg, streams):
    _step(lap, 0, cfg, streams, activation=True)
    _step(lap, 1, cfg, streams, arrival=True, cs=np.ones(2, dtype=complex))
    _step(lap, 2, cfg, streams)
    _, events = _step(lap, 3, cfg, streams, ack=True)
    assert _kinds(events) == [EventKind.ACK, EventKind.PILOT]
    assert lap.mode is Mode.ALARM
    assert list(lap.queue) == [1]


def test_event_without_attempt_does_not_train(lap, cfg, streams):
    _step(lap, 0, cfg, streams, activation=True)
    _, events = _step(lap, 20, cfg, streams)
    assert [e.reward for e in events] == [None]
    assert lap.agent.events == 0


class RecordingAgent(FixedAgent):
    def __init__(self, cfg):
        super().__init__(cfg, index=1)
        self.credits = []

    def observe(self, action, reward):
        self.credits.append(("observe", action, reward))

    def close_event(self, action, reward, rng):
        self.credits.append(("close", action, reward))
        return super().close_event(action, reward, rng)


def test_every_unacknowledged_attempt_is_credited(cfg, streams):
    lap = LapState(0, RecordingAgent(cfg), cfg)
    _transmitting(lap, cfg, streams)
    _step(lap, 3, cfg, streams, ack=False)
    _step(lap, 4, cfg, streams, ack=False)
    _step(lap, 5, cfg, streams, ack=True)
    assert lap.agent.credits == [
        ("observe", 1, -1),
        ("observe", 1, -1),
        ("close", 1, 1),
    ]
    assert lap.agent.events == 1


def test_deadline_drop_credits_the_last_attempt_once(cfg, streams):
    lap = LapState(0, RecordingAgent(cfg), cfg)
    _transmitting(lap, cfg, streams)
    for slot in range(3, 21):
        _step(lap, slot, cfg, streams, ack=False)
    *observed, last = lap.agent.credits
    assert observed == [("observe", 1, -1)] * 17
    assert last == ("close", 1, -1)


def test_drop_while_waiting_for_a_retry_does_not_credit_twice(streams):
    cfg = validate_config(
        {"K": 1, "M": 2, "D": 6, "t_ack": 4, "policy": "fixed"}
    )
    lap = LapState(0, RecordingAgent(cfg), cfg)
    _transmitting(lap, cfg, streams)
    _step(lap, 3, cfg, streams, ack=False)
    for slot in range(4, 6):
        _step(lap, slot, cfg, streams)
    _, events = _step(lap, 6, cfg, streams)
    assert lap.agent.credits == [("observe", 1, -1), ("close", None, -1)]
    assert _kinds(events)[0] is EventKind.DEADLINE_DROP


def test_overflow_drops_the_newest_update(cfg, streams):
    cfg = cfg.replace(queue_cap=2)
    lap = LapState(0, FixedAgent(cfg, index=1), cfg)
    _step(lap, 0, cfg, streams, activation=True)
    _step(lap, 1, cfg, streams, arrival=True)
    _, events = _step(lap, 2, cfg, streams, arrival=True)
    assert _kinds(events) == [EventKind.OVERFLOW_DROP]
    assert events[0].update.generation_slot == 2
    assert list(lap.queue) == [0, 1]


def test_timers(lap, cfg, streams):
    assert lap.timer_d(0, cfg.D) == 0
    assert lap.hol_age(0) is None
    _step(lap, 5, cfg, streams, activation=True)
    assert lap.timer_d(5, cfg.D) == 20
    assert lap.timer_d(24, cfg.D) == 1
    assert lap.timer_d(30, cfg.D) == 0
    assert lap.hol_age(7) == 3
    assert lap.timer_ack(5) == 0


def test_event_log_rows():
    stream = io.StringIO()
    log = protocol.EventLog(stream, 3)
    log.write(protocol.LapEvent(7, 2, EventKind.TX, 5))
    log.write(protocol.LapEvent(8, 2, EventKind.PILOT))
    assert stream.getvalue().splitlines() == [
        "slot,lap_id,event,config_index,channels",
        "7,2,tx,5,1;3",
        "8,2,pilot,,",
    ]


def _metrics(**kwargs):
    return RunMetrics(**kwargs)


def test_metrics_ratios():
    metrics = _metrics(
        generated=10,
        pending=2,
        timely=6,
        busy_slots=4,
        collision_slots=1,
        delay_hist=(0, 0, 0, 4, 2),
    )
    assert metrics.p_timely == pytest.approx(0.75)
    assert metrics.p_deadline == pytest.approx(0.25)
    assert metrics.mean_delay == pytest.approx(10 / 3)
    assert metrics.collision_rate == pytest.approx(0.25)


def test_empty_metrics_are_nan_not_errors():
    metrics = _metrics()
    assert math.isnan(metrics.p_timely)
    assert math.isnan(metrics.mean_delay)
    assert math.isnan(metrics.attempt_success_rate)
    assert metrics.collision_rate == 0.0


def test_merge_is_associative():
    a = _metrics(generated=3, timely=2, delay_hist=(0, 1), reward_trace=(1,))
    b = _metrics(generated=4, timely=1, delay_hist=(0, 0, 0, 1))
    c = _metrics(generated=1, busy_slots=5, reward_trace=(-1, 1))
    assert a.merge(b).merge(c) == a.merge(b.merge(c))
    merged = a.merge(b)
    assert merged.generated == 7
    assert merged.delay_hist == (0, 1, 0, 1)


def test_csv_row(cfg):
    metrics = _metrics(generated=3, timely=1, delay_hist=(0, 0, 0, 1))
    row = metrics.csv_row(cfg)
    assert tuple(row) == protocol.METRICS_FIELDS
    assert row["method"] == "rch"
    assert row["P_timely"] == "0.3333333333"
    assert row["mean_delay"] == "3"
    assert row["schema"] == "1"


def _run(overrides, horizon, **kwargs):
    cfg = validate_config({**overrides, "horizon": horizon})
    return protocol.engine_run(cfg, **kwargs)


def test_single_lap_always_delivers_with_delay_three():
    overrides = {"K": 1, "M": 1, "p_act": 1.0, "p_arr": 0.0, "policy": "rch"}
    metrics = _run(overrides, 300)
    assert metrics.generated == 100
    assert metrics.delivered == 99
    assert metrics.pending == 1
    assert metrics.p_timely == 1.0
    assert metrics.mean_delay == 3.0
    assert metrics.collision_rate == 0.0


def test_two_laps_on_the_same_channel_never_deliver():
    overrides = {"K": 2, "M": 1, "p_act": 1.0, "p_arr": 0.0}
    metrics = _run({**overrides, "policy": "fixed", "fixed_index": 1}, 200)
    assert metrics.delivered == 0
    assert metrics.dropped_deadline > 0
    assert metrics.p_timely == 0.0
    assert metrics.collision_rate == 1.0
    assert set(metrics.reward_trace) == {-1}


engine_configs = [
    {"K": 4, "M": 2, "p_act": 0.4, "p_arr": 0.3, "policy": "dnn", "q": 8},
    {"K": 5, "M": 3, "p_act": 0.6, "p_arr": 0.5, "policy": "mab"},
    {
        "K": 6,
        "M": 2,
        "p_act": 0.9,
        "p_arr": 0.9,
        "queue_cap": 3,
        "policy": "rch",
    },
]


@pytest.mark.parametrize("overrides", engine_configs)
def test_every_measured_update_is_accounted_for(overrides):
    m = _run(overrides, 400)
    assert m.generated > 0
    assert m.generated == (
        m.delivered
        + m.dropped_deadline  # NOQA: W503
        + m.dropped_overflow  # NOQA: W503
        + m.pending  # NOQA: W503
        + m.stale_queued  # NOQA: W503
    )
    assert m.delivered == m.timely
    assert sum(m.delay_hist) == m.timely
    assert len(m.delay_hist) == 21


@pytest.mark.parametrize("overrides", engine_configs)
def test_same_seed_gives_identical_runs(overrides):
    logs = []
    metrics = []
    for _ in range(2):
        stream = io.StringIO()
        cfg = validate_config(overrides)
        log = protocol.EventLog(stream, cfg.M)
        metrics.append(_run(overrides, 300, event_log=log))
        logs.append(stream.getvalue())
    assert metrics[0] == metrics[1]
    assert logs[0] == logs[1]


def test_different_seeds_give_different_runs():
    a = _run({"K": 5, "p_act": 0.5, "policy": "rch", "seed": 1}, 300)
    b = _run({"K": 5, "p_act": 0.5, "policy": "rch", "seed": 2}, 300)
    assert a.reward_trace != b.reward_trace


def test_logged_transmissions_replay_to_the_same_outcome():
    tx_log = []
    overrides = {"K": 6, "M": 2, "p_act": 0.8, "policy": "rch"}
    _run(overrides, 300, tx_log=tx_log)
    assert tx_log
    assert protocol.replay_collisions(tx_log)
    record = tx_log[0]
    assert record.masks.shape == (6, 2)


def test_engine_collisions_match_the_closed_form():
    tx_log = []
    overrides = {"K": 3, "M": 2, "p_act": 0.4, "policy": "rch"}
    metrics = _run(overrides, 20_000, tx_log=tx_log)
    senders = np.array([r.masks.any(axis=1).sum() for r in tx_log])
    hits = np.array([r.success.any() for r in tx_log])
    expected_attempts = expected_slots = 0.0
    for n in (1, 2, 3):
        psi = analytics.PsiMatrix.rch(n, 2)
        slots = int((senders == n).sum())
        per_lap = analytics.per_lap_success_prob(psi, 1.0)[0]
        expected_attempts += n * slots * per_lap
        expected_slots += slots * analytics.success_prob(psi, 1.0)
    assert metrics.attempts == senders.sum()
    assert metrics.attempt_success_rate == pytest.approx(
        expected_attempts / senders.sum(), abs=0.015
    )
    assert hits.mean() == pytest.approx(
        expected_slots / len(tx_log), abs=0.015
    )


def test_replay_detects_tampered_flags():
    masks = np.array([[1, 0], [1, 0]], dtype=np.int8)
    record = protocol.TxRecord(0, masks, np.array([True, False]))
    assert not protocol.replay_collisions([record])


def test_only_alarm_laps_transmit():
    cfg = validate_config({"K": 4, "M": 2, "p_act": 0.3, "policy": "rch"})
    engine = protocol.Engine(cfg)
    for _ in range(200):
        modes = [lap.mode for lap in engine.laps]
        outcome = engine.step()
        for n in outcome.success:
            assert engine.laps[n].mode is Mode.ALARM or modes[n] is Mode.ALARM


def test_engine_rejects_wrong_number_of_agents(cfg):
    with pytest.raises(ValueError):
        protocol.Engine(cfg, agents=[FixedAgent(cfg)])


def test_warmup_excludes_early_updates():
    cfg = validate_config(
        {"K": 3, "M": 2, "policy": "mab", "warmup": 0.5, "horizon": 200}
    )
    engine = protocol.Engine(cfg)
    engine.run()
    everything = protocol.Engine(cfg.replace(warmup=0.0))
    everything.run()
    assert engine.metrics().generated < everything.metrics().generated


def test_collision_oracle_matches_always_transmitting_pair(rng):
    psi = analytics.PsiMatrix.deterministic([1, 1], 1)
    estimate = protocol.collision_oracle(psi.rows, 0.5, 200_000, rng)
    assert estimate.network == pytest.approx(0.5, abs=0.01)
    assert estimate.per_lap == pytest.approx((0.5, 0.5), abs=0.01)


def test_collision_oracle_matches_channel_hopping(rng):
    psi = analytics.PsiMatrix.rch(3, 2)
    expected = analytics.success_prob(psi, 0.4)
    estimate = protocol.collision_oracle(psi.rows, 0.4, 200_000, rng)
    assert estimate.network == pytest.approx(expected, abs=0.01)
    per_lap = analytics.per_lap_success_prob(psi, 0.4)
    assert np.allclose(estimate.per_lap, per_lap, atol=0.01)


def test_when_psi_columns_not_power_of_two_then_oracle_raises(rng):
    with pytest.raises(ValueError):
        protocol.collision_oracle(np.ones((2, 3)) / 3, 0.5, 10, rng)
