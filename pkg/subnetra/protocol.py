"""
LAP and CAP state machines and the slotted simulation engine.

Slot timing of one alarm event (T_ACK = 1):

    slot t     LAP activates, generates the alarm update and sends its pilot
    slot t+1   LAP receives the contention signature (CS)
    slot t+2   LAP selects an access configuration and transmits
    slot t+3   ACK processed, update delivered with delay 3

A failed attempt is retried every T_ACK slots with a fresh action drawn
from the cached CS until the CAP acknowledges it or the head-of-line (HoL)
update exceeds the deadline D.
"""

import collections
import csv
import enum
import logging
import math
from typing import (
    IO,
    Deque,
    Dict,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import pandas as pd
import pydantic

from . import agents as agents_
from .channel import Environment
from .types import AccessConfig, SimConfig, Update, all_configs
from .utils import RngStreams

logger = logging.getLogger(__name__)

METRICS_SCHEMA = 1
# metrics.csv columns. P_timely is timely / (generated - pending): updates
# still queued within their deadline at the horizon have no outcome yet.
METRICS_FIELDS = (
    "schema",
    "method",
    "K",
    "M",
    "p_act",
    "p_arr",
    "D",
    "seed",
    "horizon",
    "P_timely",
    "mean_delay",
    "collision_rate",
)
EVENT_LOG_FIELDS = ("slot", "lap_id", "event", "config_index", "channels")


class Mode(str, enum.Enum):
    NORMAL = "normal"
    ALARM = "alarm"


class Phase(str, enum.Enum):
    PILOT = "pilot"
    CS = "cs"
    TRANSMIT = "transmit"


class EventKind(str, enum.Enum):
    ACTIVATE = "activate"
    ARRIVAL = "arrival"
    PILOT = "pilot"
    CS = "cs"
    TX = "tx"
    ACK = "ack"
    DEADLINE_DROP = "deadline_drop"
    OVERFLOW_DROP = "overflow_drop"


class LapEvent(NamedTuple):
    slot: int
    lap_id: int
    event: EventKind
    config_index: Optional[int] = None
    update: Optional[Update] = None
    reward: Optional[int] = None


class LapInputs(NamedTuple):
    activation: bool = False
    arrival: bool = False
    cs: Optional[np.ndarray] = None
    ack: Optional[bool] = None


class LapState:
    """
    Protocol state of one LAP.

    The queue holds generation slots of pending updates, head first.
    """

    __slots__ = (
        "lap_id",
        "agent",
        "mode",
        "phase",
        "queue",
        "queue_cap",
        "M",
        "cs",
        "next_attempt",
        "last_action",
        "pending",
        "acted",
        "episodes",
    )

    def __init__(self, lap_id: int, agent: agents_.Agent, cfg: SimConfig):
        self.lap_id = lap_id
        self.agent = agent
        self.mode = Mode.NORMAL
        self.phase: Optional[Phase] = None
        self.queue: Deque[int] = collections.deque()
        self.queue_cap = cfg.queue_cap
        self.M = cfg.M
        self.cs: Optional[np.ndarray] = None
        self.next_attempt = 0
        self.last_action: Optional[int] = None
        self.pending: Optional[int] = None
        self.acted = False
        self.episodes = 0

    @property
    def chosen_config(self) -> AccessConfig:
        if self.mode is Mode.NORMAL or self.last_action is None:
            return AccessConfig((0,) * self.M)
        return AccessConfig(
            tuple((self.last_action >> m) & 1 for m in range(self.M))
        )

    def hol_age(self, slot: int) -> Optional[int]:
        if not self.queue:
            return None
        return slot + 1 - self.queue[0]

    def timer_d(self, slot: int, D: int) -> int:
        """Slots, from ``slot`` on, in which the HoL update can still be
        delivered in time."""
        if not self.queue:
            return 0
        return min(D, max(0, self.queue[0] + D - slot))

    def timer_ack(self, slot: int) -> int:
        if self.phase is not Phase.TRANSMIT:
            return 0
        return max(0, self.next_attempt - slot)

    def enqueue(self, slot: int) -> bool:
        if len(self.queue) >= self.queue_cap:
            logger.warning(
                "LAP %s queue full (%s), update of slot %s dropped",
                self.lap_id,
                self.queue_cap,
                slot,
            )
            return False
        self.queue.append(slot)
        return True

    def __repr__(self):
        return (
            f"LapState(lap_id={self.lap_id}, mode={self.mode.value}, "
            f"phase={self.phase}, queue={list(self.queue)})"
        )


def _close_event(state, reward, action, slot, cfg, streams):
    if state.acted:
        state.agent.close_event(action, reward, streams.replay)
        state.episodes += 1
        logger.debug(
            "LAP %s event closed at slot %s, reward %s",
            state.lap_id,
            slot,
            reward,
        )
    state.acted = False
    state.last_action = None
    state.pending = None
    state.cs = None
    if state.queue:
        state.phase = Phase.PILOT
    else:
        state.mode = Mode.NORMAL
        state.phase = None


def lap_step(
    state: LapState,
    inputs: LapInputs,
    slot: int,
    *,
    cfg: SimConfig,
    streams: RngStreams,
) -> Tuple[Optional[int], List[LapEvent]]:
    """
    Advance one LAP by one slot.

    ``inputs.ack`` answers the transmission of the previous slot and
    ``inputs.cs`` is the signature answering the pilot of the previous slot.
    Returns the configuration index transmitted in ``slot`` (None when the
    LAP does not access the channel) and the events of the slot.

    Every attempt is credited to the configuration it used. An ACK closes
    the event with reward +1; any other answer is a -1 for that attempt.
    """
    events = []
    lap = state.lap_id
    answered = None
    if inputs.ack is not None:
        answered, state.pending = state.pending, None

    if inputs.ack and state.mode is Mode.ALARM and state.queue:
        update = Update(
            generation_slot=state.queue.popleft(), delivery_slot=slot
        )
        reward = agents_.reward_for(True)
        events.append(
            LapEvent(
                slot, lap, EventKind.ACK, state.last_action, update, reward
            )
        )
        _close_event(state, reward, answered, slot, cfg, streams)
        answered = None

    if state.queue and state.hol_age(slot) > cfg.D:
        # only the update the event was serving carries the reward
        reward = agents_.reward_for(False) if state.acted else None
        action, event_reward = state.last_action, reward
        while state.queue and state.hol_age(slot) > cfg.D:
            update = Update(generation_slot=state.queue.popleft())
            events.append(
                LapEvent(
                    slot,
                    lap,
                    EventKind.DEADLINE_DROP,
                    action,
                    update,
                    event_reward,
                )
            )
            action = event_reward = None
        _close_event(state, reward, answered, slot, cfg, streams)
        answered = None

    if answered is not None and inputs.ack is False:
        state.agent.observe(answered, agents_.reward_for(False))

    if state.mode is Mode.NORMAL:
        if inputs.activation:
            state.mode = Mode.ALARM
            state.phase = Phase.PILOT
            state.enqueue(slot)
            events.append(LapEvent(slot, lap, EventKind.ACTIVATE))
    elif inputs.arrival:
        kind = EventKind.ARRIVAL
        if not state.enqueue(slot):
            kind = EventKind.OVERFLOW_DROP
        events.append(
            LapEvent(slot, lap, kind, update=Update(generation_slot=slot))
        )

    transmission = None
    if state.mode is Mode.ALARM:
        if state.phase is Phase.PILOT:
            state.phase = Phase.CS
            events.append(LapEvent(slot, lap, EventKind.PILOT))
        elif state.phase is Phase.CS:
            if inputs.cs is not None:
                state.cs = inputs.cs
                state.agent.begin_event(inputs.cs)
                state.phase = Phase.TRANSMIT
                state.next_attempt = slot + 1
                events.append(LapEvent(slot, lap, EventKind.CS))
        elif state.phase is Phase.TRANSMIT and slot >= state.next_attempt:
            transmission = state.agent.select(streams.exploration)
            state.last_action = transmission
            state.pending = transmission
            state.acted = True
            state.next_attempt = slot + cfg.t_ack
            events.append(LapEvent(slot, lap, EventKind.TX, transmission))
    return transmission, events


class SlotOutcome(pydantic.BaseModel):
    success: Dict[int, bool]
    channel_counts: Tuple[int, ...]
    delivered: Tuple[Update, ...] = ()

    @property
    def collided(self) -> bool:
        return any(c > 1 for c in self.channel_counts)

    class Config:
        extra = "forbid"
        frozen = True


def cap_resolve_batch(masks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-LAP success for stacked slots.

    ``masks`` has shape (..., K, M); returns success flags (..., K) and
    per-channel transmitter counts (..., M). A LAP succeeds iff it is the
    only transmitter on at least one of its channels.
    """
    masks = np.asarray(masks)
    counts = masks.sum(axis=-2)
    alone = (masks == 1) & (counts[..., None, :] == 1)
    return alone.any(axis=-1), counts


def cap_resolve(transmissions, M: int) -> SlotOutcome:
    """Resolve one slot; ``transmissions`` maps LAP id to AccessConfig."""
    laps = sorted(transmissions)
    if not laps:
        return SlotOutcome(success={}, channel_counts=(0,) * M)
    masks = []
    for lap in laps:
        tx = transmissions[lap]
        mask = tx.mask if isinstance(tx, AccessConfig) else tuple(tx)
        if len(mask) != M:
            msg = f"mask of LAP {lap} has length {len(mask)} != {M}"
            raise ValueError(msg)
        masks.append(mask)
    success, counts = cap_resolve_batch(np.array(masks, dtype=np.int8))
    return SlotOutcome(
        success={lap: bool(s) for lap, s in zip(laps, success)},
        channel_counts=tuple(int(c) for c in counts),
    )


class RunMetrics(pydantic.BaseModel):
    """
    Aggregated outcome of one or more runs.

    Update counters only cover updates generated after the warm-up window.
    ``pending`` are updates still queued at the horizon that could have
    been delivered in time; they are excluded from P_timely.
    """

    slots: int = 0
    generated: int = 0
    delivered: int = 0
    timely: int = 0
    dropped_deadline: int = 0
    dropped_overflow: int = 0
    pending: int = 0
    stale_queued: int = 0
    busy_slots: int = 0
    collision_slots: int = 0
    attempts: int = 0
    successful_attempts: int = 0
    episodes: int = 0
    delay_hist: Tuple[int, ...] = ()
    reward_trace: Tuple[int, ...] = ()

    @property
    def resolved(self) -> int:
        return self.generated - self.pending

    @property
    def p_timely(self) -> float:
        if self.resolved <= 0:
            return math.nan
        return self.timely / self.resolved

    @property
    def p_deadline(self) -> float:
        return 1.0 - self.p_timely

    @property
    def mean_delay(self) -> float:
        total = sum(d * n for d, n in enumerate(self.delay_hist))
        count = sum(self.delay_hist)
        return total / count if count else math.nan

    @property
    def collision_rate(self) -> float:
        """Fraction of slots with at least one transmission that collided."""
        if not self.busy_slots:
            return 0.0
        return self.collision_slots / self.busy_slots

    @property
    def attempt_success_rate(self) -> float:
        if not self.attempts:
            return math.nan
        return self.successful_attempts / self.attempts

    def merge(self, other: "RunMetrics") -> "RunMetrics":
        n = max(len(self.delay_hist), len(other.delay_hist))
        a = np.zeros(n, dtype=np.int64)
        b = np.zeros(n, dtype=np.int64)
        a[: len(self.delay_hist)] = self.delay_hist
        b[: len(other.delay_hist)] = other.delay_hist
        counts = {
            name: getattr(self, name) + getattr(other, name)
            for name in self.__fields__
            if name not in ("delay_hist", "reward_trace")
        }
        return RunMetrics(
            **counts,
            delay_hist=tuple(int(x) for x in a + b),
            reward_trace=self.reward_trace + other.reward_trace,
        )

    def csv_row(self, cfg: SimConfig) -> Dict[str, str]:
        values = (
            METRICS_SCHEMA,
            cfg.policy.value,
            cfg.K,
            cfg.M,
            cfg.p_act,
            cfg.p_arr,
            cfg.D,
            cfg.seed,
            cfg.horizon,
            self.p_timely,
            self.mean_delay,
            self.collision_rate,
        )
        return {k: format_value(v) for k, v in zip(METRICS_FIELDS, values)}

    class Config:
        extra = "forbid"
        frozen = True


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_metrics_csv(rows: Sequence[Dict[str, str]], stream: IO[str]):
    table = pd.DataFrame(list(rows), columns=METRICS_FIELDS)
    table.to_csv(stream, index=False, lineterminator="\n")


class EventLog:
    """CSV sink for protocol events."""

    def __init__(self, stream: IO[str], M: int):
        self.M = M
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(EVENT_LOG_FIELDS)

    def write(self, event: LapEvent):
        index = "" if event.config_index is None else event.config_index
        channels = ""
        if event.config_index is not None:
            channels = ";".join(
                str(m + 1)
                for m in range(self.M)
                if (event.config_index >> m) & 1
            )
        self._writer.writerow(
            (event.slot, event.lap_id, event.event.value, index, channels)
        )


class TxRecord(NamedTuple):
    """Transmission matrix of one slot, kept for offline replay checks."""

    slot: int
    masks: np.ndarray
    success: np.ndarray


class Engine:
    """
    Slotted simulation of K LAPs sharing M channels towards one CAP.

    Every slot: mobility, activation and arrival draws, LAP state machines
    (ACK handling, deadlines, pilot, CS, transmission), CS generation for
    the pilots of the slot, CAP resolution, metrics.
    """

    def __init__(
        self,
        cfg: SimConfig,
        agents: Optional[Sequence[agents_.Agent]] = None,
        event_log: Optional[EventLog] = None,
        tx_log: Optional[List[TxRecord]] = None,
    ):
        self.cfg = cfg
        self.streams = RngStreams(cfg.seed)
        self.env = Environment(cfg, self.streams)
        if agents is None:
            agents = [
                agents_.make_agent(cfg, self.streams.init)
                for _ in range(cfg.K)
            ]
        if len(agents) != cfg.K:
            raise ValueError(f"{len(agents)} agents given for K={cfg.K}")
        self.agents = list(agents)
        self.laps = [LapState(n, a, cfg) for n, a in enumerate(self.agents)]
        self.event_log = event_log
        self.tx_log = tx_log
        self.slot = 0
        self.warmup_slots = cfg.warmup_slots
        self._configs = all_configs(cfg.M)
        self._cs: Dict[int, np.ndarray] = {}
        self._acks: Dict[int, bool] = {}
        self._counts = collections.Counter()
        self._delay_hist = np.zeros(cfg.D + 1, dtype=np.int64)
        self._rewards: List[int] = []

    def _measured(self, update: Optional[Update]) -> bool:
        return (
            update is not None
            and update.generation_slot >= self.warmup_slots  # NOQA: W503
        )

    def _record(self, event: LapEvent):
        if self.event_log is not None:
            self.event_log.write(event)
        kind = event.event
        if event.reward is not None:
            self._rewards.append(event.reward)
        if kind is EventKind.ACTIVATE:
            if event.slot >= self.warmup_slots:
                self._counts["generated"] += 1
        elif kind in (EventKind.ARRIVAL, EventKind.OVERFLOW_DROP):
            if self._measured(event.update):
                self._counts["generated"] += 1
                if kind is EventKind.OVERFLOW_DROP:
                    self._counts["dropped_overflow"] += 1
        elif kind is EventKind.ACK:
            if self._measured(event.update):
                delay = event.update.delay
                self._counts["delivered"] += 1
                if delay <= self.cfg.D:
                    self._counts["timely"] += 1
                    self._delay_hist[delay] += 1
        elif kind is EventKind.DEADLINE_DROP:
            if self._measured(event.update):
                self._counts["dropped_deadline"] += 1

    def _resolve(self, transmissions: Dict[int, int]):
        laps = sorted(transmissions)
        masks = self._configs[[transmissions[n] for n in laps]]
        success, counts = cap_resolve_batch(masks)
        return laps, masks, success, counts

    def step(self) -> SlotOutcome:
        cfg = self.cfg
        t = self.slot
        self.env.step()
        activations = self.streams.activation.random(cfg.K) < cfg.p_act
        arrivals = self.streams.arrivals.random(cfg.K) < cfg.p_arr

        transmissions: Dict[int, int] = {}
        delivered = []
        pilots = []
        for n, lap in enumerate(self.laps):
            inputs = LapInputs(
                activation=bool(activations[n]),
                arrival=bool(arrivals[n]),
                cs=self._cs.get(n),
                ack=self._acks.get(n),
            )
            tx, events = lap_step(
                lap, inputs, t, cfg=cfg, streams=self.streams
            )
            if tx is not None:
                transmissions[n] = tx
            for event in events:
                self._record(event)
                if event.event is EventKind.PILOT:
                    pilots.append(n)
                elif event.event is EventKind.ACK:
                    delivered.append(event.update)

        gains = {n: self.env.link_gains(n) for n in pilots}
        self._cs = self.env.contention_signatures(gains)

        self._acks = {}
        counts = np.zeros(cfg.M, dtype=np.int64)
        success_by_lap = {}
        if transmissions:
            laps, masks, success, counts = self._resolve(transmissions)
            success_by_lap = {n: bool(s) for n, s in zip(laps, success)}
            self._acks = success_by_lap
            self._counts["attempts"] += len(laps)
            self._counts["successful_attempts"] += int(success.sum())
            if counts.any():
                self._counts["busy_slots"] += 1
                if (counts > 1).any():
                    self._counts["collision_slots"] += 1
            if self.tx_log is not None:
                full = np.zeros((cfg.K, cfg.M), dtype=np.int8)
                full[laps] = masks
                flags = np.zeros(cfg.K, dtype=bool)
                flags[laps] = success
                self.tx_log.append(TxRecord(t, full, flags))

        self.slot += 1
        return SlotOutcome.construct(
            success=success_by_lap,
            channel_counts=tuple(int(c) for c in counts),
            delivered=tuple(delivered),
        )

    def metrics(self) -> RunMetrics:
        pending = stale = 0
        for lap in self.laps:
            for generation in lap.queue:
                if generation < self.warmup_slots:
                    continue
                if self.slot - generation <= self.cfg.D:
                    pending += 1
                else:
                    stale += 1
        return RunMetrics(
            slots=self.slot,
            pending=pending,
            stale_queued=stale,
            episodes=sum(lap.episodes for lap in self.laps),
            delay_hist=tuple(int(x) for x in self._delay_hist),
            reward_trace=tuple(self._rewards),
            **self._counts,
        )

    def run(self, horizon: Optional[int] = None) -> RunMetrics:
        horizon = self.cfg.horizon if horizon is None else horizon
        logger.info(
            "Run %s K=%s M=%s p_act=%s seed=%s for %s slots",
            self.cfg.policy.value,
            self.cfg.K,
            self.cfg.M,
            self.cfg.p_act,
            self.cfg.seed,
            horizon,
        )
        for _ in range(horizon):
            self.step()
        metrics = self.metrics()
        logger.info(
            "Run finished: P_timely=%.4f mean_delay=%.3f collision_rate=%.4f",
            metrics.p_timely,
            metrics.mean_delay,
            metrics.collision_rate,
        )
        return metrics


def engine_run(
    cfg: SimConfig,
    horizon: Optional[int] = None,
    agents: Optional[Sequence[agents_.Agent]] = None,
    event_log: Optional[EventLog] = None,
    tx_log: Optional[List[TxRecord]] = None,
) -> RunMetrics:
    engine = Engine(cfg, agents=agents, event_log=event_log, tx_log=tx_log)
    return engine.run(horizon)


def replay_collisions(tx_log: Sequence[TxRecord]) -> bool:
    """Check logged success flags against a fresh resolution of each slot."""
    for record in tx_log:
        success, _ = cap_resolve_batch(record.masks)
        if not np.array_equal(success, record.success):
            logger.warning("Replay mismatch in slot %s", record.slot)
            return False
    return True


class OracleEstimate(pydantic.BaseModel):
    network: float
    network_stderr: float
    per_lap: Tuple[float, ...]
    slots: int

    class Config:
        extra = "forbid"
        frozen = True


def _draw_configs(cdf: np.ndarray, n: int, rng: np.random.Generator):
    u = rng.random((n, cdf.shape[0]))
    index = (u[:, :, None] >= cdf[None, :, :]).sum(axis=-1)
    return np.minimum(index, cdf.shape[1] - 1)


def collision_oracle(
    psi,
    p_act: float,
    slots: int,
    rng: np.random.Generator,
    chunk: int = 1 << 16,
) -> OracleEstimate:
    """
    Pure collision-channel slots with fixed access distributions.

    Every slot each LAP activates with probability ``p_act`` and draws its
    configuration from its row of ``psi``. Returns the frequency of slots
    with at least one success and, per LAP, the success frequency given
    activation.
    """
    psi = np.asarray(psi, dtype=float)
    K, n_configs = psi.shape
    M = int(round(math.log2(n_configs)))
    if 2**M != n_configs:
        raise ValueError(f"psi must have 2^M columns, {n_configs} found")
    configs = all_configs(M)
    cdf = np.cumsum(psi, axis=1)
    cdf[:, -1] = 1.0
    network = 0
    lap_success = np.zeros(K, dtype=np.int64)
    lap_active = np.zeros(K, dtype=np.int64)
    remaining = slots
    while remaining > 0:
        n = min(chunk, remaining)
        active = rng.random((n, K)) < p_act
        index = _draw_configs(cdf, n, rng)
        masks = configs[index] * active[:, :, None]
        success, _ = cap_resolve_batch(masks)
        network += int(success.any(axis=1).sum())
        lap_success += success.sum(axis=0)
        lap_active += active.sum(axis=0)
        remaining -= n
    freq = network / slots
    per_lap = np.divide(
        lap_success,
        lap_active,
        out=np.zeros(K),
        where=lap_active > 0,
    )
    return OracleEstimate(
        network=freq,
        network_stderr=math.sqrt(freq * (1 - freq) / slots),
        per_lap=tuple(float(x) for x in per_lap),
        slots=slots,
    )


__all__ = [
    "METRICS_SCHEMA",
    "METRICS_FIELDS",
    "EVENT_LOG_FIELDS",
    "Mode",
    "Phase",
    "EventKind",
    "LapEvent",
    "LapInputs",
    "LapState",
    "lap_step",
    "SlotOutcome",
    "cap_resolve_batch",
    "cap_resolve",
    "RunMetrics",
    "format_value",
    "write_metrics_csv",
    "EventLog",
    "TxRecord",
    "Engine",
    "engine_run",
    "replay_collisions",
    "OracleEstimate",
    "collision_oracle",
]
