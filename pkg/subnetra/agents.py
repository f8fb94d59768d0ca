"""Access policies of a LAP: DNN agent, MAB-RA, RCH and a fixed policy."""

import logging
import sys
from abc import ABC, abstractmethod
from typing import Dict, Optional, Type

import numpy as np

from . import neural
from .types import Policy, SimConfig

logger = logging.getLogger(__name__)


def epsilon_at(
    event_count: int,
    start: float = 1.0,
    floor: float = 0.1,
    step: float = 0.005,
) -> float:
    if event_count < 0:
        raise ValueError(f"event_count must be >= 0, {event_count=}")
    return max(floor, start - step * event_count)


def lr_at(
    event_count: int,
    lr0: float,
    decay: float = 0.015,
    floor: float = 1e-4,
) -> float:
    if event_count < 0:
        raise ValueError(f"event_count must be >= 0, {event_count=}")
    return max(floor, lr0 * (1.0 - decay) ** event_count)


def reward_for(delivered_within_D: bool) -> int:
    return 1 if delivered_within_D else -1


def greedy(values: np.ndarray) -> int:
    """Index of the largest value; ties go to the lowest index."""
    return int(np.argmax(values))


def _epsilon_greedy(values, eps, rng) -> int:
    if rng.random() < eps:
        return int(rng.integers(len(values)))
    return greedy(values)


class Agent(ABC):
    """
    Policy state of one LAP.

    An alarm event is ``begin_event`` (CS received), one ``select`` per
    transmission attempt, ``observe`` for every attempt that was not
    acknowledged while the event goes on, then ``close_event`` with the
    final outcome. ``close_event`` gets ``action=None`` when the last
    attempt was already observed, or when nothing was sent.
    """

    policy: Policy

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.n_actions = cfg.n_actions
        self.events = 0
        self._cs: Optional[np.ndarray] = None

    @property
    def epsilon(self) -> float:
        cfg = self.cfg
        return epsilon_at(
            self.events, cfg.eps_start, cfg.eps_floor, cfg.eps_step
        )

    def begin_event(self, cs: Optional[np.ndarray]):
        self._cs = cs

    @abstractmethod
    def select(self, rng: np.random.Generator) -> int:
        """Access configuration index for the next attempt."""

    def observe(self, action: int, reward: int):
        """Credit one attempt inside a still open event."""

    def close_event(
        self, action: Optional[int], reward: int, rng: np.random.Generator
    ) -> Optional[float]:
        """Learn from the event outcome; returns a training loss if any."""
        self.events += 1
        self._cs = None
        return None


class DnnAgent(Agent):
    """Contextual agent: action values from the CS through an Mlp."""

    policy = Policy.DNN

    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.net = neural.Mlp.for_channels(cfg.M, cfg.q, rng)
        self.memory = neural.ReplayMemory(cfg.S)
        self.opt_state = neural.RmsPropState.for_net(
            self.net, decay=cfg.rms_decay, eps=cfg.rms_eps, lr=cfg.lr0
        )
        self.scaler = neural.FeatureScaler(2 * cfg.M)
        self.losses = []

    def features(self, cs: np.ndarray) -> np.ndarray:
        raw = neural.cs_features(cs)
        if not self.cfg.normalize_cs:
            return raw
        return self.scaler.transform(raw)

    def begin_event(self, cs: Optional[np.ndarray]):
        super().begin_event(cs)
        if cs is not None and self.cfg.normalize_cs:
            self.scaler.update(neural.cs_features(cs))

    def select(self, rng: np.random.Generator) -> int:
        return select_action_dnn(self._cs, self, self.epsilon, rng)

    def _remember(self, action: int, reward: int):
        self.memory.push(
            neural.ReplayTuple(
                features=self.features(self._cs), action=action, reward=reward
            )
        )

    def observe(self, action, reward):
        self._remember(action, reward)

    def close_event(self, action, reward, rng):
        if action is not None:
            self._remember(action, reward)
        cfg = self.cfg
        lr = lr_at(self.events, cfg.lr0, cfg.lr_decay, cfg.lr_floor)
        self.net, self.opt_state, loss = neural.train_step(
            self.net,
            self.memory,
            self.cfg.batch,
            self.opt_state.with_lr(lr),
            rng,
        )
        if loss is not None:
            self.losses.append(loss)
        super().close_event(action, reward, rng)
        return loss


def select_action_dnn(
    cs: np.ndarray, agent: DnnAgent, eps: float, rng: np.random.Generator
) -> int:
    values = neural.mlp_forward(agent.features(cs), agent.net)
    return _epsilon_greedy(values, eps, rng)


class MabAgent(Agent):
    """Context-free epsilon-greedy bandit over all configurations."""

    policy = Policy.MAB

    def __init__(self, cfg: SimConfig, rng: np.random.Generator = None):
        super().__init__(cfg)
        self.values = np.zeros(self.n_actions)
        self.counts = np.zeros(self.n_actions, dtype=np.int64)
        self.step = cfg.mab_step

    def select(self, rng):
        return select_action_mab(self, self.epsilon, rng)

    def observe(self, action, reward):
        mab_update(self, action, reward)

    def close_event(self, action, reward, rng):
        if action is not None:
            mab_update(self, action, reward)
        return super().close_event(action, reward, rng)


def select_action_mab(
    agent: MabAgent, eps: float, rng: np.random.Generator
) -> int:
    return _epsilon_greedy(agent.values, eps, rng)


def mab_update(agent: MabAgent, action: int, reward: float) -> MabAgent:
    agent.values[action] += agent.step * (reward - agent.values[action])
    agent.counts[action] += 1
    return agent


class RchAgent(Agent):
    """Random channel hopping: one uniformly chosen channel per attempt."""

    policy = Policy.RCH

    def __init__(self, cfg: SimConfig, rng: np.random.Generator = None):
        super().__init__(cfg)

    def select(self, rng):
        return select_action_rch(self.cfg.M, rng)


def select_action_rch(M: int, rng: np.random.Generator) -> int:
    if M < 1:
        raise ValueError(f"M must be >= 1, {M=}")
    return 1 << int(rng.integers(M))


class FixedAgent(Agent):
    """Always the same configuration."""

    policy = Policy.FIXED

    def __init__(
        self,
        cfg: SimConfig,
        rng: np.random.Generator = None,
        index: Optional[int] = None,
    ):
        super().__init__(cfg)
        self.index = cfg.fixed_index if index is None else index
        if not 0 <= self.index < self.n_actions:
            raise ValueError(f"fixed index out of range: {self.index}")

    def select(self, rng):
        return self.index


def _get_all_agents() -> Dict[str, Type[Agent]]:
    def is_agent(class_):
        return (
            isinstance(class_, type)
            and issubclass(class_, Agent)  # NOQA: W503
            and class_ is not Agent  # NOQA: W503
        )

    classes = list(sys.modules[__name__].__dict__.values())
    return {c.policy.value: c for c in classes if is_agent(c)}


_all_agents = _get_all_agents()


def from_string(policy: str) -> Type[Agent]:
    policy = str(getattr(policy, "value", policy)).lower()
    try:
        return _all_agents[policy]
    except KeyError:
        policies = list(_all_agents.keys())
        msg = f"Policy {policy} not found. List of available {policies=}"
        raise ValueError(msg)


def make_agent(cfg: SimConfig, rng: np.random.Generator) -> Agent:
    return from_string(cfg.policy)(cfg, rng)


__all__ = [
    "Agent",
    "DnnAgent",
    "MabAgent",
    "RchAgent",
    "FixedAgent",
    "epsilon_at",
    "lr_at",
    "reward_for",
    "greedy",
    "select_action_dnn",
    "select_action_mab",
    "mab_update",
    "select_action_rch",
    "from_string",
    "make_agent",
]
