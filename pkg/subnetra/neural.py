"""
Action-value network, RMSProp optimizer and replay memory.

The network maps contention signature features (2M reals) to one value per
access configuration (2^M outputs) through two ReLU hidden layers of width
q. Training regresses the value of the chosen configuration on the observed
reward; the other outputs get no gradient.
"""

import logging
import math
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic

from . import exc

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "c1", "W2", "c2", "W3", "c3")
CHECKPOINT_MAGIC = b"SNRA"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


class Mlp(pydantic.BaseModel):
    """
    Two hidden-layer perceptron.

    W1: (q, n_in), W2: (q, q), W3: (n_out, q); biases c1, c2, c3.
    """

    W1: np.ndarray
    c1: np.ndarray
    W2: np.ndarray
    c2: np.ndarray
    W3: np.ndarray
    c3: np.ndarray

    @pydantic.root_validator(skip_on_failure=True)
    def shapes_must_chain(cls, values):
        W1, c1, W2, c2, W3, c3 = (values[n] for n in PARAM_NAMES)
        q, n_in = W1.shape
        n_out = W3.shape[0]
        expected = {
            "c1": (q,),
            "W2": (q, q),
            "c2": (q,),
            "W3": (n_out, q),
            "c3": (n_out,),
        }
        for name, shape in expected.items():
            if values[name].shape != shape:
                msg = f"{name} must have shape {shape}, "
                msg += f"{values[name].shape} found"
                raise ValueError(msg)
        return values

    @classmethod
    def init(
        cls, n_in: int, q: int, n_out: int, rng: np.random.Generator
    ) -> "Mlp":
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every tensor."""
        params = {}
        for name, shape, fan_in in (
            ("W1", (q, n_in), n_in),
            ("c1", (q,), n_in),
            ("W2", (q, q), q),
            ("c2", (q,), q),
            ("W3", (n_out, q), q),
            ("c3", (n_out,), q),
        ):
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(**params)

    @classmethod
    def for_channels(cls, M: int, q: int, rng: np.random.Generator) -> "Mlp":
        return cls.init(2 * M, q, 2**M, rng)

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.W3.shape[0]

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in PARAM_NAMES)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        # shapes are unchanged by construction, skip re-validation
        return Mlp.construct(**dict(zip(PARAM_NAMES, params)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def __bytes__(self):
        header = _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            self.n_inputs,
            self.n_hidden,
            self.n_outputs,
        )
        body = b"".join(
            np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params
        )
        return header + body

    @classmethod
    def from_bytes(cls, bytes_: bytes) -> "Mlp":
        if len(bytes_) < _HEADER.size:
            raise ValueError("checkpoint too short for its header")
        magic, version, n_in, q, n_out = _HEADER.unpack(
            bytes_[: _HEADER.size]
        )
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a network checkpoint, {magic=}")
        if version != CHECKPOINT_VERSION:
            msg = f"unsupported checkpoint {version=}, "
            msg += f"expected {CHECKPOINT_VERSION}"
            raise ValueError(msg)
        shapes = [(q, n_in), (q,), (q, q), (q,), (n_out, q), (n_out,)]
        expected = _HEADER.size + 8 * sum(math.prod(s) for s in shapes)
        if len(bytes_) != expected:
            msg = f"checkpoint has {len(bytes_)} bytes, {expected} expected"
            raise ValueError(msg)
        offset = _HEADER.size
        params = {}
        for name, shape in zip(PARAM_NAMES, shapes):
            count = math.prod(shape)
            flat = np.frombuffer(
                bytes_, dtype="<f8", count=count, offset=offset
            )
            params[name] = flat.astype(float).reshape(shape)
            offset += 8 * count
        return cls(**params)

    class Config:
        extra = "forbid"
        frozen = True
        arbitrary_types_allowed = True


def save_checkpoint(net: Mlp, path: Union[str, Path]):
    Path(path).write_bytes(bytes(net))


def load_checkpoint(path: Union[str, Path]) -> Mlp:
    return Mlp.from_bytes(Path(path).read_bytes())


def cs_features(cs: np.ndarray) -> np.ndarray:
    """Real parts followed by imaginary parts."""
    cs = np.asarray(cs)
    return np.concatenate([cs.real, cs.imag]).astype(float)


def _relu(x):
    return np.maximum(x, 0.0)


def _check_inputs(x: np.ndarray, net: Mlp):
    if x.shape[-1] != net.n_inputs:
        msg = f"features have length {x.shape[-1]}, "
        msg += f"network expects {net.n_inputs}"
        raise exc.ContractViolation(msg)


def mlp_forward(features: np.ndarray, net: Mlp) -> np.ndarray:
    """Action values for one feature vector (or a batch of rows)."""
    x = np.asarray(features, dtype=float)
    _check_inputs(x, net)
    a1 = _relu(x @ net.W1.T + net.c1)
    a2 = _relu(a1 @ net.W2.T + net.c2)
    return a2 @ net.W3.T + net.c3


def _loss_and_grad_arrays(net: Mlp, X, actions, rewards):
    B = X.shape[0]
    z1 = X @ net.W1.T + net.c1
    a1 = _relu(z1)
    z2 = a1 @ net.W2.T + net.c2
    a2 = _relu(z2)
    values = a2 @ net.W3.T + net.c3

    rows = np.arange(B)
    err = rewards - values[rows, actions]
    loss = float(np.mean(err**2))

    d_values = np.zeros_like(values)
    d_values[rows, actions] = -2.0 * err / B
    dW3 = d_values.T @ a2
    dc3 = d_values.sum(axis=0)
    dz2 = (d_values @ net.W3) * (z2 > 0)
    dW2 = dz2.T @ a1
    dc2 = dz2.sum(axis=0)
    dz1 = (dz2 @ net.W2) * (z1 > 0)
    dW1 = dz1.T @ X
    dc1 = dz1.sum(axis=0)
    return loss, (dW1, dc1, dW2, dc2, dW3, dc3)


class ReplayTuple(pydantic.BaseModel):
    """One (CS features, chosen configuration, reward) experience."""

    features: np.ndarray
    action: pydantic.conint(ge=0)
    reward: float

    class Config:
        extra = "forbid"
        frozen = True
        arbitrary_types_allowed = True


def loss_and_grad(
    net: Mlp, batch: Sequence[ReplayTuple]
) -> Tuple[float, Tuple[np.ndarray, ...]]:
    """
    Mean squared error between rewards and chosen-action values.

    Returns the loss and one gradient per parameter, in PARAM_NAMES order.
    """
    if len(batch) == 0:
        raise exc.ContractViolation("loss needs a non-empty batch")
    X = np.stack([np.asarray(t.features, dtype=float) for t in batch])
    _check_inputs(X, net)
    actions = np.array([t.action for t in batch])
    if actions.max() >= net.n_outputs:
        msg = f"action {actions.max()} outside [0, {net.n_outputs})"
        raise exc.ContractViolation(msg)
    rewards = np.array([t.reward for t in batch], dtype=float)
    return _loss_and_grad_arrays(net, X, actions, rewards)


class RmsPropState(pydantic.BaseModel):
    mean_square: Tuple[np.ndarray, ...]
    decay: pydantic.confloat(ge=0, le=1) = 0.9
    eps: pydantic.confloat(gt=0) = 1e-8
    lr: pydantic.confloat(gt=0) = 0.01

    @classmethod
    def for_net(cls, net: Mlp, **kwargs) -> "RmsPropState":
        mean_square = tuple(np.zeros_like(p) for p in net.params)
        return cls(mean_square=mean_square, **kwargs)

    def with_lr(self, lr: float) -> "RmsPropState":
        return self.copy(update={"lr": lr})

    class Config:
        extra = "forbid"
        frozen = True
        arbitrary_types_allowed = True


def rmsprop_step(
    net: Mlp, grads: Sequence[np.ndarray], state: RmsPropState
) -> Tuple[Mlp, RmsPropState]:
    if len(grads) != len(net.params):
        msg = f"{len(grads)} gradients for {len(net.params)} parameters"
        raise exc.ContractViolation(msg)
    new_params = []
    new_mean_square = []
    for w, g, e in zip(net.params, grads, state.mean_square):
        if g.shape != w.shape:
            msg = f"gradient shape {g.shape} != parameter shape {w.shape}"
            raise exc.ContractViolation(msg)
        e = state.decay * e + (1.0 - state.decay) * g * g
        new_mean_square.append(e)
        new_params.append(w - state.lr * g / (np.sqrt(e) + state.eps))
    new_net = net.with_params(new_params)
    if not new_net.is_finite():
        logger.warning("Non-finite parameters after update, step skipped")
        return net, state
    new_state = state.copy(update={"mean_square": tuple(new_mean_square)})
    return new_net, new_state


class ReplayMemory:
    """Bounded FIFO of replay tuples; the oldest is evicted when full."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, {capacity=}")
        self.capacity = capacity
        self._features: Optional[np.ndarray] = None
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=float)
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def push(self, item: ReplayTuple):
        features = np.asarray(item.features, dtype=float)
        if self._features is None:
            self._features = np.zeros((self.capacity, features.shape[0]))
        elif features.shape != self._features.shape[1:]:
            msg = f"features of shape {features.shape} pushed into memory "
            msg += f"holding {self._features.shape[1:]}"
            raise exc.ContractViolation(msg)
        self._features[self._next] = features
        self._actions[self._next] = item.action
        self._rewards[self._next] = item.reward
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _ordered_slots(self) -> np.ndarray:
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def tuples(self) -> List[ReplayTuple]:
        """Stored tuples, oldest first."""
        return [self.tuple_at(i) for i in self._ordered_slots()]

    def tuple_at(self, slot: int) -> ReplayTuple:
        return ReplayTuple(
            features=self._features[slot].copy(),
            action=int(self._actions[slot]),
            reward=float(self._rewards[slot]),
        )

    def sample_slots(
        self, B: int, rng: np.random.Generator
    ) -> Optional[np.ndarray]:
        """Storage slots of B distinct tuples, or None when fewer stored."""
        if B < 1 or self._size < B:
            return None
        return self._ordered_slots()[
            rng.choice(self._size, size=B, replace=False)
        ]

    def sample_arrays(self, B: int, rng: np.random.Generator):
        """(features, actions, rewards) of B distinct tuples, or None."""
        slots = self.sample_slots(B, rng)
        if slots is None:
            return None
        return (
            self._features[slots],
            self._actions[slots],
            self._rewards[slots],
        )


def replay_push(mem: ReplayMemory, item: ReplayTuple) -> ReplayMemory:
    mem.push(item)
    return mem


def sample_minibatch(
    mem: ReplayMemory, B: int, rng: np.random.Generator
) -> Optional[List[ReplayTuple]]:
    """Uniform sample without replacement; None when fewer than B stored."""
    slots = mem.sample_slots(B, rng)
    if slots is None:
        return None
    return [mem.tuple_at(i) for i in slots]


def train_step(
    net: Mlp,
    mem: ReplayMemory,
    B: int,
    opt_state: RmsPropState,
    rng: np.random.Generator,
) -> Tuple[Mlp, RmsPropState, Optional[float]]:
    """
    One mini-batch RMSProp update.

    Returns the inputs unchanged (and no loss) when memory is not ready.
    """
    sample = mem.sample_arrays(B, rng)
    if sample is None:
        return net, opt_state, None
    X, actions, rewards = sample
    loss, grads = _loss_and_grad_arrays(net, X, actions, rewards)
    net, opt_state = rmsprop_step(net, grads, opt_state)
    return net, opt_state, loss


class FeatureScaler:
    """Running per-feature standardization (Welford)."""

    def __init__(self, n_features: int):
        self.count = 0
        self.mean = np.zeros(n_features)
        self._m2 = np.zeros(n_features)

    def update(self, x: np.ndarray):
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        var = self._m2 / (self.count - 1)
        return np.sqrt(np.maximum(var, 1e-24))

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(x, dtype=float)
        return (x - self.mean) / self.std
