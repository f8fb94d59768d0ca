"""Domain types, access-configuration enumeration and configuration."""

import enum
import functools
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pydantic

from . import exc

logger = logging.getLogger(__name__)

MAX_CHANNELS = 10


class AccessConfig(pydantic.BaseModel):
    """
    Channels a LAP transmits on in one slot.

    mask[m] == 1 means "transmit on channel m + 1".
    """

    mask: Tuple[int, ...]

    def __init__(self, *args, **kwargs):
        if len(args) == 1 and len(kwargs) == 0:
            super().__init__(mask=args[0])
        else:
            super().__init__(*args, **kwargs)

    @pydantic.validator("mask")
    def must_be_binary(cls, v):
        if len(v) == 0:
            raise ValueError("mask must have at least one channel")
        bad = [b for b in v if b not in (0, 1)]
        if bad:
            raise ValueError(f"mask entries must be 0 or 1, {bad} found")
        return v

    @property
    def M(self) -> int:
        return len(self.mask)

    @property
    def index(self) -> int:
        return mask_to_index(self.mask)

    @property
    def channels(self) -> Tuple[int, ...]:
        """1-based channel numbers the configuration transmits on."""
        return tuple(m + 1 for m, b in enumerate(self.mask) if b)

    class Config:
        extra = "forbid"
        frozen = True


def config_index_to_mask(i: int, M: int) -> AccessConfig:
    """Little-endian: bit m of ``i`` is channel m + 1."""
    if M < 1:
        raise ValueError(f"M must be >= 1, {M=}")
    if not 0 <= i < 2**M:
        raise ValueError(f"config index out of range [0, 2^{M}): {i=}")
    return AccessConfig(tuple((i >> m) & 1 for m in range(M)))


def mask_to_index(mask) -> int:
    index = 0
    for m, b in enumerate(mask):
        index |= int(b) << m
    return index


@functools.lru_cache(maxsize=None)
def _all_configs(M: int) -> np.ndarray:
    indices = np.arange(2**M)
    masks = (indices[:, None] >> np.arange(M)[None, :]) & 1
    masks = masks.astype(np.int8)
    masks.flags.writeable = False
    return masks


def all_configs(M: int) -> np.ndarray:
    """Every access configuration as a read-only (2^M, M) 0/1 array."""
    if not 1 <= M <= MAX_CHANNELS:
        raise ValueError(f"M must be in [1, {MAX_CHANNELS}], {M=}")
    return _all_configs(M)


class Update(pydantic.BaseModel):
    """
    One sensor update waiting in (or delivered from) a LAP queue.

    The delivery slot is the end of the slot in which the CAP received the
    update, so a transmission in slot t delivers at t + 1.
    """

    generation_slot: pydantic.conint(ge=0)
    delivery_slot: Optional[pydantic.conint(ge=0)] = None

    @pydantic.root_validator(skip_on_failure=True)
    def delivery_not_before_generation(cls, values):
        generation = values["generation_slot"]
        delivery = values.get("delivery_slot")
        if delivery is not None and delivery < generation:
            msg = f"{delivery=} is before {generation=}"
            raise ValueError(msg)
        return values

    @property
    def delay(self) -> Optional[int]:
        if self.delivery_slot is None:
            return None
        return self.delivery_slot - self.generation_slot

    def age(self, slot: int) -> int:
        """Delay the update would have if delivered at the end of ``slot``."""
        return slot + 1 - self.generation_slot

    def timely(self, D: int) -> bool:
        delay = self.delay
        return delay is not None and delay <= D

    def deliver(self, slot: int) -> "Update":
        return Update(
            generation_slot=self.generation_slot, delivery_slot=slot + 1
        )

    class Config:
        extra = "forbid"
        frozen = True


class Pose(pydantic.BaseModel):
    x: float
    y: float
    direction: float
    speed: pydantic.confloat(ge=0)

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def distance_to(self, other: "Pose") -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))

    class Config:
        extra = "forbid"
        frozen = True


class Policy(str, enum.Enum):
    DNN = "dnn"
    MAB = "mab"
    RCH = "rch"
    FIXED = "fixed"


def _unit_interval(cls, v, field):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{field.name} ∉ [0,1]")
    return v


def _positive(cls, v, field):
    if not v > 0:
        raise ValueError(f"{field.name} must be > 0")
    return v


def _non_negative(cls, v, field):
    if v < 0:
        raise ValueError(f"{field.name} must be >= 0")
    return v


def _at_least_one(cls, v, field):
    if v < 1:
        raise ValueError(f"{field.name} must be >= 1")
    return v


class SimConfig(pydantic.BaseModel):
    """
    Full parameterization of one simulation run.

    Keys are the names accepted in ``key = value`` config files.
    """

    K: int = 10
    M: int = 3
    p_act: float = 0.4
    p_arr: float = 0.1
    D: int = 20
    slot_ms: float = 3.0
    area: Tuple[float, float] = (20.0, 20.0)
    r_sub: float = 2.0
    v: float = 2.0
    snr_db: float = 120.0
    q: int = 64
    S: Optional[int] = None
    batch: Optional[int] = None
    seed: int = 0
    policy: Policy = Policy.DNN
    fixed_index: int = 0
    eps_start: float = 1.0
    eps_floor: float = 0.1
    eps_step: float = 0.005
    lr0: float = 0.01
    lr_decay: float = 0.015
    lr_floor: float = 1e-4
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    mab_step: float = 0.1
    alpha: float = 2.2
    beta: float = 32.4
    gamma: float = 2.0
    fc_ghz: float = 6.0
    sigma_s: float = 4.0
    d_corr: float = 10.0
    min_sep: float = 1.5
    horizon: int = 200_000
    warmup: float = 0.1
    queue_cap: int = 100
    t_ack: int = 1
    mobility: bool = True
    normalize_cs: bool = True

    @pydantic.validator("area", pre=True)
    def parse_area(cls, v):
        if isinstance(v, str):
            parts = v.replace("x", ",").replace("X", ",").split(",")
            parts = [p.strip() for p in parts if p.strip()]
            if len(parts) != 2:
                raise ValueError(f'area "{v}" must look like 20x20')
            return tuple(float(p) for p in parts)
        return v

    @pydantic.validator("area")
    def area_must_be_positive(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError(f"area dimensions must be > 0, {v} found")
        return v

    @pydantic.validator("policy", pre=True)
    def policy_is_case_insensitive(cls, v):
        if isinstance(v, str):
            return v.strip().lower()
        return v

    _at_least_one = pydantic.validator(
        "K", "D", "q", "horizon", "queue_cap", "t_ack", allow_reuse=True
    )(_at_least_one)
    _unit_interval = pydantic.validator(
        "p_act",
        "p_arr",
        "eps_start",
        "eps_floor",
        "eps_step",
        "lr_decay",
        "rms_decay",
        "mab_step",
        "warmup",
        allow_reuse=True,
    )(_unit_interval)
    _positive = pydantic.validator(
        "slot_ms", "fc_ghz", "d_corr", "lr0", "lr_floor", "rms_eps",
        allow_reuse=True,
    )(_positive)
    _non_negative = pydantic.validator(
        "seed", "r_sub", "v", "sigma_s", "min_sep", allow_reuse=True
    )(_non_negative)

    @pydantic.validator("M")
    def channels_in_range(cls, v):
        if not 1 <= v <= MAX_CHANNELS:
            raise ValueError(f"M ∉ [1,{MAX_CHANNELS}]")
        return v

    @pydantic.validator("S", "batch")
    def optional_sizes_positive(cls, v, field):
        if v is not None and v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @pydantic.root_validator(skip_on_failure=True)
    def fill_defaults_and_cross_check(cls, values):
        M = values["M"]
        if values.get("batch") is None:
            values["batch"] = 2**M * 30
        if values.get("S") is None:
            values["S"] = 10 * values["batch"]
        if values["batch"] > values["S"]:
            raise ValueError("batch > S (mini-batch must fit in memory)")
        if values["eps_floor"] > values["eps_start"]:
            raise ValueError("eps_floor > eps_start")
        if not 0 <= values["fixed_index"] < 2**M:
            raise ValueError(f"fixed_index ∉ [0,2^{M})")
        return values

    @property
    def n_actions(self) -> int:
        return 2**self.M

    @property
    def dt(self) -> float:
        """Slot duration in seconds."""
        return self.slot_ms / 1000.0

    @property
    def warmup_slots(self) -> int:
        """Slots excluded from P_timely (learning policies only)."""
        if self.policy in (Policy.DNN, Policy.MAB):
            return int(self.horizon * self.warmup)
        return 0

    def replace(self, **changes) -> "SimConfig":
        """Return a re-validated copy with ``changes`` applied."""
        data = self.dict()
        # derived sizes follow M unless given explicitly
        if "M" in changes:
            data["batch"] = None
            data["S"] = None
        data.update(changes)
        return validate_config(data)

    class Config:
        extra = "forbid"
        frozen = True


def _violations(error: pydantic.ValidationError):
    violations = []
    for err in error.errors():
        loc = ".".join(str(part) for part in err["loc"])
        violations.append(f"{loc}: {err['msg']}")
    return violations


def validate_config(cfg: Union[dict, SimConfig], *, source=None) -> SimConfig:
    """
    Validate a configuration and fill defaults for absent keys.

    Raises ConfigError listing every violated constraint.
    """
    if isinstance(cfg, SimConfig):
        return cfg
    try:
        return SimConfig(**cfg)
    except pydantic.ValidationError as e:
        raise exc.ConfigError(violations=_violations(e), source=source)
    except TypeError as e:
        raise exc.ConfigError(violations=[str(e)], source=source)


def parse_config_text(text: str, *, source=None) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    violations = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            violations.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            violations.append(f"line {lineno}: empty key")
        elif key in raw:
            violations.append(f"line {lineno}: duplicate key {key}")
        else:
            raw[key] = value
    if violations:
        raise exc.ConfigError(violations=violations, source=source)
    return raw


def load_config(path: Union[str, Path], **overrides) -> SimConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    raw = parse_config_text(text, source=str(path))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = validate_config(raw, source=str(path))
    logger.debug("Loaded config %s: %s", path, cfg)
    return cfg
