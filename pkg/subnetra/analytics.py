"""
Closed-form collision-channel and queueing analysis.

Used as the oracle for the simulator: success probability of a set of
per-LAP access distributions, the steady state of a LAP queue, the delay
distribution of an update and the deadline violation probability.
"""

import csv
import functools
import itertools
import logging
import math
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic

from . import exc
from .types import all_configs

logger = logging.getLogger(__name__)

MAX_DP_LAPS = 6
MAX_DP_CHANNELS = 4
MAX_NAIVE_LAPS = 3
MAX_BRUTE_LAPS = 3
MAX_BRUTE_CHANNELS = 2
ROW_SUM_TOL = 1e-9


class PsiMatrix(pydantic.BaseModel):
    """Row n is the distribution of LAP n over the 2^M configurations."""

    rows: np.ndarray

    def __init__(self, *args, **kwargs):
        if len(args) == 1 and len(kwargs) == 0:
            super().__init__(rows=args[0])
        else:
            super().__init__(*args, **kwargs)

    @pydantic.validator("rows", pre=True)
    def as_float_array(cls, v):
        v = np.array(v, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"psi must be a non-empty matrix, {v.shape=}")
        M = int(round(math.log2(v.shape[1]))) if v.shape[1] > 1 else 0
        if M < 1 or 2**M != v.shape[1]:
            raise ValueError(f"psi needs 2^M columns, {v.shape[1]} found")
        if (v < 0).any() or (v > 1).any():
            raise ValueError("psi entries must be in [0,1]")
        sums = v.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ValueError(f"psi rows {bad.tolist()} do not sum to 1")
        v.flags.writeable = False
        return v

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def M(self) -> int:
        return int(round(math.log2(self.rows.shape[1])))

    @classmethod
    def deterministic(cls, indices: Sequence[int], M: int) -> "PsiMatrix":
        rows = np.zeros((len(indices), 2**M))
        rows[np.arange(len(indices)), list(indices)] = 1.0
        return cls(rows)

    @classmethod
    def uniform(cls, K: int, M: int) -> "PsiMatrix":
        return cls(np.full((K, 2**M), 1.0 / 2**M))

    @classmethod
    def rch(cls, K: int, M: int) -> "PsiMatrix":
        """Random channel hopping: one channel, chosen uniformly."""
        rows = np.zeros((K, 2**M))
        rows[:, [1 << m for m in range(M)]] = 1.0 / M
        return cls(rows)

    class Config:
        arbitrary_types_allowed = True
        extra = "forbid"
        frozen = True


def as_psi(psi) -> PsiMatrix:
    return psi if isinstance(psi, PsiMatrix) else PsiMatrix(psi)


def _check_shape(psi: PsiMatrix, K: Optional[int], M: Optional[int]):
    if K is not None and K != psi.K:
        raise exc.ContractViolation(f"psi has {psi.K} rows, {K=}")
    if M is not None and M != psi.M:
        raise exc.ContractViolation(f"psi has 2^{psi.M} columns, {M=}")


def _check_unit(name: str, p: float):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} ∉ [0,1]")


def effective_rows(psi: PsiMatrix, p_act: float) -> np.ndarray:
    """Per-LAP configuration distribution including inactivity."""
    phi = p_act * psi.rows
    phi[:, 0] += 1.0 - p_act
    return phi


@functools.lru_cache(maxsize=None)
def _count_transitions(M: int) -> np.ndarray:
    """
    Per-channel transmitter counts capped at 2, encoded base 3.

    Entry [c, s] is the state reached from state s when one more LAP
    transmits with configuration c.
    """
    configs = all_configs(M)
    n_states = 3**M
    digits = (np.arange(n_states)[:, None] // 3 ** np.arange(M)) % 3
    table = np.empty((2**M, n_states), dtype=np.int64)
    for c, mask in enumerate(configs):
        new = np.minimum(digits + mask, 2)
        table[c] = new @ (3 ** np.arange(M))
    table.flags.writeable = False
    return table


@functools.lru_cache(maxsize=None)
def _has_single(M: int) -> np.ndarray:
    digits = (np.arange(3**M)[:, None] // 3 ** np.arange(M)) % 3
    return (digits == 1).any(axis=1)


def success_prob(psi, p_act: float, K: int = None, M: int = None) -> float:
    """
    Probability that a slot carries at least one successful transmission.

    A slot succeeds iff some channel has exactly one transmitter. The sum
    over active sets and configuration matrices factorizes over LAPs, so
    it is computed by a dynamic program over capped channel counts.
    """
    psi = as_psi(psi)
    _check_shape(psi, K, M)
    _check_unit("p_act", p_act)
    if psi.K > MAX_DP_LAPS or psi.M > MAX_DP_CHANNELS:
        raise exc.EnumerationInfeasible(
            what="success probability",
            limits={"K": MAX_DP_LAPS, "M": MAX_DP_CHANNELS},
            given={"K": psi.K, "M": psi.M},
        )
    table = _count_transitions(psi.M)
    dist = np.zeros(table.shape[1])
    dist[0] = 1.0
    for phi in effective_rows(psi, p_act):
        dist = _mix(table, dist, phi)
    return float(dist[_has_single(psi.M)].sum())


def _mix(table: np.ndarray, dist: np.ndarray, phi: np.ndarray) -> np.ndarray:
    n_states = table.shape[1]
    new = np.zeros(n_states)
    for c in np.flatnonzero(phi):
        new += phi[c] * np.bincount(
            table[c], weights=dist, minlength=n_states
        )
    return new


def success_prob_naive(psi, p_act: float) -> float:
    """Explicit sum over active sets and configuration matrices."""
    psi = as_psi(psi)
    _check_unit("p_act", p_act)
    if psi.K > MAX_NAIVE_LAPS:
        raise exc.EnumerationInfeasible(
            what="naive success probability",
            limits={"K": MAX_NAIVE_LAPS},
            given={"K": psi.K},
        )
    K = psi.K
    configs = all_configs(psi.M)
    total = 0.0
    for size in range(1, K + 1):
        weight = p_act**size * (1 - p_act) ** (K - size)
        if weight == 0:
            continue
        for active in itertools.combinations(range(K), size):
            for choice in itertools.product(range(2**psi.M), repeat=size):
                prob = math.prod(
                    psi.rows[n, c] for n, c in zip(active, choice)
                )
                if prob == 0:
                    continue
                counts = configs[list(choice)].sum(axis=0)
                if (counts == 1).any():
                    total += weight * prob
    return total


@functools.lru_cache(maxsize=None)
def _occupancy_transitions(M: int) -> np.ndarray:
    """Entry [c, s]: set of busy channels (bitmask) after adding config c."""
    n = 2**M
    return np.bitwise_or.outer(np.arange(n), np.arange(n))


def per_lap_success_prob(psi, p_act: float) -> np.ndarray:
    """
    Per LAP, probability of a successful transmission given it is active.

    LAP n succeeds iff one of its channels carries no other transmitter.
    """
    psi = as_psi(psi)
    _check_unit("p_act", p_act)
    if psi.K > MAX_DP_LAPS or psi.M > MAX_DP_CHANNELS:
        raise exc.EnumerationInfeasible(
            what="per-LAP success probability",
            limits={"K": MAX_DP_LAPS, "M": MAX_DP_CHANNELS},
            given={"K": psi.K, "M": psi.M},
        )
    n_configs = 2**psi.M
    table = _occupancy_transitions(psi.M)
    phi = effective_rows(psi, p_act)
    codes = np.arange(n_configs)
    # free[c, busy]: configuration c has a channel outside ``busy``
    free = (codes[:, None] & ~codes[None, :]) != 0
    result = np.zeros(psi.K)
    for n in range(psi.K):
        busy = np.zeros(n_configs)
        busy[0] = 1.0
        for other in range(psi.K):
            if other != n:
                busy = _mix(table, busy, phi[other])
        result[n] = float(psi.rows[n] @ (free @ busy))
    return result


class MonteCarloEstimate(pydantic.BaseModel):
    mean: float
    stderr: float
    draws: int

    class Config:
        extra = "forbid"
        frozen = True


def monte_carlo_success(
    psi,
    p_act: float,
    draws: int,
    rng: np.random.Generator,
    chunk: int = 1 << 16,
) -> MonteCarloEstimate:
    """Sampled estimate of ``success_prob`` with its standard error."""
    psi = as_psi(psi)
    _check_unit("p_act", p_act)
    if draws < 1:
        raise ValueError(f"draws must be >= 1, {draws=}")
    configs = all_configs(psi.M)
    cdf = np.cumsum(psi.rows, axis=1)
    cdf[:, -1] = 1.0
    hits = 0
    remaining = draws
    while remaining > 0:
        n = min(chunk, remaining)
        active = rng.random((n, psi.K)) < p_act
        u = rng.random((n, psi.K))
        index = np.empty((n, psi.K), dtype=np.int64)
        for k in range(psi.K):
            index[:, k] = np.searchsorted(cdf[k], u[:, k], side="right")
        index = np.minimum(index, configs.shape[0] - 1)
        counts = (configs[index] * active[:, :, None]).sum(axis=1)
        hits += int((counts == 1).any(axis=1).sum())
        remaining -= n
    mean = hits / draws
    return MonteCarloEstimate(
        mean=mean, stderr=math.sqrt(mean * (1 - mean) / draws), draws=draws
    )


def random_psi(
    K: int, M: int, rng: np.random.Generator, concentration: float = 1.0
) -> PsiMatrix:
    """Rows drawn from a symmetric Dirichlet distribution."""
    rows = rng.dirichlet(np.full(2**M, concentration), size=K)
    # renormalize so rounding never trips the row-sum check
    rows /= rows.sum(axis=1, keepdims=True)
    return PsiMatrix(rows)


def load_psi(path: Union[str, Path]) -> PsiMatrix:
    """CSV file, one row per LAP, 2^M columns."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = [
            [float(x) for x in row]
            for row in csv.reader(f)
            if row and not row[0].lstrip().startswith("#")
        ]
    return PsiMatrix(rows)


class QueueSteadyState(pydantic.BaseModel):
    """Steady state of a LAP queue with Bernoulli arrivals and service."""

    p_arr: float
    lambda_succ: float
    rho: float
    q0: float
    q1: float

    def q(self, j: int) -> float:
        """Probability of ``j`` updates in the queue."""
        if j < 0:
            raise ValueError(f"queue length must be >= 0, {j=}")
        if j == 0:
            return self.q0
        return self.rho ** (j - 1) * self.q1

    def occupancy(self) -> Iterator[float]:
        j = 0
        while True:
            yield self.q(j)
            j += 1

    @property
    def service_rate(self) -> float:
        """Parameter of the geometric sojourn time of an update."""
        return self.lambda_succ * (1.0 - self.rho)

    class Config:
        extra = "forbid"
        frozen = True


def queue_steady_state(p_arr: float, lambda_succ: float) -> QueueSteadyState:
    _check_unit("p_arr", p_arr)
    if not 0.0 < lambda_succ <= 1.0:
        raise ValueError(f"lambda_succ ∉ (0,1], {lambda_succ=}")
    if p_arr == 0.0:
        return QueueSteadyState(
            p_arr=p_arr, lambda_succ=lambda_succ, rho=0.0, q0=1.0, q1=0.0
        )
    r = p_arr * (1.0 - lambda_succ)
    s = lambda_succ * (1.0 - p_arr)
    rho = math.inf if s == 0 else r / s
    if rho >= 1.0 - 1e-12:
        raise exc.UnstableQueue(p_arr=p_arr, lambda_succ=lambda_succ, rho=rho)
    q1 = p_arr * (1.0 - rho) / lambda_succ
    q0 = lambda_succ * (1.0 - p_arr) / p_arr * q1
    return QueueSteadyState(
        p_arr=p_arr, lambda_succ=lambda_succ, rho=rho, q0=q0, q1=q1
    )


def delay_pmf(p_arr: float, lambda_succ: float, t: int) -> float:
    """Probability that an update is delivered exactly ``t`` slots late."""
    if t < 1:
        raise ValueError(f"t must be >= 1, {t=}")
    s = queue_steady_state(p_arr, lambda_succ).service_rate
    return s * (1.0 - s) ** (t - 1)


def deadline_violation(p_arr: float, lambda_succ: float, D: int) -> float:
    if D < 1:
        raise ValueError(f"D must be >= 1, {D=}")
    s = queue_steady_state(p_arr, lambda_succ).service_rate
    return (1.0 - s) ** D


def timely_prob(p_arr: float, lambda_succ: float, D: int) -> float:
    return 1.0 - deadline_violation(p_arr, lambda_succ, D)


class QueueSimResult(pydantic.BaseModel):
    n_updates: int
    D: int
    p_deadline: float
    mean_delay: float
    delay_pmf: Tuple[float, ...]
    occupancy: Tuple[float, ...]

    class Config:
        extra = "forbid"
        frozen = True


def simulate_queue(
    p_arr: float,
    lambda_succ: float,
    D: int,
    n_updates: int,
    rng: np.random.Generator,
) -> QueueSimResult:
    """
    Single FIFO queue: Bernoulli(p_arr) arrivals, each slot the HoL update
    leaves with probability ``lambda_succ``.

    Departures follow d_k = max(a_k, d_{k-1}) + g_k with g_k geometric;
    ``occupancy[j]`` is the fraction of slots with j updates in the queue.
    """
    if not 0.0 < p_arr <= 1.0:
        raise ValueError(f"p_arr ∉ (0,1], {p_arr=}")
    if not 0.0 < lambda_succ <= 1.0:
        raise ValueError(f"lambda_succ ∉ (0,1], {lambda_succ=}")
    if n_updates < 1:
        raise ValueError(f"n_updates must be >= 1, {n_updates=}")
    arrivals = np.cumsum(rng.geometric(p_arr, size=n_updates)) - 1
    service = rng.geometric(lambda_succ, size=n_updates)
    busy_end = np.cumsum(service)
    departures = busy_end + np.maximum.accumulate(
        arrivals - (busy_end - service)
    )
    delays = departures - arrivals

    pmf = np.bincount(delays) / n_updates
    p_deadline = float((delays > D).mean())

    times = np.concatenate([arrivals, departures])
    ones = np.ones(n_updates, dtype=np.int64)
    steps = np.concatenate([ones, -ones])
    slots, inverse = np.unique(times, return_inverse=True)
    level = np.cumsum(np.bincount(inverse, weights=steps)).astype(np.int64)
    durations = np.diff(slots)
    occupancy = np.bincount(level[:-1], weights=durations)
    occupancy = occupancy / durations.sum()
    return QueueSimResult(
        n_updates=n_updates,
        D=D,
        p_deadline=p_deadline,
        mean_delay=float(delays.mean()),
        delay_pmf=tuple(float(x) for x in pmf),
        occupancy=tuple(float(x) for x in occupancy),
    )


class BruteForceResult(pydantic.BaseModel):
    psi: PsiMatrix
    lambda_star: float
    per_lap_star: float
    candidates: int

    class Config:
        arbitrary_types_allowed = True
        extra = "forbid"
        frozen = True


def _row_candidates(M: int, resolution: int) -> List[np.ndarray]:
    n = 2**M
    if resolution == 1:
        return list(np.eye(n))
    rows = []
    for cut in itertools.combinations(range(resolution + n - 1), n - 1):
        bounds = (-1,) + cut + (resolution + n - 1,)
        parts = [bounds[i + 1] - bounds[i] - 1 for i in range(n)]
        rows.append(np.array(parts, dtype=float) / resolution)
    return rows


def brute_force_optimal_psi(
    K: int, M: int, p_act: float, grid_resolution: int = 1
) -> BruteForceResult:
    """
    Exhaustive search for the access distributions maximizing the slot
    success probability (and so minimizing deadline violations).

    ``grid_resolution`` 1 searches deterministic assignments only; r > 1
    searches every row on the simplex grid with step 1/r. Ties are broken
    by the mean per-LAP success probability, then by enumeration order.
    """
    if K > MAX_BRUTE_LAPS or M > MAX_BRUTE_CHANNELS:
        raise exc.EnumerationInfeasible(
            what="brute force search",
            limits={"K": MAX_BRUTE_LAPS, "M": MAX_BRUTE_CHANNELS},
            given={"K": K, "M": M},
        )
    if K < 1 or M < 1:
        raise ValueError(f"K and M must be >= 1, {K=} {M=}")
    if grid_resolution < 1:
        raise ValueError(f"grid_resolution must be >= 1, {grid_resolution=}")
    _check_unit("p_act", p_act)
    rows = _row_candidates(M, grid_resolution)
    best_key = None
    best = None
    count = 0
    for choice in itertools.product(range(len(rows)), repeat=K):
        psi = PsiMatrix(np.stack([rows[i] for i in choice]))
        count += 1
        lam = success_prob(psi, p_act)
        per_lap = float(per_lap_success_prob(psi, p_act).mean())
        key = (round(lam, 12), round(per_lap, 12))
        if best_key is None or key > best_key:
            best_key, best = key, psi
    logger.debug(
        "Brute force K=%s M=%s searched %s candidates, best %s",
        K,
        M,
        count,
        best_key,
    )
    return BruteForceResult(
        psi=best,
        lambda_star=best_key[0],
        per_lap_star=best_key[1],
        candidates=count,
    )
