"""
Propagation, contention signature signals and subnetwork mobility.

Links are frequency flat: pathloss and shadowing are shared by the M
channels of a LAP, small-scale fading is drawn per channel. Fading is block
fading, redrawn once per alarm event by the protocol engine.
"""

import functools
import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import exc
from .types import Pose, SimConfig

logger = logging.getLogger(__name__)

MAX_GRID_NODES = 2500
MIN_DISTANCE_M = 1.0
MAX_DIRECTION_RETRIES = 32


def pathloss_db(d, f, alpha: float, beta: float, gamma: float):
    """
    Alpha-beta-gamma pathloss in dB.

    d in meters, f in GHz; accepts scalars or arrays.
    """
    d = np.asarray(d, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(d <= 0) or np.any(f <= 0):
        raise ValueError(f"pathloss needs d > 0 and f > 0, {d=} {f=}")
    pl = 10 * alpha * np.log10(d) + beta + 10 * gamma * np.log10(f)
    if pl.ndim == 0:
        return float(pl)
    return pl


def complex_normal(rng: np.random.Generator, size) -> np.ndarray:
    """CN(0, 1) samples: unit second moment."""
    re = rng.standard_normal(size)
    im = rng.standard_normal(size)
    return (re + 1j * im) / math.sqrt(2.0)


def channel_gain(pl_db, shadow_db, fading):
    """h = fading * 10^(-(PL + S) / 10)."""
    return fading * 10.0 ** (-(np.asarray(pl_db) + shadow_db) / 10.0)


@functools.lru_cache(maxsize=8)
def _exponential_cholesky(nx: int, ny: int, step: float, d_corr: float):
    xs = np.arange(nx) * step
    ys = np.arange(ny) * step
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    diff = nodes[:, None, :] - nodes[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    cov = np.exp(-dist / d_corr)
    cov[np.diag_indices_from(cov)] += 1e-10
    factor = np.linalg.cholesky(cov)
    factor.flags.writeable = False
    return factor


class ShadowingField:
    """
    Unit-variance Gaussian random field over the deployment area.

    Grid nodes have correlation exp(-d / d_corr); values between nodes are
    bilinearly interpolated.
    """

    def __init__(
        self,
        area: Tuple[float, float],
        d_corr: float,
        rng: np.random.Generator,
        step: float = 1.0,
    ):
        if d_corr <= 0:
            raise ValueError(f"d_corr must be > 0, {d_corr=}")
        width, height = area
        # coarsen the grid until the covariance matrix stays tractable
        while (int(width / step) + 1) * (int(height / step) + 1) > (
            MAX_GRID_NODES
        ):
            step *= 1.5
        self.area = (float(width), float(height))
        self.step = step
        self.d_corr = d_corr
        self.nx = int(math.ceil(width / step)) + 1
        self.ny = int(math.ceil(height / step)) + 1
        factor = _exponential_cholesky(self.nx, self.ny, step, d_corr)
        z = rng.standard_normal(self.nx * self.ny)
        self.grid = (factor @ z).reshape(self.nx, self.ny)

    def value(self, x: float, y: float) -> float:
        fx = min(max(x, 0.0), self.area[0]) / self.step
        fy = min(max(y, 0.0), self.area[1]) / self.step
        i = min(int(fx), self.nx - 2)
        j = min(int(fy), self.ny - 2)
        tx = fx - i
        ty = fy - j
        g = self.grid
        return float(
            g[i, j] * (1 - tx) * (1 - ty)
            + g[i + 1, j] * tx * (1 - ty)  # NOQA: W503
            + g[i, j + 1] * (1 - tx) * ty  # NOQA: W503
            + g[i + 1, j + 1] * tx * ty  # NOQA: W503
        )


def shadowing_at(
    pose_a: Pose,
    pose_b: Pose,
    field: Optional[ShadowingField],
    sigma_s: float,
    d_corr: float,
) -> float:
    """
    Shadowing (dB) of the link between two endpoints.

    Sum of the field at both ends, rescaled so the link value keeps variance
    sigma_s^2 whatever the endpoint correlation.
    """
    if sigma_s < 0 or d_corr <= 0:
        raise ValueError(f"need sigma_s >= 0 and d_corr > 0, {sigma_s=}")
    if sigma_s == 0 or field is None:
        return 0.0
    rho = math.exp(-pose_a.distance_to(pose_b) / d_corr)
    total = field.value(pose_a.x, pose_a.y) + field.value(pose_b.x, pose_b.y)
    return sigma_s * total / math.sqrt(2.0 * (1.0 + rho))


def _check_dim(name: str, vector: np.ndarray, M: int):
    if vector.shape != (M,):
        msg = f"{name} must have shape ({M},), {vector.shape} found"
        raise exc.ContractViolation(msg)


def aggregate_pilot(
    active: Iterable[int],
    gains: Mapping[int, np.ndarray],
    pilots: Optional[Mapping[int, np.ndarray]],
    snr_linear: float,
    noise: np.ndarray,
) -> np.ndarray:
    """
    Signal the CAP receives from every LAP piloting in one slot.

    ``pilots=None`` uses the all-ones pilot for every LAP.
    """
    noise = np.asarray(noise, dtype=complex)
    M = noise.shape[0]
    y = noise.copy()
    amplitude = math.sqrt(snr_linear)
    for lap in sorted(active):
        h = np.asarray(gains[lap], dtype=complex)
        _check_dim(f"gain of LAP {lap}", h, M)
        x = np.ones(M) if pilots is None else np.asarray(pilots[lap])
        _check_dim(f"pilot of LAP {lap}", x, M)
        y += amplitude * h * x
    return y


def broadcast_cs(
    y: np.ndarray,
    gain_n: np.ndarray,
    snr_linear: float,
    noise: np.ndarray,
) -> np.ndarray:
    """Contention signature as observed by one LAP."""
    y = np.asarray(y, dtype=complex)
    M = y.shape[0]
    _check_dim("gain", np.asarray(gain_n), M)
    _check_dim("noise", np.asarray(noise), M)
    return math.sqrt(snr_linear) * np.asarray(gain_n) * y + noise


def _invalid(i, proposal, positions, area, min_sep):
    x, y = proposal
    if not (0.0 <= x <= area[0] and 0.0 <= y <= area[1]):
        return True
    if len(positions) < 2 or min_sep <= 0:
        return False
    others = np.delete(positions, i, axis=0)
    old = np.hypot(*(others - positions[i]).T)
    new = np.hypot(*(others - proposal).T)
    # moving apart is always allowed, even when already too close
    return bool(np.any((new < min_sep) & (new < old)))


def _all_valid(proposals, positions, area, min_sep):
    inside = (
        (proposals[:, 0] >= 0.0)
        & (proposals[:, 0] <= area[0])  # NOQA: W503
        & (proposals[:, 1] >= 0.0)  # NOQA: W503
        & (proposals[:, 1] <= area[1])  # NOQA: W503
    )
    if not inside.all():
        return False
    if len(proposals) < 2 or min_sep <= 0:
        return True
    new = np.hypot(*(proposals[:, None, :] - proposals[None, :, :]).T)
    old = np.hypot(*(positions[:, None, :] - positions[None, :, :]).T)
    np.fill_diagonal(new, np.inf)
    return not np.any((new < min_sep) & (new < old))


def mobility_arrays(
    positions: np.ndarray,
    directions: np.ndarray,
    speeds: np.ndarray,
    dt: float,
    area: Tuple[float, float],
    min_sep: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """
    Array form of ``mobility_step``.

    Returns new positions, new directions and the units that stalled.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, {dt=}")
    positions = positions.copy()
    directions = directions.copy()
    steps = (speeds * dt)[:, None] * np.column_stack(
        [np.cos(directions), np.sin(directions)]
    )
    proposals = positions + steps
    if _all_valid(proposals, positions, area, min_sep):
        return proposals, directions, []
    stalled = []
    for i in range(len(positions)):
        if speeds[i] == 0:
            continue
        proposal = positions[i] + steps[i]
        retries = 0
        while _invalid(i, proposal, positions, area, min_sep):
            if retries == MAX_DIRECTION_RETRIES:
                proposal = None
                break
            directions[i] = rng.uniform(0.0, 2 * math.pi)
            step = speeds[i] * dt
            proposal = positions[i] + step * np.array(
                [math.cos(directions[i]), math.sin(directions[i])]
            )
            retries += 1
        if proposal is None:
            stalled.append(i)
            continue
        positions[i] = proposal
    if stalled:
        logger.warning("Mobility stalled for units %s this step", stalled)
    return positions, directions, stalled


def mobility_step(
    poses: Sequence[Pose],
    dt: float,
    area: Tuple[float, float],
    min_sep: float,
    rng: np.random.Generator,
) -> List[Pose]:
    positions = np.array([p.position for p in poses], dtype=float)
    directions = np.array([p.direction for p in poses], dtype=float)
    speeds = np.array([p.speed for p in poses], dtype=float)
    positions, directions, _ = mobility_arrays(
        positions, directions, speeds, dt, area, min_sep, rng
    )
    return [
        Pose(x=x, y=y, direction=d, speed=p.speed)
        for (x, y), d, p in zip(positions, directions, poses)
    ]


def place_snapshot(
    K: int,
    area: Tuple[float, float],
    min_sep: float,
    rng: np.random.Generator,
    speed: float = 0.0,
    max_tries: int = 10_000,
) -> List[Pose]:
    """Uniform placement with rejection of units closer than ``min_sep``."""
    width, height = area
    if K * math.pi * min_sep**2 >= 4 * width * height:
        msg = f"{K} units with {min_sep=} cannot fit in {area=}"
        raise exc.PlacementError(msg)
    placed = np.empty((0, 2))
    for k in range(K):
        for _ in range(max_tries):
            candidate = rng.uniform((0.0, 0.0), (width, height))
            if len(placed) == 0:
                break
            dist = np.hypot(*(placed - candidate).T)
            if dist.min() >= min_sep:
                break
        else:
            msg = f"placement of unit {k} failed after {max_tries} tries"
            raise exc.PlacementError(msg)
        placed = np.vstack([placed, candidate])
    directions = rng.uniform(0.0, 2 * math.pi, size=K)
    return [
        Pose(x=x, y=y, direction=d, speed=speed)
        for (x, y), d in zip(placed, directions)
    ]


class Environment:
    """
    Radio environment of one run: poses, shadowing field and noise.

    The CAP sits at the centre of the area.
    """

    def __init__(self, cfg: SimConfig, streams):
        self.cfg = cfg
        self.M = cfg.M
        width, height = cfg.area
        self.cap = Pose(x=width / 2, y=height / 2, direction=0.0, speed=0.0)
        poses = place_snapshot(
            cfg.K, cfg.area, cfg.min_sep, streams.placement, speed=cfg.v
        )
        self.positions = np.array([p.position for p in poses])
        self.directions = np.array([p.direction for p in poses])
        self.speeds = np.full(cfg.K, cfg.v, dtype=float)
        self.field = None
        if cfg.sigma_s > 0:
            self.field = ShadowingField(
                cfg.area, cfg.d_corr, streams.shadowing
            )
        self.snr_linear = 10.0 ** (cfg.snr_db / 10.0)
        self._mobility_rng = streams.mobility
        self._fading_rng = streams.fading
        self._noise_rng = streams.noise

    @property
    def poses(self) -> List[Pose]:
        return [
            Pose(x=x, y=y, direction=d, speed=s)
            for (x, y), d, s in zip(
                self.positions, self.directions, self.speeds
            )
        ]

    def step(self):
        if not self.cfg.mobility or self.cfg.v == 0:
            return
        self.positions, self.directions, _ = mobility_arrays(
            self.positions,
            self.directions,
            self.speeds,
            self.cfg.dt,
            self.cfg.area,
            self.cfg.min_sep,
            self._mobility_rng,
        )

    def link_gains(self, lap: int) -> np.ndarray:
        """Draw a fresh block-fading gain vector for ``lap``."""
        cfg = self.cfg
        x, y = self.positions[lap]
        pose = Pose(x=x, y=y, direction=0.0, speed=0.0)
        d = max(pose.distance_to(self.cap), MIN_DISTANCE_M)
        pl = pathloss_db(d, cfg.fc_ghz, cfg.alpha, cfg.beta, cfg.gamma)
        shadow = shadowing_at(
            pose, self.cap, self.field, cfg.sigma_s, cfg.d_corr
        )
        zeta = complex_normal(self._fading_rng, self.M)
        return channel_gain(pl, shadow, zeta)

    def contention_signatures(
        self, gains: Mapping[int, np.ndarray]
    ) -> Dict[int, np.ndarray]:
        """
        Pilot aggregation at the CAP and CS reception at every pilot sender.
        """
        if not gains:
            return {}
        noise = complex_normal(self._noise_rng, self.M)
        y = aggregate_pilot(gains.keys(), gains, None, self.snr_linear, noise)
        signatures = {}
        for lap in sorted(gains):
            noise_n = complex_normal(self._noise_rng, self.M)
            signatures[lap] = broadcast_cs(
                y, gains[lap], self.snr_linear, noise_n
            )
        return signatures
