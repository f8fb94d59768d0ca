"""Cross-checks of the simulator against the closed-form analysis."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import pydantic

from . import analytics, exc, protocol
from .utils import rng_stream

logger = logging.getLogger(__name__)

QUEUE_GRID = ((0.1, 0.4), (0.1, 0.6), (0.2, 0.4), (0.2, 0.6))


class CheckResult(pydantic.BaseModel):
    name: str
    passed: bool
    expected: Optional[float] = None
    observed: Optional[float] = None
    tolerance: Optional[float] = None
    detail: str = ""

    @property
    def delta(self) -> Optional[float]:
        if self.expected is None or self.observed is None:
            return None
        return abs(self.observed - self.expected)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{status} {self.name}"]
        if self.expected is not None:
            parts.append(f"expected={self.expected:.6g}")
        if self.observed is not None:
            parts.append(f"observed={self.observed:.6g}")
        if self.delta is not None:
            parts.append(f"delta={self.delta:.3g}")
        if self.tolerance is not None:
            parts.append(f"tol={self.tolerance:.3g}")
        if self.detail:
            parts.append(self.detail)
        return " ".join(parts)

    class Config:
        extra = "forbid"
        frozen = True


def _compare(name, expected, observed, tolerance, detail="") -> CheckResult:
    return CheckResult(
        name=name,
        passed=abs(observed - expected) <= tolerance,
        expected=expected,
        observed=observed,
        tolerance=tolerance,
        detail=detail,
    )


def _guarded(name: str, check: Callable[[], List[CheckResult]]):
    try:
        return check()
    except exc.EnumerationInfeasible as e:
        return [CheckResult(name=name, passed=False, detail=str(e))]


def check_success_prob(
    psi, p_act: float, slots: int, rng, tolerance: float = 0.01, name=None
) -> CheckResult:
    """Slot success frequency of the collision simulator vs the formula."""
    psi = analytics.as_psi(psi)
    name = name or f"success_prob K={psi.K} M={psi.M} p_act={p_act}"
    expected = analytics.success_prob(psi, p_act)
    estimate = protocol.collision_oracle(psi.rows, p_act, slots, rng)
    return _compare(
        name,
        expected,
        estimate.network,
        tolerance,
        f"stderr={estimate.network_stderr:.2g}",
    )


def random_instances(
    n: int, rng, max_K: int = 4, max_M: int = 3
) -> List[Tuple[analytics.PsiMatrix, float]]:
    instances = []
    for _ in range(n):
        K = int(rng.integers(1, max_K + 1))
        M = int(rng.integers(1, max_M + 1))
        p_act = float(rng.uniform(0.1, 1.0))
        instances.append((analytics.random_psi(K, M, rng), p_act))
    return instances


def check_queue(
    p_arr: float,
    lambda_succ: float,
    D: int,
    n_updates: int,
    rng,
    tolerance: float = 0.02,
    occupancy_tolerance: float = 0.01,
) -> List[CheckResult]:
    label = f"p_arr={p_arr} lambda={lambda_succ}"
    state = analytics.queue_steady_state(p_arr, lambda_succ)
    sim = analytics.simulate_queue(p_arr, lambda_succ, D, n_updates, rng)
    occupancy = sim.occupancy + (0.0, 0.0)
    return [
        _compare(
            f"deadline_violation {label} D={D}",
            analytics.deadline_violation(p_arr, lambda_succ, D),
            sim.p_deadline,
            tolerance,
        ),
        _compare(f"Q0 {label}", state.q0, occupancy[0], occupancy_tolerance),
        _compare(f"Q1 {label}", state.q1, occupancy[1], occupancy_tolerance),
    ]


def check_brute_force(
    K: int, M: int, p_act: float, draws: int, rng, tolerance: float = 0.01
) -> List[CheckResult]:
    name = f"brute_force K={K} M={M} p_act={p_act}"

    def check():
        result = analytics.brute_force_optimal_psi(K, M, p_act)
        estimate = analytics.monte_carlo_success(
            result.psi, p_act, draws, rng
        )
        return [
            _compare(
                name,
                result.lambda_star,
                estimate.mean,
                tolerance,
                f"candidates={result.candidates}",
            )
        ]

    return _guarded(name, check)


def run_all(
    seed: int = 0,
    instances: int = 20,
    slots: int = 1_000_000,
    queue_updates: int = 1_000_000,
    D: int = 20,
    brute: Sequence[Tuple[int, int, float]] = ((2, 2, 1.0), (3, 2, 1.0)),
) -> List[CheckResult]:
    """The default battery: random success instances, queue grid and brute
    force searches."""
    rng = rng_stream(seed, "oracle")
    results = []
    for psi, p_act in random_instances(instances, rng):
        results.append(check_success_prob(psi, p_act, slots, rng))
    for p_arr, lambda_succ in QUEUE_GRID:
        results += check_queue(p_arr, lambda_succ, D, queue_updates, rng)
    for K, M, p_act in brute:
        results += check_brute_force(K, M, p_act, slots, rng)
    failed = sum(not r.passed for r in results)
    logger.info("Oracle: %s checks, %s failed", len(results), failed)
    return results


def check_psi_file(
    psi: analytics.PsiMatrix, p_act: float, slots: int, seed: int = 0
) -> List[CheckResult]:
    name = f"success_prob K={psi.K} M={psi.M} p_act={p_act}"
    rng = rng_stream(seed, "oracle")
    return _guarded(
        name, lambda: [check_success_prob(psi, p_act, slots, rng, name=name)]
    )
