"""Parameter sweeps: replicated runs over one swept key and all policies."""

import concurrent.futures
import json
import logging
import math
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Set, Tuple, Union

import pandas as pd
import pydantic

from . import exc
from .protocol import METRICS_FIELDS, engine_run, format_value
from .types import Policy, SimConfig, parse_config_text, validate_config
from .utils import derive_seed

logger = logging.getLogger(__name__)

SWEEPABLE = ("K", "M", "p_act")
SWEEP_KEYS = ("sweep_key", "sweep_values", "replications", "policies")
DEFAULT_POLICIES = (Policy.DNN, Policy.MAB, Policy.RCH)
RAW_FIELDS = METRICS_FIELDS + ("sweep_key", "value", "replication")
GROUP_KEYS = ("sweep_key", "value", "method")
AGGREGATED_SCHEMA = 1
AGGREGATED_FIELDS = (
    "schema",
    "sweep_key",
    "value",
    "method",
    "n",
    "P_timely_mean",
    "P_timely_ci95",
    "mean_delay_mean",
    "collision_rate_mean",
)
Z_95 = 1.96


def _split(v):
    if isinstance(v, str):
        return tuple(p.strip() for p in v.split(",") if p.strip())
    return tuple(v)


class SweepPoint(NamedTuple):
    index: int
    value: Union[int, float]
    policy: Policy
    replication: int
    cfg: SimConfig


class SweepSpec(pydantic.BaseModel):
    base: SimConfig
    sweep_key: str
    sweep_values: Tuple[float, ...]
    replications: pydantic.conint(ge=1) = 1
    policies: Tuple[Policy, ...] = DEFAULT_POLICIES

    @pydantic.validator("sweep_key")
    def key_must_be_sweepable(cls, v):
        if v not in SWEEPABLE:
            raise ValueError(f"sweep_key ∉ {SWEEPABLE}")
        return v

    @pydantic.validator("sweep_values", "policies", pre=True)
    def split_lists(cls, v, field):
        items = _split(v)
        if field.name == "policies":
            items = tuple(
                p.lower() if isinstance(p, str) else p for p in items
            )
        return items

    @pydantic.validator("sweep_values", "policies")
    def must_not_be_empty(cls, v, field):
        if len(v) == 0:
            raise ValueError(f"{field.name} must not be empty")
        return v

    @pydantic.root_validator(skip_on_failure=True)
    def values_must_be_valid(cls, values):
        key = values["sweep_key"]
        for value in values["sweep_values"]:
            if key != "p_act" and value != int(value):
                raise ValueError(f"{key} value {value} is not an integer")
            try:
                values["base"].replace(**{key: _typed(key, value)})
            except exc.ConfigError as e:
                raise ValueError(f"{key}={value}: {e.violations}")
        return values

    def points(self) -> Iterator[SweepPoint]:
        index = 0
        for value in self.sweep_values:
            value = _typed(self.sweep_key, value)
            for policy in self.policies:
                for r in range(self.replications):
                    seed = derive_seed(self.base.seed, r, value, policy.value)
                    cfg = self.base.replace(
                        **{self.sweep_key: value},
                        policy=policy,
                        seed=seed,
                    )
                    yield SweepPoint(index, value, policy, r, cfg)
                    index += 1

    @property
    def n_points(self) -> int:
        return len(self.sweep_values) * len(self.policies) * self.replications

    class Config:
        extra = "forbid"
        frozen = True


def _typed(key: str, value):
    return float(value) if key == "p_act" else int(value)


def load_sweep(path: Union[str, Path], **overrides) -> SweepSpec:
    """
    Sweep file: SimConfig keys plus ``sweep_key``, ``sweep_values``,
    ``replications`` and ``policies``.
    """
    path = Path(path)
    raw = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    sweep = {k: raw.pop(k) for k in SWEEP_KEYS if k in raw}
    base = validate_config(raw, source=str(path))
    try:
        return SweepSpec(base=base, **sweep)
    except pydantic.ValidationError as e:
        violations = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
            for err in e.errors()
        ]
        raise exc.ConfigError(violations=violations, source=str(path))


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Raw or aggregated table; grouping columns are kept as written."""
    return pd.read_csv(
        path,
        dtype={k: str for k in GROUP_KEYS},
        float_precision="round_trip",
    )


def write_csv(table: pd.DataFrame, path: Union[str, Path, IO[str]]):
    table.to_csv(path, index=False, lineterminator="\n")


def _point_path(points_dir: Path, index: int) -> Path:
    return points_dir / f"point-{index:05d}.csv"


def run_point(point: SweepPoint, sweep_key: str, points_dir: Path) -> Path:
    """Run one point and write its raw row to ``points_dir``."""
    metrics = engine_run(point.cfg)
    row = metrics.csv_row(point.cfg)
    row.update(
        sweep_key=sweep_key,
        value=format_value(point.value),
        replication=str(point.replication),
    )
    path = _point_path(points_dir, point.index)
    write_csv(pd.DataFrame([row], columns=RAW_FIELDS), path)
    return path


def merge_points(points_dir: Path, indices: Iterable[int]) -> pd.DataFrame:
    """Concatenate the per-point files of ``indices``, in index order."""
    frames = [read_csv(_point_path(points_dir, i)) for i in sorted(indices)]
    if not frames:
        return pd.DataFrame(columns=RAW_FIELDS)
    return pd.concat(frames, ignore_index=True)


def _ci95(values: pd.Series) -> float:
    values = values.dropna()
    if len(values) < 2:
        return 0.0
    return Z_95 * float(values.std(ddof=1)) / math.sqrt(len(values))


def aggregate(raw: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and normal-approximation 95% CI of P_timely per (value, method).

    Undefined (NaN) metrics are left out of the means but still count in
    ``n``. Groups keep the order in which they first appear in ``raw``.
    """
    if raw.empty:
        return pd.DataFrame(columns=AGGREGATED_FIELDS)
    table = (
        raw.groupby(list(GROUP_KEYS), sort=False)
        .agg(
            n=("P_timely", "size"),
            P_timely_mean=("P_timely", "mean"),
            P_timely_ci95=("P_timely", _ci95),
            mean_delay_mean=("mean_delay", "mean"),
            collision_rate_mean=("collision_rate", "mean"),
        )
        .reset_index()
    )
    table.insert(0, "schema", AGGREGATED_SCHEMA)
    return table[list(AGGREGATED_FIELDS)]


def aggregate_csv(raw_path: Union[str, Path]) -> pd.DataFrame:
    return aggregate(read_csv(raw_path))


class SweepResult(pydantic.BaseModel):
    raw: pd.DataFrame
    aggregated: pd.DataFrame
    out_dir: Path

    class Config:
        arbitrary_types_allowed = True
        extra = "forbid"
        frozen = True


def _point_label(point: SweepPoint, key: str) -> str:
    return (
        f"{key}={point.value} policy={point.policy.value} "
        f"replication={point.replication}"
    )


def run_sweep(
    spec: SweepSpec, out_dir: Union[str, Path], workers: int = 1
) -> SweepResult:
    """
    Run every point, then merge the per-point files into ``raw.csv`` and
    ``aggregated.csv``.

    On a failed point the remaining points are cancelled, the finished ones
    are still merged and ``errors.json`` lists the failures.
    """
    out_dir = Path(out_dir)
    points_dir = out_dir / "points"
    points_dir.mkdir(parents=True, exist_ok=True)
    points = list(spec.points())
    logger.info(
        "Sweep %s over %s: %s points, %s worker(s)",
        spec.sweep_key,
        list(spec.sweep_values),
        len(points),
        workers,
    )
    done: Set[int] = set()
    failures = []

    def failed(point, error):
        logger.error("Point %s failed: %s", point.index, error)
        failures.append(
            {
                "point": point.index,
                "label": _point_label(point, spec.sweep_key),
                "error": repr(error),
            }
        )

    if workers <= 1:
        for point in points:
            try:
                run_point(point, spec.sweep_key, points_dir)
            except Exception as e:
                failed(point, e)
                break
            done.add(point.index)
            logger.info("Point %s/%s done", len(done), len(points))
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as executor:
            futures = {
                executor.submit(run_point, p, spec.sweep_key, points_dir): p
                for p in points
            }
            for future in concurrent.futures.as_completed(futures):
                point = futures[future]
                try:
                    future.result()
                except concurrent.futures.CancelledError:
                    continue
                except Exception as e:
                    failed(point, e)
                    for other in futures:
                        other.cancel()
                    continue
                done.add(point.index)
                logger.info("Point %s/%s done", len(done), len(points))

    raw = merge_points(points_dir, done)
    write_csv(raw, out_dir / "raw.csv")
    aggregated = aggregate(raw)
    write_csv(aggregated, out_dir / "aggregated.csv")
    if failures:
        manifest = out_dir / "errors.json"
        manifest.write_text(
            json.dumps(
                {
                    "completed": len(raw),
                    "total": len(points),
                    "failures": failures,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
        raise exc.SweepError(failures=failures, manifest=str(manifest))
    return SweepResult(raw=raw, aggregated=aggregated, out_dir=out_dir)
