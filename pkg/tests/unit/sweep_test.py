import json
import math

import numpy as np
import pandas as pd
import pytest

from subnetra import exc, protocol, sweep
from subnetra.types import Policy

SWEEP_TEXT = """\
sweep_key = K
sweep_values = 10, 20
replications = 3
policies = dnn, mab, rch
M = 3
horizon = 30
"""


def _sweep_file(tmp_path, text=SWEEP_TEXT, name="sweep.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def spec(tmp_path):
    yield sweep.load_sweep(_sweep_file(tmp_path))


def test_load_sweep(spec):
    assert spec.sweep_key == "K"
    assert spec.sweep_values == (10.0, 20.0)
    assert spec.replications == 3
    assert spec.policies == (Policy.DNN, Policy.MAB, Policy.RCH)
    assert spec.base.horizon == 30
    assert spec.n_points == 18


def test_policies_default_to_the_three_compared_methods(tmp_path):
    text = "sweep_key = p_act\nsweep_values = 0.2\n"
    spec = sweep.load_sweep(_sweep_file(tmp_path, text))
    assert spec.policies == sweep.DEFAULT_POLICIES
    assert spec.replications == 1


def test_points_cover_every_combination(spec):
    points = list(spec.points())
    assert len(points) == spec.n_points
    assert [p.index for p in points] == list(range(18))
    combos = {(p.value, p.policy, p.replication) for p in points}
    assert len(combos) == 18
    for point in points:
        assert point.cfg.K == point.value
        assert point.cfg.policy is point.policy
        assert point.cfg.M == 3


def test_points_get_distinct_reproducible_seeds(spec):
    seeds = [p.cfg.seed for p in spec.points()]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [p.cfg.seed for p in spec.points()]


def test_overrides_change_the_base_config(tmp_path):
    spec = sweep.load_sweep(_sweep_file(tmp_path), seed=9, horizon=None)
    assert spec.base.seed == 9
    assert spec.base.horizon == 30


bad_sweeps = [
    "sweep_key = D\nsweep_values = 10\n",
    "sweep_key = K\nsweep_values = 2.5\n",
    "sweep_key = p_act\nsweep_values = 0.5, 1.5\n",
    "sweep_key = K\nsweep_values =\n",
    "sweep_key = K\nsweep_values = 2\npolicies = aloha\n",
    "sweep_key = K\nsweep_values = 2\nreplications = 0\n",
    "sweep_values = 2\n",
]


@pytest.mark.parametrize("text", bad_sweeps)
def test_when_sweep_invalid_then_raises_config_error(tmp_path, text):
    with pytest.raises(exc.ConfigError):
        sweep.load_sweep(_sweep_file(tmp_path, text))


def _raw(n, p_timely, value="10", method="rch"):
    return pd.DataFrame(
        {
            "sweep_key": "K",
            "value": value,
            "method": method,
            "P_timely": p_timely[:n],
            "mean_delay": 3.0,
            "collision_rate": 0.5,
        }
    )


def test_aggregate_mean_and_confidence_interval():
    (row,) = sweep.aggregate(_raw(3, [0.8, 0.9, 1.0])).to_dict("records")
    assert row["schema"] == 1
    assert row["n"] == 3
    assert row["P_timely_mean"] == pytest.approx(0.9)
    expected = 1.96 * np.std([0.8, 0.9, 1.0], ddof=1) / np.sqrt(3)
    assert row["P_timely_ci95"] == pytest.approx(expected)
    assert row["mean_delay_mean"] == 3.0


def test_single_replication_has_zero_width_interval():
    (row,) = sweep.aggregate(_raw(1, [0.7])).to_dict("records")
    assert row["P_timely_ci95"] == 0.0


def test_aggregate_skips_undefined_values():
    table = sweep.aggregate(_raw(3, [math.nan, 0.5, 0.7]))
    (row,) = table.to_dict("records")
    assert row["P_timely_mean"] == pytest.approx(0.6)
    assert row["n"] == 3


def test_aggregate_groups_by_value_and_method():
    raw = pd.concat(
        [
            _raw(2, [0.1, 0.2]),
            _raw(2, [0.3, 0.4], value="20"),
            _raw(1, [0.5], method="dnn"),
        ],
        ignore_index=True,
    )
    table = sweep.aggregate(raw)
    keys = list(zip(table["value"], table["method"]))
    assert keys == [("10", "rch"), ("20", "rch"), ("10", "dnn")]
    assert tuple(table.columns) == sweep.AGGREGATED_FIELDS


def test_aggregate_of_nothing_is_an_empty_table():
    table = sweep.aggregate(pd.DataFrame(columns=sweep.RAW_FIELDS))
    assert table.empty
    assert tuple(table.columns) == sweep.AGGREGATED_FIELDS


def test_run_sweep_writes_raw_and_aggregated_tables(spec, tmp_path):
    out = tmp_path / "out"
    result = sweep.run_sweep(spec, out)
    assert len(result.raw) == 18
    assert len(result.aggregated) == 6
    assert (result.aggregated["n"] == 3).all()
    raw = sweep.read_csv(out / "raw.csv")
    pd.testing.assert_frame_equal(raw, result.raw)
    assert tuple(raw.columns) == sweep.RAW_FIELDS
    assert len(list((out / "points").iterdir())) == 18
    assert not (out / "errors.json").exists()


def test_raw_table_is_merged_from_the_point_files(tmp_path):
    text = SWEEP_TEXT.replace("dnn, mab, rch", "rch").replace("10, 20", "3")
    spec = sweep.load_sweep(_sweep_file(tmp_path, text))
    out = tmp_path / "out"
    sweep.run_sweep(spec, out)
    first = out / "points" / "point-00000.csv"
    edited = sweep.read_csv(first)
    edited["P_timely"] = 0.125
    sweep.write_csv(edited, first)
    merged = sweep.merge_points(out / "points", range(spec.n_points))
    assert merged.loc[0, "P_timely"] == 0.125
    assert list(merged["replication"]) == [0, 1, 2]


def test_aggregating_the_raw_file_is_idempotent(tmp_path):
    text = SWEEP_TEXT.replace("dnn, mab, rch", "rch").replace("10, 20", "3")
    spec = sweep.load_sweep(_sweep_file(tmp_path, text))
    result = sweep.run_sweep(spec, tmp_path / "out")
    again = sweep.aggregate_csv(tmp_path / "out" / "raw.csv")
    pd.testing.assert_frame_equal(again, result.aggregated)
    sweep.write_csv(again, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == (
        tmp_path / "out" / "aggregated.csv"
    ).read_text()


def test_worker_processes_give_the_same_rows(tmp_path):
    text = SWEEP_TEXT.replace("dnn, mab, rch", "mab, rch")
    spec = sweep.load_sweep(_sweep_file(tmp_path, text))
    inline = sweep.run_sweep(spec, tmp_path / "inline")
    pooled = sweep.run_sweep(spec, tmp_path / "pooled", workers=2)
    pd.testing.assert_frame_equal(pooled.raw, inline.raw)


def test_failed_point_stops_the_sweep_and_keeps_finished_rows(
    tmp_path, monkeypatch
):
    text = "sweep_key = K\nsweep_values = 2, 3\npolicies = rch\nhorizon = 40\n"
    spec = sweep.load_sweep(_sweep_file(tmp_path, text))

    def engine_run(cfg):
        if cfg.K == 3:
            raise RuntimeError("boom")
        return protocol.engine_run(cfg)

    monkeypatch.setattr(sweep, "engine_run", engine_run)
    out = tmp_path / "out"
    with pytest.raises(exc.SweepError) as e:
        sweep.run_sweep(spec, out)
    assert "boom" in str(e.value)
    assert len(sweep.read_csv(out / "raw.csv")) == 1
    manifest = json.loads((out / "errors.json").read_text())
    assert manifest["completed"] == 1
    assert manifest["total"] == 2
    (failure,) = manifest["failures"]
    assert failure["point"] == 1
    assert "K=3" in failure["label"]
