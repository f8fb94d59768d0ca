"""core type tests."""

import numpy as np
import pydantic
import pytest

from subnetra import exc
from subnetra.types import (
    AccessConfig,
    Policy,
    SimConfig,
    Update,
    all_configs,
    config_index_to_mask,
    load_config,
    mask_to_index,
    parse_config_text,
    validate_config,
)

masks = [
    (0, 2, (0, 0)),
    (3, 2, (1, 1)),
    (5, 3, (1, 0, 1)),
    (1, 1, (1,)),
    (2, 2, (0, 1)),
    (6, 3, (0, 1, 1)),
]


@pytest.mark.parametrize("index,M,expected_mask", masks)
def test_config_index_to_mask(index, M, expected_mask):
    assert config_index_to_mask(index, M).mask == expected_mask


@pytest.mark.parametrize("index,M,mask", masks)
def test_mask_to_index(index, M, mask):
    assert mask_to_index(mask) == index


@pytest.mark.parametrize("M", range(1, 9))
def test_index_mask_index_is_identity(M):
    for i in range(2**M):
        assert config_index_to_mask(i, M).index == i


@pytest.mark.parametrize("M", range(1, 9))
def test_exactly_one_all_zero_configuration(M):
    configs = all_configs(M)
    assert configs.shape == (2**M, M)
    zero_rows = np.flatnonzero(configs.sum(axis=1) == 0)
    assert zero_rows.tolist() == [0]


def test_all_configs_rows_match_index_to_mask():
    configs = all_configs(3)
    for i, row in enumerate(configs):
        assert tuple(row) == config_index_to_mask(i, 3).mask


def test_all_configs_is_read_only():
    with pytest.raises(ValueError):
        all_configs(2)[0, 0] = 1


@pytest.mark.parametrize("index,M", [(-1, 2), (4, 2), (8, 3)])
def test_when_index_out_of_range_then_raises_value_error(index, M):
    with pytest.raises(ValueError):
        config_index_to_mask(index, M)


def test_access_config_positional_and_keyword_are_equal():
    assert AccessConfig((1, 0)) == AccessConfig(mask=(1, 0))


def test_access_config_channels_are_one_based():
    assert AccessConfig((1, 0, 1)).channels == (1, 3)


def test_when_mask_is_not_binary_then_raises_validation_error():
    with pytest.raises(pydantic.ValidationError):
        AccessConfig((0, 2))


def test_access_config_is_immutable():
    config = AccessConfig((1, 0))
    with pytest.raises(TypeError):
        config.mask = (0, 1)


def test_update_delay_and_timeliness():
    update = Update(generation_slot=5, delivery_slot=25)
    assert update.delay == 20
    assert update.timely(20)
    assert not update.timely(19)


def test_update_without_delivery_is_not_timely():
    update = Update(generation_slot=5)
    assert update.delay is None
    assert not update.timely(20)


def test_update_deliver_records_end_of_slot():
    update = Update(generation_slot=5).deliver(7)
    assert update.delivery_slot == 8
    assert update.delay == 3


def test_update_age_is_delay_if_delivered_this_slot():
    assert Update(generation_slot=5).age(7) == 3


def test_when_delivery_before_generation_then_raises_validation_error():
    with pytest.raises(pydantic.ValidationError):
        Update(generation_slot=5, delivery_slot=4)


def test_table_values_are_valid():
    cfg = validate_config(
        {"area": "20x20", "v": 2, "D": 20, "slot_ms": 3, "p_act": 0.4}
    )
    assert cfg.area == (20.0, 20.0)
    assert cfg.D == 20
    assert cfg.dt == pytest.approx(0.003)


def test_defaults_fill_batch_and_memory():
    cfg = validate_config({"M": 3})
    assert cfg.batch == 2**3 * 30
    assert cfg.S == 10 * cfg.batch


def test_when_batch_given_and_s_unset_then_s_is_ten_batches():
    cfg = validate_config({"M": 3, "batch": 100})
    assert cfg.S == 1000


def test_when_p_act_out_of_range_then_error_names_key_and_bound():
    with pytest.raises(exc.ConfigError) as e:
        validate_config({"p_act": 1.2})
    assert any("p_act ∉ [0,1]" in v for v in e.value.violations)


def test_every_violation_is_reported():
    with pytest.raises(exc.ConfigError) as e:
        validate_config({"p_act": 1.2, "p_arr": -0.1, "K": 0})
    text = "\n".join(e.value.violations)
    assert "p_act" in text
    assert "p_arr" in text
    assert "K" in text


def test_when_batch_exceeds_memory_then_raises_config_error():
    with pytest.raises(exc.ConfigError) as e:
        validate_config({"batch": 100, "S": 50})
    assert "batch > S" in str(e.value)


def test_when_unknown_key_then_raises_config_error():
    with pytest.raises(exc.ConfigError) as e:
        validate_config({"bogus": 1})
    assert "bogus" in e.value.violations[0]


def test_policy_is_case_insensitive():
    assert validate_config({"policy": "RCH"}).policy is Policy.RCH


def test_area_accepts_comma_separated_pair():
    assert validate_config({"area": "30, 10"}).area == (30.0, 10.0)


def test_when_area_malformed_then_raises_config_error():
    with pytest.raises(exc.ConfigError):
        validate_config({"area": "20x20x20"})


def test_warmup_only_applies_to_learning_policies():
    assert validate_config({"policy": "dnn", "horizon": 1000}).warmup_slots
    assert validate_config({"policy": "rch"}).warmup_slots == 0


def test_replace_recomputes_derived_sizes_when_m_changes():
    cfg = validate_config({"M": 3})
    assert cfg.replace(M=4).batch == 2**4 * 30
    assert cfg.replace(K=5).batch == cfg.batch


def test_config_is_immutable():
    cfg = SimConfig()
    with pytest.raises(TypeError):
        cfg.K = 3


def test_parse_config_text_ignores_comments_and_blank_lines():
    text = "# header\n\nK = 4  # LAPs\nM=2\n"
    assert parse_config_text(text) == {"K": "4", "M": "2"}


@pytest.mark.parametrize(
    "text", ["K = 4\nK = 5\n", "K 4\n", " = 4\n"], ids=["dup", "no_eq", "key"]
)
def test_when_config_text_malformed_then_raises_config_error(text):
    with pytest.raises(exc.ConfigError):
        parse_config_text(text)


def test_load_config_applies_overrides(config_file):
    cfg = load_config(config_file, seed=7, horizon=None)
    assert cfg.K == 3
    assert cfg.seed == 7
    assert cfg.horizon == 120
    assert cfg.policy is Policy.RCH
