import numpy as np
import pytest

from subnetra.types import validate_config
from subnetra.utils import RngStreams

SMALL_CONFIG = """\
# small run used by the cli tests
K = 3
M = 2
p_act = 0.4
p_arr = 0.1
D = 20
area = 20x20
policy = rch
horizon = 120
"""


@pytest.fixture
def cfg():
    yield validate_config({"K": 3, "M": 2, "policy": "rch", "horizon": 200})


@pytest.fixture
def rng():
    yield np.random.default_rng(1234)


@pytest.fixture
def streams():
    yield RngStreams(0)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    yield path
