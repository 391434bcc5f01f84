import numpy as np
import pytest

from texmorph.condition import ConditionInput
from texmorph.config import MorphConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config():
    return MorphConfig(
        source=ConditionInput(11, "chair", (0.8, 0.2, 0.2)),
        target=ConditionInput(23, "table", (0.2, 0.3, 0.9)),
    )
