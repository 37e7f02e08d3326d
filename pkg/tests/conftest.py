import hypothesis
import numpy as np
import pytest

from grurec.tensor import SeededRng

np.seterr(over="raise", invalid="raise", divide="raise")

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return SeededRng(1234, "tests")
