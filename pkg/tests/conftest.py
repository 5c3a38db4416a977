import numpy as np
import pytest
from hypothesis import settings, strategies as st

from branch_target.labels import Label
from branch_target.model import OffspringLaw, fintech_scenario

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

digits = st.integers(min_value=0, max_value=4)
labels = st.lists(digits, max_size=5).map(Label)


@pytest.fixture
def desk():
    return fintech_scenario(b=0.1, c=0.2, r=0.02, kappa=0.1, T=1.0, strike0=1.0)


@pytest.fixture
def fork_law():
    return OffspringLaw(0.5, ((2, 1.0),))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
