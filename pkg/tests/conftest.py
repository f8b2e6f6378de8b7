import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from windstore.ctmc import CtmcModel, stationary_distribution
from windstore.fluidq import StorageParams
from windstore.profit import MarketParams
from windstore.synthetic import reference_model, synthetic_wind_trace

settings.register_profile("suite", deadline=None, max_examples=30)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def market():
    return MarketParams()


@pytest.fixture(scope="session")
def storage():
    return StorageParams()


@pytest.fixture(scope="session")
def wind_trace():
    """Two years of hourly plant-like data; shared because estimation is slow."""
    return synthetic_wind_trace(hours=2 * 8760, seed=1)


@pytest.fixture(scope="session")
def estimated_model(wind_trace):
    from windstore.ctmc import discretize, estimate, preprocess

    labels, values = discretize(preprocess(wind_trace, 1.0), 15)
    return estimate(labels, values, wind_trace.delta)


def make_model(values, generator):
    generator = np.asarray(generator, float)
    return CtmcModel(
        n_states=len(values),
        state_values=np.asarray(values, float),
        generator=generator,
        stationary=stationary_distribution(generator),
    )


@pytest.fixture
def two_state():
    return make_model([0.2, 0.8], [[-0.8, 0.8], [1.3, -1.3]])
