import warnings

import numpy as np
import pytest

from mbjm.data import ModelConfig
from mbjm.engine import fit_mbjm
from mbjm.simulation import SimScenario, default_truth, generate


@pytest.fixture(scope="session")
def ex_scenario():
    return SimScenario("MBJM-EX", n=300, seed=11)


@pytest.fixture(scope="session")
def ex_data(ex_scenario):
    return generate(ex_scenario)


@pytest.fixture(scope="session")
def ex_fit(ex_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_mbjm(ex_data[0], ModelConfig())


@pytest.fixture(scope="session")
def tp_scenario():
    return SimScenario("MBJM-TP", n=400, seed=5)


@pytest.fixture(scope="session")
def truth_ex():
    return default_truth("EX")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
