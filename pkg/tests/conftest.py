import numpy as np
import pytest

from dmp.bench import get_benchmark
from dmp.core import rollout


@pytest.fixture(scope="session")
def lq():
    return get_benchmark("lq")


@pytest.fixture(scope="session")
def ci():
    return get_benchmark("ci")


@pytest.fixture(scope="session")
def bm():
    return get_benchmark("bm")


@pytest.fixture(scope="session")
def ak():
    return get_benchmark("ak")


@pytest.fixture(scope="session")
def lq_game():
    return get_benchmark("lq_game")


def oracle_rollout(case, T):
    """Oracle plan and its trajectory at truncation T."""
    plan = case.oracle["plan"](T)
    traj = rollout(case.problem, plan, case.default_x0)
    return plan, traj


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
