import numpy as np
import pytest

from agentcoord.core import BudgetSpec, load_agent_pool
from agentcoord.env import SimulatedBackend, generate_tasks


@pytest.fixture(scope="session")
def math_pool():
    return tuple(load_agent_pool("math"))


@pytest.fixture(scope="session")
def pipe_pool():
    return tuple(load_agent_pool("pipeline3"))


@pytest.fixture
def budget():
    return BudgetSpec(3000, 3000)


@pytest.fixture(scope="session")
def pipe_tasks(pipe_pool):
    return generate_tasks(6, pipe_pool, "pipeline", 0)


@pytest.fixture(scope="session")
def hard_tasks(math_pool):
    return generate_tasks(8, math_pool, "hard", 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def backend_for(pool):
    return SimulatedBackend(pool)


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
