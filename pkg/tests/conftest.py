"""
Pytest configuration and fixtures
"""
import os

# Must be set before src.config is imported: enables KKT checks after every solve
os.environ.setdefault("NETMPC_ENVIRONMENT", "testing")

import numpy as np
import pytest

from src.control.scheme import MpcScheme
from src.dynamics.academic import AcademicEnv, nominal_model, true_dynamics
from src.dynamics.linsys import AgentParams
from src.network.topology import GraphTopology, build_chain, from_edges


@pytest.fixture
def chain3() -> GraphTopology:
    """Three-agent chain 0 <-> 1 <-> 2."""
    return build_chain(3)


@pytest.fixture
def single_agent() -> GraphTopology:
    """One agent without neighbors."""
    return from_edges(1, [])


@pytest.fixture
def nominal_params(chain3) -> list[AgentParams]:
    """Zero-offset parameters with the nominal inexact model."""
    return [AgentParams(dynamics=nominal_model(nbrs)) for nbrs in chain3.neighborhoods]


@pytest.fixture
def true_params(chain3) -> list[AgentParams]:
    """Zero-offset parameters with the real plant model."""
    return [AgentParams(dynamics=true_dynamics(nbrs)) for nbrs in chain3.neighborhoods]


@pytest.fixture
def scheme(chain3, true_params) -> MpcScheme:
    """Academic scheme with coupled (true) dynamics and the default horizon."""
    return MpcScheme(topology=chain3, params=true_params)


@pytest.fixture
def short_scheme(chain3, true_params) -> MpcScheme:
    """Academic scheme with a short horizon for fast tests."""
    return MpcScheme(topology=chain3, params=true_params, horizon=4)


@pytest.fixture
def env(chain3) -> AcademicEnv:
    """Seeded academic plant."""
    return AcademicEnv(topology=chain3, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def interior_state() -> np.ndarray:
    """Joint state strictly inside the state box."""
    return np.array([[0.5, 0.0], [0.3, 0.2], [0.7, -0.3]])
