"""
Academic three-agent chain benchmark

True plant, stage cost and the uniform family of inexact models the agents
start from.
"""
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.dynamics.linsys import DynamicsParams, JointState, predict
from src.network.topology import GraphTopology
from src.utils.logging import get_logger

logger = get_logger(__name__)

TRUE_A = np.array([[0.9, 0.35], [0.0, 1.1]])
TRUE_A_NEIGHBOR = np.array([[0.0, 0.0], [0.0, -0.1]])
TRUE_B = np.array([[0.0813], [0.2]])

NOMINAL_A = np.array([[1.0, 0.25], [0.0, 1.0]])
NOMINAL_B = np.array([[0.0312], [0.25]])

# Uniform support of the inexact model family
MODEL_PERTURBATION_BOUNDS: dict[str, tuple[float, float]] = {
    "a1": (-0.1, 0.1),
    "a2": (-0.1, 0.1),
    "a3": (-0.1, 0.1),
    "b1": (0.0, 0.075),
    "b2": (-0.075, 0.0),
    "c": (-0.1, 0.0),
}

DEFAULT_STATE_LB = (0.0, -1.0)
DEFAULT_STATE_UB = (1.0, 1.0)
DEFAULT_OMEGA = (100.0, 100.0)
DEFAULT_NOISE_INTERVAL = (-0.1, 0.0)


def true_dynamics(neighbors: Sequence[int] = ()) -> DynamicsParams:
    """Real (unknown to the agents) model of one agent."""
    return DynamicsParams(
        A=TRUE_A.copy(),
        B=TRUE_B.copy(),
        A_neighbors={j: TRUE_A_NEIGHBOR.copy() for j in neighbors},
    )


def nominal_model(neighbors: Sequence[int] = ()) -> DynamicsParams:
    """Inexact model with every perturbation set to zero."""
    return DynamicsParams(
        A=NOMINAL_A.copy(),
        B=NOMINAL_B.copy(),
        A_neighbors={j: np.zeros((2, 2)) for j in neighbors},
    )


def sample_inaccurate_model(
    rng: np.random.Generator,
    neighbors: Sequence[int] = (),
    zero: bool = False,
) -> DynamicsParams:
    """
    Draw one model from the uniform inexact family.

    Args:
        rng: Seeded generator
        neighbors: Neighborhood of the agent the model is for
        zero: Return the nominal model (all perturbations zero)

    Returns:
        DynamicsParams with A = [[1+a1, 0.25+a2], [0, 1+a3]],
        B = [0.0312+b1, 0.25+b2] and A_j = [[0, 0], [0, c]]
    """
    if zero:
        return nominal_model(neighbors)
    draw = {
        name: float(rng.uniform(low, high))
        for name, (low, high) in MODEL_PERTURBATION_BOUNDS.items()
    }
    A = NOMINAL_A + np.array([[draw["a1"], draw["a2"]], [0.0, draw["a3"]]])
    B = NOMINAL_B + np.array([[draw["b1"]], [draw["b2"]]])
    A_neighbor = np.array([[0.0, 0.0], [0.0, draw["c"]]])
    return DynamicsParams(A=A, B=B, A_neighbors={j: A_neighbor.copy() for j in neighbors})


def stage_cost(
    s_i: np.ndarray,
    a_i: np.ndarray,
    state_lb: np.ndarray,
    state_ub: np.ndarray,
    omega: np.ndarray,
) -> float:
    """
    Local stage cost ||s||^2 + 0.5 ||a||^2 plus weighted bound violations.

    Violations are penalized per component: w' max(0, lb - s) + w' max(0, s - ub).
    """
    s_i = np.asarray(s_i, dtype=float)
    a_i = np.atleast_1d(np.asarray(a_i, dtype=float))
    penalty = omega @ np.maximum(0.0, state_lb - s_i) + omega @ np.maximum(0.0, s_i - state_ub)
    return float(s_i @ s_i + 0.5 * (a_i @ a_i) + penalty)


@dataclass(eq=False)
class AcademicEnv:
    """
    Noisy chain plant. Owns its generator; stepping is single-threaded.

    Noise enters only the first state component.
    """

    topology: GraphTopology
    state_lb: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_STATE_LB))
    state_ub: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_STATE_UB))
    omega: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_OMEGA))
    noise_interval: tuple[float, float] = DEFAULT_NOISE_INTERVAL
    initial_state: np.ndarray | None = None
    seed: int | None = None
    models: list[DynamicsParams] | None = None

    def __post_init__(self) -> None:
        """Validate bounds and build the true per-agent models."""
        self.state_lb = np.asarray(self.state_lb, dtype=float)
        self.state_ub = np.asarray(self.state_ub, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        low, high = (float(v) for v in self.noise_interval)
        if low > high:
            raise ValueError(f"Empty noise interval [{low}, {high}]")
        self.noise_interval = (low, high)
        if np.any(self.state_lb > self.state_ub):
            raise ValueError("state_lb must not exceed state_ub")
        if np.any(self.omega < 0.0):
            raise ValueError("omega must be nonnegative")

        if self.models is None:
            self.models = [true_dynamics(nbrs) for nbrs in self.topology.neighborhoods]
        if len(self.models) != self.topology.num_agents:
            raise ValueError("One model per agent is required")

        n = self.state_dim
        if self.initial_state is None:
            # interior point of the box
            self.initial_state = np.tile(0.5 * (self.state_lb + self.state_ub), (self.num_agents, 1))
        self.initial_state = np.asarray(self.initial_state, dtype=float).reshape(self.num_agents, n)
        self.rng = np.random.default_rng(self.seed)

    @property
    def num_agents(self) -> int:
        return self.topology.num_agents

    @property
    def state_dim(self) -> int:
        return self.models[0].state_dim

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    def clone(self, seed: int | None) -> "AcademicEnv":
        """Same plant with a fresh generator."""
        return AcademicEnv(
            topology=self.topology,
            state_lb=self.state_lb.copy(),
            state_ub=self.state_ub.copy(),
            omega=self.omega.copy(),
            noise_interval=self.noise_interval,
            initial_state=self.initial_state.copy(),
            seed=seed,
            models=[m.copy() for m in self.models],
        )

    def reset(self, state: np.ndarray | None = None, randomize: bool = False) -> JointState:
        """
        Start a new episode.

        Args:
            state: Explicit joint state (M, n); takes precedence
            randomize: Draw each agent state uniformly over the bound box
        """
        if state is not None:
            states = np.asarray(state, dtype=float).reshape(self.num_agents, self.state_dim)
        elif randomize:
            states = self.rng.uniform(self.state_lb, self.state_ub, size=(self.num_agents, self.state_dim))
        else:
            states = self.initial_state.copy()
        logger.debug(f"Environment reset to {states.tolist()}")
        return JointState(states=states, t=0)

    def sample_noise(self) -> np.ndarray:
        """Additive disturbance for all agents, shape (M, n)."""
        low, high = self.noise_interval
        noise = np.zeros((self.num_agents, self.state_dim))
        noise[:, 0] = self.rng.uniform(low, high, size=self.num_agents)
        return noise

    def stage_costs(self, state: JointState, joint_action: np.ndarray) -> np.ndarray:
        actions = np.asarray(joint_action, dtype=float).reshape(self.num_agents, self.input_dim)
        return np.array([
            stage_cost(state[i], actions[i], self.state_lb, self.state_ub, self.omega)
            for i in range(self.num_agents)
        ])

    def violates(self, state: JointState, tol: float = 1e-9) -> np.ndarray:
        """Per-agent flag: some component strictly outside the box."""
        below = state.states < self.state_lb - tol
        above = state.states > self.state_ub + tol
        return np.any(below | above, axis=1)

    def step(self, state: JointState, joint_action: np.ndarray) -> tuple[JointState, np.ndarray]:
        return env_step(self, state, joint_action)


def env_step(
    env: AcademicEnv,
    state: JointState,
    joint_action: np.ndarray,
) -> tuple[JointState, np.ndarray]:
    """
    Advance the true plant one step.

    Inputs outside the controller's box are accepted as-is.

    Returns:
        Next joint state and the per-agent stage costs L_i(s_i, a_i)
    """
    actions = np.asarray(joint_action, dtype=float).reshape(env.num_agents, env.input_dim)
    if state.num_agents != env.num_agents:
        raise ValueError(f"Expected {env.num_agents} agent states, got {state.num_agents}")
    costs = env.stage_costs(state, actions)
    noise = env.sample_noise()
    next_states = np.empty_like(state.states)
    for i, model in enumerate(env.models):
        neighbor_states = {j: state[j] for j in model.neighbors}
        next_states[i] = predict(model, state[i], actions[i], neighbor_states) + noise[i]
    return JointState(states=next_states, t=state.t + 1), costs
