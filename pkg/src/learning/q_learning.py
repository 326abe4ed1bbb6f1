"""
Distributed Q-learning of the MPC scheme parameters

Each agent updates its own parameters with its TD error estimate and the
sensitivity of its local Lagrangian; stacked together the local updates
reproduce the centralized Q-learning update.
"""
import time
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from src.config import settings
from src.control.evaluation import (
    EvaluationResult,
    evaluate_centralized,
    evaluate_q_distributed,
    evaluate_v_and_policy_distributed,
)
from src.control.scheme import AgentLayout, MpcScheme
from src.dynamics.academic import AcademicEnv, env_step
from src.dynamics.linsys import AgentParams, JointState
from src.learning.replay import Experience, ExperienceReplay
from src.network.topology import GraphTopology, gac_consensus
from src.optim.admm import ConsensusError
from src.optim.qp import KktSolution, QpError
from src.utils.logging import get_logger
from src.utils.metrics import parameter_updates_total, td_error_last, training_steps_total

logger = get_logger(__name__)

STATE_MATCH_TOLERANCE = 1e-6


class StaleDuals(Exception):
    """Multipliers are not accurate enough for a sensitivity."""


class TrainingAborted(Exception):
    """Training stopped because an evaluation failed."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class LearnerConfig(BaseModel):
    """Q-learning hyperparameters."""

    learning_rate: float = Field(default=6e-5, gt=0.0)
    learning_rate_decay: float = Field(default=0.9996, gt=0.0, le=1.0)
    exploration: float = Field(default=0.7, ge=0.0, le=1.0)
    exploration_decay: float = Field(default=0.99, gt=0.0, le=1.0)
    perturbation_interval: tuple[float, float] = (-1.0, 1.0)
    replay_window: int = Field(default=15, ge=1)
    update_period: int = Field(default=2, ge=1)
    gamma: float = Field(default=0.9, gt=0.0, le=1.0)
    admm_iterations: int = Field(default=50, ge=1)
    gac_iterations: int = Field(default=100, ge=0)
    rho: float = Field(default=0.5, gt=0.0)
    max_update_norm: Optional[float] = Field(default=None, gt=0.0)
    evaluation: Literal["distributed", "centralized"] = "distributed"
    snapshot_every: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def check_interval(self) -> "LearnerConfig":
        low, high = self.perturbation_interval
        if low > high:
            raise ValueError("perturbation_interval must be (low, high) with low <= high")
        return self

    def learning_rate_at(self, step: int) -> float:
        return self.learning_rate * self.learning_rate_decay ** step

    def exploration_at(self, step: int) -> float:
        return self.exploration * self.exploration_decay ** step


def td_error(stage_cost: float, v_next: float, q_current: float, gamma: float) -> float:
    """delta = L + gamma V(s') - Q(s, a)."""
    return float(stage_cost + gamma * v_next - q_current)


def lagrangian_gradient(
    scheme: MpcScheme,
    agent: int,
    s_i: np.ndarray,
    a_i: Optional[np.ndarray],
    kkt: KktSolution,
    layout: Optional[AgentLayout] = None,
    threshold: Optional[float] = None,
    neighbor_states: Optional[Mapping[int, np.ndarray]] = None,
) -> np.ndarray:
    """
    Gradient of agent i's Lagrangian with respect to its parameters at the
    primal-dual point in kkt, flattened in AgentParams order.

    Args:
        scheme: MPC scheme the solution belongs to (single scenario)
        agent: Agent index
        s_i: Local state the QP was built for
        a_i: Local action of the Q evaluation (None for V)
        kkt: Local solution in the agent's local layout
        layout: Layout of kkt; rebuilt from the scheme when omitted
        threshold: Largest acceptable KKT residual
        neighbor_states: Predicted states x_j(0..N-1), shape (N, n), of the
            neighbors the layout holds no copies of

    Raises:
        StaleDuals: If the KKT residual is above the threshold
        ValueError: If a neighbor's predicted states are neither copied nor given
    """
    threshold = settings.stale_dual_threshold if threshold is None else threshold
    if not kkt.kkt_residual <= threshold:
        raise StaleDuals(f"KKT residual {kkt.kkt_residual:.3e} exceeds {threshold:.1e}")
    if scheme.num_scenarios != 1:
        raise ValueError("Sensitivities are defined for single-scenario schemes only")
    if layout is None:
        layout = scheme.layout(agent, with_action=a_i is not None)

    x = kkt.x_opt[layout.x[0]]
    u = kkt.x_opt[layout.u]
    if np.max(np.abs(x[0] - np.asarray(s_i, dtype=float))) > STATE_MATCH_TOLERANCE:
        raise ValueError("KKT solution was computed for a different state")
    if a_i is not None and np.max(np.abs(u[0] - np.asarray(a_i, dtype=float).reshape(-1))) > STATE_MATCH_TOLERANCE:
        raise ValueError("KKT solution was computed for a different action")

    N = scheme.horizon
    theta = scheme.params[agent]
    mu = kkt.eq_duals[layout.eq_dynamics[0]]  # (N, n)
    lam_lower = kkt.ineq_duals[layout.ineq_lower[0]]
    lam_upper = kkt.ineq_duals[layout.ineq_upper[0]]
    weights = scheme.gamma ** np.arange(N) if scheme.discount_linear_cost else np.ones(N)

    blocks = {
        "V0": np.ones(1),
        "x_lb": lam_lower.sum(axis=0),
        "x_ub": -lam_upper.sum(axis=0),
        "b": -mu.sum(axis=0),
        "f": np.concatenate([weights @ x[:N], weights @ u]),
        "A": -(mu.T @ x[:N]),
        "B": -(mu.T @ u),
    }
    for j in theta.dynamics.neighbors:
        if j in layout.copies:
            x_j = kkt.x_opt[layout.copies[j][0]]
        elif neighbor_states is not None and j in neighbor_states:
            x_j = np.asarray(neighbor_states[j], dtype=float).reshape(N, -1)
        else:
            raise ValueError(f"Gradient of agent {agent} needs the predicted states of neighbor {j}")
        blocks[f"A_{j}"] = -(mu.T @ x_j)

    grad = np.zeros(theta.size)
    for name, span in theta.slices().items():
        grad[span] = blocks[name].ravel()
    return grad


def agent_gradients(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    actions: Optional[np.ndarray],
    result: EvaluationResult,
) -> list[np.ndarray]:
    """
    Lagrangian gradient of every agent from one evaluation. Neighbors that
    are not copied locally share their own predicted states.
    """
    states = state.states if isinstance(state, JointState) else np.asarray(state, dtype=float)
    return [
        lagrangian_gradient(
            scheme,
            i,
            states[i],
            None if actions is None else actions[i],
            result.solutions[i],
            layout=result.layouts[i],
            neighbor_states=result.neighbor_states(i, scheme.topology.neighborhoods[i]),
        )
        for i in range(scheme.num_agents)
    ]


def local_update(
    theta: AgentParams | np.ndarray,
    td_error_avg: float,
    gradient_avg: np.ndarray,
    learning_rate: float,
    max_norm: Optional[float] = None,
) -> AgentParams | np.ndarray:
    """theta + alpha * delta * gradient, optionally clipped in norm."""
    vector = theta.to_vector() if isinstance(theta, AgentParams) else np.asarray(theta, dtype=float)
    gradient_avg = np.asarray(gradient_avg, dtype=float)
    if gradient_avg.shape != vector.shape:
        raise ValueError(f"Gradient shape {gradient_avg.shape} does not match parameters {vector.shape}")
    step = learning_rate * td_error_avg * gradient_avg
    if max_norm is not None:
        norm = float(np.linalg.norm(step))
        if norm > max_norm:
            step *= max_norm / norm
    updated = vector + step
    return theta.from_vector(updated) if isinstance(theta, AgentParams) else updated


@dataclass(eq=False)
class ExplorationRecord:
    """Which agents perturbed their objective, and by how much."""

    perturbed: np.ndarray  # (M,) bool
    tilts: np.ndarray  # (M, m)


def explore_action(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    perturbation_interval: tuple[float, float],
    *,
    topology: Optional[GraphTopology] = None,
    config: Optional[LearnerConfig] = None,
    greedy: Optional[EvaluationResult] = None,
    tol: Optional[float] = None,
    threads: int = 1,
) -> tuple[np.ndarray, ExplorationRecord, Optional[EvaluationResult]]:
    """
    Epsilon-greedy action from the MPC policy.

    With probability epsilon each agent adds a linear cost, drawn uniformly
    from the perturbation interval, on its first input before the policy is
    evaluated. Without a topology the centralized QP is used.

    Args:
        greedy: Already computed unperturbed policy evaluation at this state

    Returns:
        Joint action, perturbation record and the evaluation it came from
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    config = config or LearnerConfig()
    M, m = scheme.num_agents, scheme.input_dim
    perturbed = rng.random(M) < epsilon
    low, high = perturbation_interval
    tilts = rng.uniform(low, high, size=(M, m)) * perturbed[:, None]
    record = ExplorationRecord(perturbed=perturbed, tilts=tilts)

    explore = bool(np.any(tilts != 0.0))
    if not explore and greedy is not None:
        return greedy.first_inputs.copy(), record, greedy

    tilt_arg = tilts if explore else None
    if topology is None:
        result = evaluate_centralized(scheme, state, tol=tol, tilts=tilt_arg)
    else:
        result = evaluate_v_and_policy_distributed(
            scheme,
            topology,
            state,
            config.admm_iterations,
            config.gac_iterations,
            config.rho,
            tol=tol,
            tilts=tilt_arg,
            threads=threads,
        )
    return result.first_inputs.copy(), record, result


@dataclass(eq=False)
class TrainingLog:
    """Per-step training record and parameter snapshots."""

    num_agents: int
    state_dim: int
    input_dim: int
    rows: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    final_params: list[AgentParams] = field(default_factory=list)
    wall_time: float = 0.0

    def columns(self) -> list[str]:
        cols = ["step"]
        cols += [f"s_{i}_{c}" for i in range(self.num_agents) for c in range(self.state_dim)]
        cols += [f"a_{i}_{c}" for i in range(self.num_agents) for c in range(self.input_dim)]
        cols += [f"L_{i}" for i in range(self.num_agents)]
        cols += ["td_error"] + [f"td_error_{i}" for i in range(self.num_agents)]
        cols += ["alpha", "epsilon"]
        return cols

    def record(
        self,
        step: int,
        state: JointState,
        actions: np.ndarray,
        costs: np.ndarray,
        td_errors: np.ndarray,
        alpha: float,
        epsilon: float,
    ) -> None:
        row: dict = {"step": step}
        for i in range(self.num_agents):
            for c in range(self.state_dim):
                row[f"s_{i}_{c}"] = float(state[i][c])
            for c in range(self.input_dim):
                row[f"a_{i}_{c}"] = float(actions[i][c])
            row[f"L_{i}"] = float(costs[i])
            row[f"td_error_{i}"] = float(td_errors[i])
        row["td_error"] = float(np.mean(td_errors))
        row["alpha"] = alpha
        row["epsilon"] = epsilon
        self.rows.append(row)

    def snapshot(self, step: int, params: Sequence[AgentParams]) -> None:
        self.snapshots.append({
            "step": step,
            "agents": {str(i): p.to_dict() for i, p in enumerate(params)},
        })

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns())

    @property
    def td_errors(self) -> np.ndarray:
        return np.array([row["td_error"] for row in self.rows])


def _evaluate_pair(
    scheme: MpcScheme,
    topology: GraphTopology,
    config: LearnerConfig,
    state: JointState,
    actions: np.ndarray,
    next_state: JointState,
    tol: Optional[float],
    threads: int,
) -> tuple[EvaluationResult, EvaluationResult]:
    """Q at (s_t, a_t) and V at s_{t+1}."""
    if config.evaluation == "centralized":
        return (
            evaluate_centralized(scheme, state, actions, tol=tol),
            evaluate_centralized(scheme, next_state, tol=tol),
        )
    q = evaluate_q_distributed(
        scheme, topology, state, actions,
        config.admm_iterations, config.gac_iterations, config.rho, tol=tol, threads=threads,
    )
    v = evaluate_v_and_policy_distributed(
        scheme, topology, next_state,
        config.admm_iterations, config.gac_iterations, config.rho, tol=tol, threads=threads,
    )
    return q, v


def train(
    env: AcademicEnv,
    scheme: MpcScheme,
    topology: GraphTopology,
    config: LearnerConfig,
    steps: int,
    *,
    rng: Optional[np.random.Generator] = None,
    initial_state: Optional[JointState] = None,
    tol: Optional[float] = None,
    threads: int = 1,
) -> TrainingLog:
    """
    Run Q-learning on a single trajectory of the plant.

    Args:
        env: True plant, stepped with its own generator
        scheme: Scheme holding the initial parameters
        topology: Agent network
        config: Hyperparameters
        steps: Number of environment steps
        rng: Exploration generator (defaults to one seeded from env.seed)
        initial_state: Start state (defaults to env.reset())
        tol: QP tolerance (defaults to settings.qp_tolerance)
        threads: Worker threads for the local solves of one ADMM round

    Returns:
        TrainingLog with per-step rows, parameter snapshots and final parameters

    Raises:
        TrainingAborted: An evaluation failed; the step is attached
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if scheme.gamma != config.gamma:
        logger.warning(f"Scheme discount {scheme.gamma} differs from learner discount {config.gamma}")
    rng = rng if rng is not None else np.random.default_rng(None if env.seed is None else env.seed + 1)
    state = initial_state if initial_state is not None else env.reset()
    M = scheme.num_agents
    replay = ExperienceReplay(M, config.replay_window, config.update_period)
    log = TrainingLog(num_agents=M, state_dim=scheme.state_dim, input_dim=scheme.input_dim)
    log.snapshot(0, scheme.params)
    topology_arg = topology if config.evaluation == "distributed" else None
    greedy: Optional[EvaluationResult] = None
    started = time.perf_counter()

    logger.info(f"Training for {steps} steps ({config.evaluation} evaluation)")
    for t in range(steps):
        alpha, epsilon = config.learning_rate_at(t), config.exploration_at(t)
        try:
            actions, _, _ = explore_action(
                scheme, state, epsilon, rng, config.perturbation_interval,
                topology=topology_arg, config=config, greedy=greedy, tol=tol, threads=threads,
            )
            next_state, costs = env_step(env, state, actions)
            q_eval, v_eval = _evaluate_pair(
                scheme, topology, config, state, actions, next_state, tol, threads
            )
            # the global stage cost is the network mean of the local costs
            if config.evaluation == "distributed":
                cost_estimates = gac_consensus(costs, topology, config.gac_iterations)
            else:
                cost_estimates = np.full(M, float(np.mean(costs)))
            deltas = cost_estimates + config.gamma * v_eval.estimates - q_eval.estimates
            gradients = agent_gradients(scheme, state, actions, q_eval)
        except (QpError, ConsensusError, StaleDuals) as exc:
            logger.error(f"Training aborted at step {t}: {type(exc).__name__}: {exc}")
            raise TrainingAborted(f"Evaluation failed at step {t}: {exc}", step=t) from exc

        replay.add(Experience(td_errors=deltas, gradients=gradients, step=t))
        updated = replay.should_update(t) and alpha > 0.0
        if updated:
            new_params = []
            for i in range(M):
                delta_avg, grad_avg = replay.averages(i)
                new_params.append(
                    local_update(scheme.params[i], delta_avg, grad_avg, alpha, config.max_update_norm)
                )
            scheme = scheme.with_params(new_params)
            parameter_updates_total.inc()
        # V at s_{t+1} doubles as the next greedy policy while parameters are unchanged
        greedy = None if updated else v_eval

        log.record(t, state, actions, costs, deltas, alpha, epsilon)
        if (t + 1) % config.snapshot_every == 0:
            log.snapshot(t + 1, scheme.params)
        training_steps_total.labels(evaluation=config.evaluation).inc()
        td_error_last.set(float(np.mean(deltas)))
        if (t + 1) % 100 == 0:
            logger.info(f"Step {t + 1}/{steps}: mean |delta| over last 100 = "
                        f"{np.mean(np.abs(log.td_errors[-100:])):.4e}")
        state = next_state

    log.final_params = list(scheme.params)
    log.wall_time = time.perf_counter() - started
    logger.info(f"Training finished in {log.wall_time:.1f}s")
    return log
