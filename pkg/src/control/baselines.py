"""
Comparison controllers and closed-loop evaluation

Nominal MPC uses the unperturbed inexact model. Scenario MPC optimizes one
input sequence against sampled models and noise sequences, resampled at every
control step.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Optional, Protocol

import numpy as np
import pandas as pd

from src.control.evaluation import evaluate_centralized, evaluate_v_and_policy_distributed
from src.control.scheme import MpcScheme
from src.dynamics.academic import AcademicEnv, env_step, sample_inaccurate_model, true_dynamics
from src.dynamics.linsys import DynamicsParams, JointState
from src.network.topology import GraphTopology
from src.optim.admm import DEFAULT_RHO
from src.utils.logging import get_logger
from src.utils.metrics import closed_loop_episodes_total

logger = get_logger(__name__)

ModelSource = Literal["inexact", "true"]


@dataclass(eq=False)
class ScenarioSet:
    """
    Sampled models models[s][i] and disturbances (S, M, N, n).
    """

    models: list[list[DynamicsParams]]
    disturbances: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        self.disturbances = np.asarray(self.disturbances, dtype=float)
        if len(self.models) != self.disturbances.shape[0]:
            raise ValueError("One disturbance sequence per scenario is required")
        if len(self.models) < 1:
            raise ValueError("At least one scenario is required")

    @property
    def count(self) -> int:
        return len(self.models)

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        topology: GraphTopology,
        count: int,
        horizon: int,
        noise_interval: tuple[float, float],
        model_source: ModelSource = "inexact",
        state_dim: int = 2,
    ) -> "ScenarioSet":
        """Draw `count` scenarios; noise enters the first state component only."""
        if count < 1:
            raise ValueError("count must be positive")
        models = []
        for _ in range(count):
            if model_source == "true":
                models.append([true_dynamics(nbrs) for nbrs in topology.neighborhoods])
            else:
                models.append([sample_inaccurate_model(rng, nbrs) for nbrs in topology.neighborhoods])
        disturbances = np.zeros((count, topology.num_agents, horizon, state_dim))
        low, high = noise_interval
        disturbances[..., 0] = rng.uniform(low, high, size=(count, topology.num_agents, horizon))
        return cls(models=models, disturbances=disturbances)


def _policy_inputs(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    topology: Optional[GraphTopology],
    admm_iterations: int,
    gac_iterations: int,
    rho: float,
    tol: Optional[float],
) -> np.ndarray:
    if topology is None:
        return evaluate_centralized(scheme, state, tol=tol).first_inputs
    return evaluate_v_and_policy_distributed(
        scheme, topology, state, admm_iterations, gac_iterations, rho, tol=tol
    ).first_inputs


def nominal_mpc_policy(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    topology: Optional[GraphTopology] = None,
    *,
    admm_iterations: int = 50,
    gac_iterations: int = 100,
    rho: float = DEFAULT_RHO,
    tol: Optional[float] = None,
) -> np.ndarray:
    """Greedy MPC input; distributed when a topology is given."""
    return _policy_inputs(scheme, state, topology, admm_iterations, gac_iterations, rho, tol)


def scenario_mpc_policy(
    scheme: MpcScheme,
    scenarios: ScenarioSet,
    state: JointState | np.ndarray,
    topology: Optional[GraphTopology] = None,
    *,
    admm_iterations: int = 50,
    gac_iterations: int = 100,
    rho: float = DEFAULT_RHO,
    tol: Optional[float] = None,
) -> np.ndarray:
    """First input of the scenario QP with a shared input sequence."""
    stacked = scheme.with_scenarios(scenarios.models, scenarios.disturbances)
    return _policy_inputs(stacked, state, topology, admm_iterations, gac_iterations, rho, tol)


class Policy(Protocol):
    def __call__(self, state: JointState) -> np.ndarray: ...


class MpcPolicy:
    """Greedy policy of a fixed scheme."""

    def __init__(
        self,
        scheme: MpcScheme,
        topology: Optional[GraphTopology] = None,
        admm_iterations: int = 50,
        gac_iterations: int = 100,
        rho: float = DEFAULT_RHO,
        tol: Optional[float] = None,
    ):
        self.scheme = scheme
        self.topology = topology
        self.admm_iterations = admm_iterations
        self.gac_iterations = gac_iterations
        self.rho = rho
        self.tol = tol

    def __call__(self, state: JointState) -> np.ndarray:
        return nominal_mpc_policy(
            self.scheme, state, self.topology,
            admm_iterations=self.admm_iterations,
            gac_iterations=self.gac_iterations,
            rho=self.rho,
            tol=self.tol,
        )


class ScenarioMpcPolicy(MpcPolicy):
    """Scenario MPC drawing a fresh scenario set at every call."""

    def __init__(
        self,
        scheme: MpcScheme,
        count: int,
        noise_interval: tuple[float, float],
        model_source: ModelSource = "inexact",
        seed: Optional[int] = None,
        **kwargs,
    ):
        super().__init__(scheme, **kwargs)
        self.count = count
        self.noise_interval = noise_interval
        self.model_source = model_source
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def spawn(self, seed: int) -> "ScenarioMpcPolicy":
        """Independent copy for one episode."""
        child = ScenarioMpcPolicy(
            self.scheme, self.count, self.noise_interval, self.model_source, seed,
            topology=self.topology,
            admm_iterations=self.admm_iterations,
            gac_iterations=self.gac_iterations,
            rho=self.rho,
            tol=self.tol,
        )
        # separate stream from a plant seeded with the same episode seed
        child.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        return child

    def sample(self) -> ScenarioSet:
        return ScenarioSet.sample(
            self.rng,
            self.scheme.topology,
            self.count,
            self.scheme.horizon,
            self.noise_interval,
            self.model_source,
            self.scheme.state_dim,
        )

    def __call__(self, state: JointState) -> np.ndarray:
        return scenario_mpc_policy(
            self.scheme, self.sample(), state, self.topology,
            admm_iterations=self.admm_iterations,
            gac_iterations=self.gac_iterations,
            rho=self.rho,
            tol=self.tol,
        )


@dataclass(eq=False)
class ClosedLoopResult:
    """Per-episode accumulated cost and number of (step, agent) bound violations."""

    costs: np.ndarray
    violations: np.ndarray
    seeds: np.ndarray

    def to_frame(self, controller: str) -> pd.DataFrame:
        return pd.DataFrame({
            "episode": np.arange(self.costs.size),
            "controller": controller,
            "total_cost": self.costs,
            "violations": self.violations,
        })


def _rollout(
    policy: Policy,
    env: AcademicEnv,
    steps: int,
    initial_state: Optional[np.ndarray],
    randomize_start: bool,
) -> tuple[float, int]:
    state = env.reset(state=initial_state, randomize=randomize_start)
    total, violations = 0.0, 0
    for _ in range(steps):
        violations += int(np.sum(env.violates(state)))
        actions = policy(state)
        state, costs = env_step(env, state, actions)
        total += float(np.sum(costs))
    return total, violations


def closed_loop_eval(
    policy: Policy,
    env: AcademicEnv,
    steps: int,
    episodes: int,
    rng: np.random.Generator,
    *,
    initial_state: Optional[np.ndarray] = None,
    randomize_start: bool = True,
    threads: int = 1,
    controller: str = "policy",
) -> ClosedLoopResult:
    """
    Roll a policy out on the true noisy plant.

    Each episode runs on its own clone of the plant with a seed drawn from rng.
    Policies with a spawn(seed) method get an independent copy per episode.

    Returns:
        Sum of the stage costs of `steps` transitions per episode and the
        number of (step, agent) pairs outside the state box over s_0..s_{steps-1}
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    seeds = rng.integers(0, 2**31 - 1, size=episodes)

    def run(seed: int) -> tuple[float, int]:
        episode_policy = policy.spawn(int(seed)) if hasattr(policy, "spawn") else policy
        result = _rollout(episode_policy, env.clone(int(seed)), steps, initial_state, randomize_start)
        closed_loop_episodes_total.labels(controller=controller).inc()
        return result

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(run, seeds))
    else:
        outcomes = [run(seed) for seed in seeds]

    costs = np.array([c for c, _ in outcomes])
    violations = np.array([v for _, v in outcomes], dtype=int)
    logger.info(
        f"{controller}: median cost {np.median(costs):.3f} over {episodes} episodes, "
        f"{int(violations.sum())} violations"
    )
    return ClosedLoopResult(costs=costs, violations=violations, seeds=seeds)
