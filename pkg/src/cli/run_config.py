"""
Experiment configuration loaded from one YAML file
"""
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.control.scheme import DEFAULT_SLACK_REGULARIZATION, MpcScheme
from src.dynamics.academic import (
    DEFAULT_NOISE_INTERVAL,
    DEFAULT_OMEGA,
    DEFAULT_STATE_LB,
    DEFAULT_STATE_UB,
    AcademicEnv,
    nominal_model,
    sample_inaccurate_model,
    true_dynamics,
)
from src.dynamics.linsys import AgentParams
from src.learning.q_learning import LearnerConfig
from src.network.topology import GraphTopology, build_chain, from_edges

DEFAULT_DUAL_CHECK_ITERATIONS = [1, 2, 5, 10, 20, 30, 40, 50, 70, 100]
CONTROLLERS = ("trained", "nmpc", "smpc_inexact", "smpc_true")
# learner fields owned by other sections
_LEARNER_FIELDS_ELSEWHERE = {
    "admm_iterations": "admm.iterations",
    "gac_iterations": "admm.gac_iterations",
    "rho": "admm.rho",
    "gamma": "scheme.gamma",
}


class ConfigError(Exception):
    """Invalid or missing run configuration."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologyConfig(_Section):
    kind: Literal["chain", "edges"] = "chain"
    num_agents: int = Field(default=3, ge=1)
    edges: Optional[list[tuple[int, int]]] = None

    @model_validator(mode="after")
    def edges_for_explicit_graph(self) -> "TopologyConfig":
        if self.kind == "edges" and self.edges is None:
            raise ValueError("edges are required when kind is 'edges'")
        return self

    def build(self) -> GraphTopology:
        if self.kind == "chain":
            return build_chain(self.num_agents)
        return from_edges(self.num_agents, self.edges or [])


class EnvironmentConfig(_Section):
    state_lb: list[float] = Field(default_factory=lambda: list(DEFAULT_STATE_LB))
    state_ub: list[float] = Field(default_factory=lambda: list(DEFAULT_STATE_UB))
    omega: list[float] = Field(default_factory=lambda: list(DEFAULT_OMEGA))
    noise_interval: tuple[float, float] = DEFAULT_NOISE_INTERVAL
    initial_state: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def consistent_dimensions(self) -> "EnvironmentConfig":
        n = len(self.state_lb)
        if len(self.state_ub) != n or len(self.omega) != n:
            raise ValueError("state_lb, state_ub and omega must have the same length")
        if any(lo > hi for lo, hi in zip(self.state_lb, self.state_ub)):
            raise ValueError("state_lb must not exceed state_ub")
        if self.noise_interval[0] > self.noise_interval[1]:
            raise ValueError("noise_interval must be (low, high) with low <= high")
        return self

    def build(self, topology: GraphTopology, seed: Optional[int]) -> AcademicEnv:
        return AcademicEnv(
            topology=topology,
            state_lb=np.array(self.state_lb),
            state_ub=np.array(self.state_ub),
            omega=np.array(self.omega),
            noise_interval=self.noise_interval,
            initial_state=None if self.initial_state is None else np.array(self.initial_state),
            seed=seed,
        )


class SchemeConfig(_Section):
    horizon: int = Field(default=10, ge=1)
    gamma: float = Field(default=0.9, gt=0.0, le=1.0)
    input_lb: list[float] = Field(default_factory=lambda: [-1.0])
    input_ub: list[float] = Field(default_factory=lambda: [1.0])
    slack_regularization: float = Field(default=DEFAULT_SLACK_REGULARIZATION, gt=0.0)
    terminal_weight: float = Field(default=0.0, ge=0.0)
    discount_linear_cost: bool = False
    initial_model: Literal["nominal", "true", "sampled"] = "nominal"

    def initial_params(self, topology: GraphTopology, seed: Optional[int]) -> list[AgentParams]:
        """Learnable parameters with zero offsets and the chosen starting model."""
        rng = np.random.default_rng(seed)
        params = []
        for neighbors in topology.neighborhoods:
            if self.initial_model == "true":
                model = true_dynamics(neighbors)
            elif self.initial_model == "sampled":
                model = sample_inaccurate_model(rng, neighbors)
            else:
                model = nominal_model(neighbors)
            params.append(AgentParams(dynamics=model))
        return params

    def build(
        self,
        topology: GraphTopology,
        environment: EnvironmentConfig,
        params: Optional[list[AgentParams]] = None,
        seed: Optional[int] = None,
    ) -> MpcScheme:
        return MpcScheme(
            topology=topology,
            params=params if params is not None else self.initial_params(topology, seed),
            horizon=self.horizon,
            gamma=self.gamma,
            omega=np.array(environment.omega),
            state_lb=np.array(environment.state_lb),
            state_ub=np.array(environment.state_ub),
            input_lb=np.array(self.input_lb),
            input_ub=np.array(self.input_ub),
            slack_regularization=self.slack_regularization,
            terminal_weight=self.terminal_weight,
            discount_linear_cost=self.discount_linear_cost,
        )


class AdmmConfig(_Section):
    iterations: int = Field(default=50, ge=1)
    gac_iterations: int = Field(default=100, ge=0)
    rho: float = Field(default=0.5, gt=0.0)


class LearnerSection(LearnerConfig):
    model_config = ConfigDict(extra="forbid")


class TrainingConfig(_Section):
    steps: int = Field(default=5000, ge=0)
    qp_tolerance: Optional[float] = Field(default=None, gt=0.0)


class DualCheckConfig(_Section):
    state: Optional[list[list[float]]] = None
    iterations: list[int] = Field(default_factory=lambda: list(DEFAULT_DUAL_CHECK_ITERATIONS))

    @model_validator(mode="after")
    def positive_iterations(self) -> "DualCheckConfig":
        if not self.iterations or min(self.iterations) < 1:
            raise ValueError("iterations must be a nonempty list of positive integers")
        self.iterations = sorted(set(self.iterations))
        return self


class CompareConfig(_Section):
    episodes: int = Field(default=20, ge=1)
    steps: int = Field(default=100, ge=1)
    scenario_count: int = Field(default=25, ge=1)
    theta_file: Optional[str] = None
    solver: Literal["centralized", "distributed"] = "centralized"
    randomize_start: bool = True
    controllers: list[Literal["trained", "nmpc", "smpc_inexact", "smpc_true"]] = Field(
        default_factory=lambda: list(CONTROLLERS)
    )
    qp_tolerance: Optional[float] = Field(default=None, gt=0.0)


class RunConfig(_Section):
    """Complete experiment description."""

    seed: int = 0
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    scheme: SchemeConfig = Field(default_factory=SchemeConfig)
    learner: LearnerSection = Field(default_factory=LearnerSection)
    admm: AdmmConfig = Field(default_factory=AdmmConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    dual_check: DualCheckConfig = Field(default_factory=DualCheckConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    output_dir: str = "runs/academic"
    plots: bool = True

    @model_validator(mode="after")
    def check_cross_sections(self) -> "RunConfig":
        """Validate shapes that span sections before any run starts."""
        try:
            topology = self.topology.build()
        except ValueError as exc:
            raise ValueError(f"topology: {exc}") from exc
        M, n = topology.num_agents, len(self.environment.state_lb)
        for name, state in (
            ("environment.initial_state", self.environment.initial_state),
            ("dual_check.state", self.dual_check.state),
        ):
            if state is not None and np.shape(state) != (M, n):
                raise ValueError(f"{name} must have shape ({M}, {n})")
        if len(self.scheme.input_lb) != len(self.scheme.input_ub):
            raise ValueError("scheme.input_lb and scheme.input_ub must have the same length")
        moved = sorted(self.learner.model_fields_set & set(_LEARNER_FIELDS_ELSEWHERE))
        if moved:
            where = ", ".join(f"learner.{k} -> {_LEARNER_FIELDS_ELSEWHERE[k]}" for k in moved)
            raise ValueError(f"set these keys in their own section: {where}")
        return self

    def learner_config(self) -> LearnerConfig:
        """Learner hyperparameters with the ADMM/GAC settings applied."""
        return LearnerConfig(
            **self.learner.model_dump(exclude=set(_LEARNER_FIELDS_ELSEWHERE)),
            admm_iterations=self.admm.iterations,
            gac_iterations=self.admm.gac_iterations,
            rho=self.admm.rho,
            gamma=self.scheme.gamma,
        )


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path: Path | str) -> RunConfig:
    """
    Read and validate a run configuration.

    Raises:
        ConfigError: Missing file, malformed YAML or invalid values; the
            message names the path or the offending dotted key
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"Malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Top level of {path} must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {path}: {_format_validation_error(exc)}") from exc
