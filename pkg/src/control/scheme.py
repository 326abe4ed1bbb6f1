"""
Parametrized distributed MPC scheme

Builds the per-agent QPs evaluated by consensus ADMM and the monolithic QP
over all agents used as the centralized reference. Both share one variable
and row layout per agent, so multipliers can be mapped between them.

Per agent and scenario s the decision variables are ordered
    x(s, 0..N), u(0..N-1) shared across scenarios, sigma(s, 0..N-1)
followed, in local QPs only, by copies x_j(s, 0..N-1) of each neighbor j
whose coupling block A_ij is nonzero in some scenario.

Equality rows: x(s, 0) = s_i, [u(0) = a_i], dynamics for every (s, k).
Inequality rows: soft lower bounds, soft upper bounds, input upper bounds,
input lower bounds, sigma >= 0.
"""
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from src.config import settings
from src.dynamics.linsys import AgentParams, DynamicsParams, JointState
from src.network.topology import GraphTopology
from src.optim.admm import ConsensusBlock, LocalSubproblem
from src.optim.qp import QuadProgram

DEFAULT_SLACK_REGULARIZATION = 1e-6


@dataclass(eq=False)
class MpcScheme:
    """
    Learnable MPC scheme over a network of agents.

    The stage cost of agent i is
        f_i'[x; u] + 0.5 gamma^k (||x||^2 + 0.5 ||u||^2 + omega' sigma)
    with soft state bounds state_lb + x_lb_i - sigma <= x <= state_ub + x_ub_i + sigma
    and hard input bounds. Scenario schemes average the state-dependent terms
    over scenarios that share the input sequence.
    """

    topology: GraphTopology
    params: list[AgentParams]
    horizon: int = 10
    gamma: float = 0.9
    omega: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0]))
    state_lb: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0]))
    state_ub: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    input_lb: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    input_ub: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    slack_regularization: float = DEFAULT_SLACK_REGULARIZATION
    terminal_weight: float = 0.0
    discount_linear_cost: bool = False
    # scenario_models[s][i] overrides the learnable dynamics of agent i
    scenario_models: Optional[list[list[DynamicsParams]]] = None
    # additive disturbances, shape (S, M, N, n)
    disturbances: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        """Validate dimensions against the topology."""
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.slack_regularization <= 0.0:
            raise ValueError("slack_regularization must be positive")
        if self.terminal_weight < 0.0:
            raise ValueError("terminal_weight must be nonnegative")
        if len(self.params) != self.topology.num_agents:
            raise ValueError(
                f"Expected parameters for {self.topology.num_agents} agents, got {len(self.params)}"
            )
        n, m = self.params[0].state_dim, self.params[0].input_dim
        for i, p in enumerate(self.params):
            if (p.state_dim, p.input_dim) != (n, m):
                raise ValueError(f"Agent {i} has dimensions ({p.state_dim}, {p.input_dim}), expected ({n}, {m})")
            if p.dynamics.neighbors != self.topology.neighborhoods[i]:
                raise ValueError(
                    f"Agent {i} model couples to {list(p.dynamics.neighbors)}, "
                    f"topology neighborhood is {list(self.topology.neighborhoods[i])}"
                )
        self.omega = _vector(self.omega, n, "omega")
        self.state_lb = _vector(self.state_lb, n, "state_lb")
        self.state_ub = _vector(self.state_ub, n, "state_ub")
        self.input_lb = _vector(self.input_lb, m, "input_lb")
        self.input_ub = _vector(self.input_ub, m, "input_ub")
        if np.any(self.input_lb > self.input_ub):
            raise ValueError("input_lb must not exceed input_ub")
        if np.any(self.omega < 0.0):
            raise ValueError("omega must be nonnegative")

        if self.scenario_models is not None:
            for s, models in enumerate(self.scenario_models):
                if len(models) != self.num_agents:
                    raise ValueError(f"Scenario {s} must hold one model per agent")
                for i, model in enumerate(models):
                    if model.neighbors != self.topology.neighborhoods[i]:
                        raise ValueError(f"Scenario {s} model of agent {i} has the wrong neighborhood")
        if self.disturbances is not None:
            self.disturbances = np.asarray(self.disturbances, dtype=float)
            expected = (self.num_scenarios, self.num_agents, self.horizon, n)
            if self.disturbances.shape != expected:
                raise ValueError(f"disturbances must have shape {expected}, got {self.disturbances.shape}")

    @property
    def num_agents(self) -> int:
        return self.topology.num_agents

    @property
    def state_dim(self) -> int:
        return self.params[0].state_dim

    @property
    def input_dim(self) -> int:
        return self.params[0].input_dim

    @property
    def num_scenarios(self) -> int:
        if self.scenario_models is not None:
            return len(self.scenario_models)
        if self.disturbances is not None:
            return self.disturbances.shape[0]
        return 1

    def model(self, agent: int, scenario: int = 0) -> DynamicsParams:
        if self.scenario_models is not None:
            return self.scenario_models[scenario][agent]
        return self.params[agent].dynamics

    def disturbance(self, agent: int, scenario: int = 0) -> np.ndarray:
        """Additive disturbance sequence (N, n) of one agent in one scenario."""
        if self.disturbances is None:
            return np.zeros((self.horizon, self.state_dim))
        return self.disturbances[scenario, agent]

    def with_params(self, params: Sequence[AgentParams]) -> "MpcScheme":
        return replace(self, params=list(params))

    def with_scenarios(
        self,
        models: Optional[list[list[DynamicsParams]]],
        disturbances: Optional[np.ndarray],
    ) -> "MpcScheme":
        return replace(self, scenario_models=models, disturbances=disturbances)

    def coupled_neighbors(self, agent: int) -> tuple[int, ...]:
        """Neighbors whose states enter the agent's dynamics with a nonzero block."""
        models = (
            [self.params[agent].dynamics]
            if self.scenario_models is None
            else [models[agent] for models in self.scenario_models]
        )
        return tuple(
            j for j in self.topology.neighborhoods[agent]
            if any(np.any(model.A_neighbors[j] != 0.0) for model in models)
        )

    def layout(self, agent: int, with_action: bool, copies: bool = True) -> "AgentLayout":
        """Local layout of one agent, starting at variable and row 0."""
        neighbors = self.coupled_neighbors(agent) if copies else ()
        return AgentLayout.build(self, agent, neighbors, with_action, 0, 0, 0)


@dataclass(eq=False)
class AgentLayout:
    """
    Variable and row indices of one agent inside a QP.

    Variable arrays hold QP column indices with shapes
    x (S, N+1, n), u (N, m), sigma (S, N, n), copies[j] (S, N, n).
    Row arrays hold absolute equality / inequality row indices.
    """

    agent: int
    with_action: bool
    x: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    copies: dict[int, np.ndarray]
    eq_init: np.ndarray
    eq_action: Optional[np.ndarray]
    eq_dynamics: np.ndarray
    ineq_lower: np.ndarray
    ineq_upper: np.ndarray
    ineq_input_upper: np.ndarray
    ineq_input_lower: np.ndarray
    ineq_slack: np.ndarray
    var_stop: int
    eq_rows: slice
    ineq_rows: slice

    @classmethod
    def build(
        cls,
        scheme: MpcScheme,
        agent: int,
        copy_neighbors: Sequence[int],
        with_action: bool,
        var_offset: int,
        eq_offset: int,
        ineq_offset: int,
    ) -> "AgentLayout":
        S, N = scheme.num_scenarios, scheme.horizon
        n, m = scheme.state_dim, scheme.input_dim
        cursor = {"var": var_offset, "eq": eq_offset, "ineq": ineq_offset}

        def take(kind: str, shape: tuple[int, ...]) -> np.ndarray:
            size = int(np.prod(shape))
            idx = np.arange(cursor[kind], cursor[kind] + size).reshape(shape)
            cursor[kind] += size
            return idx

        x = take("var", (S, N + 1, n))
        u = take("var", (N, m))
        sigma = take("var", (S, N, n))
        copies = {j: take("var", (S, N, n)) for j in sorted(copy_neighbors)}

        eq_init = take("eq", (S, n))
        eq_action = take("eq", (m,)) if with_action else None
        eq_dynamics = take("eq", (S, N, n))

        ineq_lower = take("ineq", (S, N, n))
        ineq_upper = take("ineq", (S, N, n))
        ineq_input_upper = take("ineq", (N, m))
        ineq_input_lower = take("ineq", (N, m))
        ineq_slack = take("ineq", (S, N, n))

        return cls(
            agent=agent,
            with_action=with_action,
            x=x, u=u, sigma=sigma, copies=copies,
            eq_init=eq_init, eq_action=eq_action, eq_dynamics=eq_dynamics,
            ineq_lower=ineq_lower, ineq_upper=ineq_upper,
            ineq_input_upper=ineq_input_upper, ineq_input_lower=ineq_input_lower,
            ineq_slack=ineq_slack,
            var_stop=cursor["var"],
            eq_rows=slice(eq_offset, cursor["eq"]),
            ineq_rows=slice(ineq_offset, cursor["ineq"]),
        )

    @property
    def var_start(self) -> int:
        return int(self.x.flat[0])

    @property
    def consensus_index(self) -> np.ndarray:
        """Own shared states x(:, 0..N-1), then neighbor copies ascending."""
        parts = [self.x[:, :-1].ravel()] + [self.copies[j].ravel() for j in sorted(self.copies)]
        return np.concatenate(parts)

    def consensus_blocks(self) -> tuple[ConsensusBlock, ...]:
        size = self.x[:, :-1].size
        owners = [self.agent] + sorted(self.copies)
        return tuple(ConsensusBlock(owner, slice(k * size, (k + 1) * size)) for k, owner in enumerate(owners))

    def trajectory(self, x_opt: np.ndarray) -> dict[str, np.ndarray]:
        """Optimal trajectories read from a primal vector."""
        out = {"x": x_opt[self.x], "u": x_opt[self.u], "sigma": x_opt[self.sigma]}
        for j, idx in self.copies.items():
            out[f"x_{j}"] = x_opt[idx]
        return out


class _RowBlock:
    """Sparse constraint rows accumulated as COO triplets."""

    def __init__(self) -> None:
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.rhs: list[np.ndarray] = []
        self.count = 0

    def add(self, terms: Sequence[tuple[np.ndarray, np.ndarray]], rhs: np.ndarray) -> None:
        """Append len(rhs) rows; each term is (columns, coefficient matrix)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        row_ids = np.arange(self.count, self.count + rhs.size)
        for cols, coeffs in terms:
            coeffs = np.asarray(coeffs, dtype=float).reshape(rhs.size, -1)
            rr, cc = np.meshgrid(row_ids, np.asarray(cols).ravel(), indexing="ij")
            mask = coeffs != 0.0
            self.rows.append(rr[mask])
            self.cols.append(cc[mask])
            self.vals.append(coeffs[mask])
        self.rhs.append(rhs)
        self.count += rhs.size

    def matrix(self, num_vars: int) -> tuple[sp.csr_matrix, np.ndarray]:
        if not self.rhs:
            return sp.csr_matrix((0, num_vars)), np.zeros(0)
        M = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.count, num_vars),
        ).tocsr()
        return M, np.concatenate(self.rhs)


class _Assembler:
    """Collects a diagonal Hessian, linear cost and constraint rows."""

    def __init__(self, scheme: MpcScheme, num_vars: int):
        self.scheme = scheme
        self.num_vars = num_vars
        self.h = np.zeros(num_vars)
        self.g = np.zeros(num_vars)
        self.c0 = 0.0
        self.eq = _RowBlock()
        self.ineq = _RowBlock()

    def add_agent(
        self,
        layout: AgentLayout,
        s_i: np.ndarray,
        a_i: Optional[np.ndarray],
        tilt: Optional[np.ndarray],
        neighbor_states: dict[int, np.ndarray],
    ) -> None:
        """
        Add one agent's cost and constraints.

        neighbor_states maps each coupled neighbor j to the columns (S, N, n)
        holding x_j(s, k) in this QP: local copies or the neighbor's own variables.
        """
        scheme = self.scheme
        i = layout.agent
        theta = scheme.params[i]
        S, N = scheme.num_scenarios, scheme.horizon
        n, m = scheme.state_dim, scheme.input_dim
        w = 1.0 / S
        eye_n = np.eye(n)
        if layout.eq_rows.start != self.eq.count or layout.ineq_rows.start != self.ineq.count:
            raise ValueError("Agents must be added in layout order")

        # Cost
        self.c0 += theta.V0
        f_x, f_u = theta.f[:n], theta.f[n:]
        for k in range(N):
            gk = scheme.gamma ** k
            linear = gk if scheme.discount_linear_cost else 1.0
            self.h[layout.x[:, k]] += gk * w
            self.g[layout.x[:, k]] += linear * w * f_x
            self.h[layout.u[k]] += 0.5 * gk
            self.g[layout.u[k]] += linear * f_u
            self.g[layout.sigma[:, k]] += 0.5 * gk * w * scheme.omega
            self.h[layout.sigma[:, k]] += 2.0 * scheme.slack_regularization
        if scheme.terminal_weight:
            self.h[layout.x[:, N]] += scheme.gamma ** N * w * scheme.terminal_weight
        if tilt is not None:
            self.g[layout.u[0]] += np.asarray(tilt, dtype=float).reshape(m)

        # Equalities
        for s in range(S):
            self.eq.add([(layout.x[s, 0], eye_n)], s_i)
        if layout.with_action:
            self.eq.add([(layout.u[0], np.eye(m))], np.asarray(a_i, dtype=float).reshape(m))
        for s in range(S):
            model = scheme.model(i, s)
            disturbance = scheme.disturbance(i, s)
            for k in range(N):
                terms = [
                    (layout.x[s, k + 1], eye_n),
                    (layout.x[s, k], -model.A),
                    (layout.u[k], -model.B),
                ]
                for j, Aij in model.A_neighbors.items():
                    if not np.any(Aij != 0.0):
                        continue
                    terms.append((neighbor_states[j][s, k], -Aij))
                self.eq.add(terms, model.b + disturbance[k])

        # Inequalities
        lower = scheme.state_lb + theta.x_lb_shift
        upper = scheme.state_ub + theta.x_ub_shift
        for s in range(S):
            for k in range(N):
                self.ineq.add([(layout.x[s, k], -eye_n), (layout.sigma[s, k], -eye_n)], -lower)
        for s in range(S):
            for k in range(N):
                self.ineq.add([(layout.x[s, k], eye_n), (layout.sigma[s, k], -eye_n)], upper)
        for k in range(N):
            self.ineq.add([(layout.u[k], np.eye(m))], scheme.input_ub)
        for k in range(N):
            self.ineq.add([(layout.u[k], -np.eye(m))], -scheme.input_lb)
        for s in range(S):
            for k in range(N):
                self.ineq.add([(layout.sigma[s, k], -eye_n)], np.zeros(n))

        if self.eq.count != layout.eq_rows.stop or self.ineq.count != layout.ineq_rows.stop:
            raise RuntimeError("Row layout out of sync with assembled constraints")

    def quad_program(self) -> QuadProgram:
        Aeq, beq = self.eq.matrix(self.num_vars)
        Aineq, bineq = self.ineq.matrix(self.num_vars)
        H = sp.diags(self.h, format="csr")
        if self.num_vars <= settings.qp_dense_threshold:
            H, Aeq, Aineq = H.toarray(), Aeq.toarray(), Aineq.toarray()
        return QuadProgram(H=H, g=self.g, c0=self.c0, Aeq=Aeq, beq=beq, Aineq=Aineq, bineq=bineq)


def build_local_qp(
    scheme: MpcScheme,
    agent: int,
    s_i: np.ndarray,
    a_i: Optional[np.ndarray] = None,
    admm_terms: Optional[tuple[np.ndarray, np.ndarray, float]] = None,
    tilt: Optional[np.ndarray] = None,
) -> LocalSubproblem:
    """
    Agent-local QP with copies of the neighbor states its dynamics depend on.

    Args:
        scheme: MPC scheme
        agent: Agent index
        s_i: Local state, fixes x(s, 0)
        a_i: Local action; adds u(0) = a_i (Q variant) when given
        admm_terms: Optional (y_i, z_i, rho) folded into the returned QP
        tilt: Optional linear cost on u(0) used for exploration

    Returns:
        LocalSubproblem whose layout attribute is the AgentLayout
    """
    if not 0 <= agent < scheme.num_agents:
        raise ValueError(f"Unknown agent {agent}")
    s_i = _vector(s_i, scheme.state_dim, "s_i")
    if a_i is not None:
        a_i = _vector(a_i, scheme.input_dim, "a_i")
    layout = scheme.layout(agent, with_action=a_i is not None)
    assembler = _Assembler(scheme, layout.var_stop)
    assembler.add_agent(layout, s_i, a_i, tilt, layout.copies)
    subproblem = LocalSubproblem(
        agent=agent,
        qp=assembler.quad_program(),
        consensus_index=layout.consensus_index,
        blocks=layout.consensus_blocks(),
        layout=layout,
    )
    if admm_terms is not None:
        y, z, rho = admm_terms
        subproblem.qp = subproblem.with_admm_terms(np.asarray(y), np.asarray(z), float(rho))
    return subproblem


def build_centralized_qp(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    actions: Optional[np.ndarray] = None,
    tilts: Optional[np.ndarray] = None,
) -> tuple[QuadProgram, list[AgentLayout]]:
    """
    Monolithic QP over all agents, agents ascending, without copies.

    Returns:
        The QP and each agent's layout inside it
    """
    states = state.states if isinstance(state, JointState) else np.asarray(state, dtype=float)
    states = states.reshape(scheme.num_agents, scheme.state_dim)
    if actions is not None:
        actions = np.asarray(actions, dtype=float).reshape(scheme.num_agents, scheme.input_dim)

    layouts: list[AgentLayout] = []
    var, eq, ineq = 0, 0, 0
    for i in range(scheme.num_agents):
        layout = AgentLayout.build(scheme, i, (), actions is not None, var, eq, ineq)
        layouts.append(layout)
        var, eq, ineq = layout.var_stop, layout.eq_rows.stop, layout.ineq_rows.stop

    assembler = _Assembler(scheme, var)
    for i, layout in enumerate(layouts):
        neighbor_states = {j: layouts[j].x[:, :-1] for j in scheme.topology.neighborhoods[i]}
        assembler.add_agent(
            layout,
            states[i],
            None if actions is None else actions[i],
            None if tilts is None else tilts[i],
            neighbor_states,
        )
    return assembler.quad_program(), layouts


def _vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have length {size}, got {arr.shape}")
    return arr
