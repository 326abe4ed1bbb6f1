"""
Evaluation of Q, V and the policy from the MPC scheme

Distributed evaluation runs consensus ADMM over the local QPs and agrees on
the global value with GAC. Centralized evaluation solves the monolithic QP
and is the reference for the distributed results.
"""
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from src.control.scheme import AgentLayout, MpcScheme, build_centralized_qp, build_local_qp
from src.dynamics.linsys import JointState
from src.network.topology import GraphTopology, gac_consensus
from src.optim.admm import DEFAULT_RHO, AdmmWorkspace, RoundCallback, admm_solve
from src.optim.qp import KktSolution, objective_value, solve
from src.utils.logging import get_logger

logger = get_logger(__name__)

AGREEMENT_TOLERANCE = 1e-8


@dataclass(eq=False)
class EvaluationResult:
    """
    Outcome of one Q or V evaluation.

    value is the mean of the per-agent estimates of sum_i F_i; with exact
    agreement every estimate equals it.
    """

    value: float
    local_objectives: np.ndarray
    first_inputs: np.ndarray
    solutions: list[KktSolution]
    layouts: list[AgentLayout]
    estimates: np.ndarray
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def policy(self) -> np.ndarray:
        return self.first_inputs

    def trajectories(self) -> list[dict[str, np.ndarray]]:
        return [layout.trajectory(sol.x_opt) for layout, sol in zip(self.layouts, self.solutions)]

    def predicted_states(self, agent: int) -> np.ndarray:
        """Agent's own predicted states x(0..N-1) of the first scenario, shape (N, n)."""
        layout = self.layouts[agent]
        return self.solutions[agent].x_opt[layout.x[0, :-1]]

    def neighbor_states(self, agent: int, neighbors: tuple[int, ...]) -> dict[int, np.ndarray]:
        """Predictions the agent receives from its neighbors after the solve."""
        return {j: self.predicted_states(j) for j in neighbors if j != agent}


def _as_states(scheme: MpcScheme, state: JointState | np.ndarray) -> np.ndarray:
    states = state.states if isinstance(state, JointState) else np.asarray(state, dtype=float)
    return states.reshape(scheme.num_agents, scheme.state_dim)


def _first_inputs(scheme: MpcScheme, solutions: list[KktSolution], layouts: list[AgentLayout]) -> np.ndarray:
    """u_i(0) for every agent, clipped onto the input box."""
    u0 = np.array([sol.x_opt[layout.u[0]] for sol, layout in zip(solutions, layouts)])
    return np.clip(u0, scheme.input_lb, scheme.input_ub)


def _evaluate_distributed(
    scheme: MpcScheme,
    topology: GraphTopology,
    state: JointState | np.ndarray,
    actions: Optional[np.ndarray],
    admm_iterations: int,
    gac_iterations: int,
    rho: float,
    tol: Optional[float],
    tilts: Optional[np.ndarray],
    warm_start: Optional[AdmmWorkspace],
    threads: int,
    callback: Optional[RoundCallback],
) -> EvaluationResult:
    if gac_iterations < 0:
        raise ValueError("gac_iterations must be nonnegative")
    states = _as_states(scheme, state)
    if actions is not None:
        actions = np.asarray(actions, dtype=float).reshape(scheme.num_agents, scheme.input_dim)
    subproblems = [
        build_local_qp(
            scheme,
            i,
            states[i],
            None if actions is None else actions[i],
            tilt=None if tilts is None else tilts[i],
        )
        for i in range(scheme.num_agents)
    ]
    result = admm_solve(
        subproblems,
        topology,
        rho,
        admm_iterations,
        tol=tol,
        warm_start=warm_start,
        threads=threads,
        callback=callback,
    )

    local = np.array([objective_value(sub.qp, x) for sub, x in zip(subproblems, result.primal)])
    estimates = gac_consensus(scheme.num_agents * local, topology, gac_iterations)
    value = float(np.mean(estimates))
    spread = float(np.max(estimates) - np.min(estimates))
    agreed = spread <= AGREEMENT_TOLERANCE * (1.0 + abs(value))
    if not agreed:
        logger.warning(f"GAC agreement not reached after {gac_iterations} rounds (spread {spread:.3e})")

    layouts = [sub.layout for sub in subproblems]
    return EvaluationResult(
        value=value,
        local_objectives=local,
        first_inputs=_first_inputs(scheme, result.solutions, layouts),
        solutions=result.solutions,
        layouts=layouts,
        estimates=estimates,
        diagnostics={
            "mode": "distributed",
            "admm_iterations": admm_iterations,
            "gac_iterations": gac_iterations,
            "primal_residual": result.trace[-1].primal_residual,
            "dual_residual": result.trace[-1].dual_residual,
            "consensus_spread": spread,
            "agreement_reached": agreed,
            "admm": result,
        },
    )


def evaluate_q_distributed(
    scheme: MpcScheme,
    topology: GraphTopology,
    state: JointState | np.ndarray,
    actions: np.ndarray,
    admm_iterations: int = 50,
    gac_iterations: int = 100,
    rho: float = DEFAULT_RHO,
    *,
    tol: Optional[float] = None,
    warm_start: Optional[AdmmWorkspace] = None,
    threads: int = 1,
    callback: Optional[RoundCallback] = None,
) -> EvaluationResult:
    """Q(s, a) by consensus ADMM with u_i(0) = a_i fixed, agreed by GAC."""
    return _evaluate_distributed(
        scheme, topology, state, actions, admm_iterations, gac_iterations, rho,
        tol, None, warm_start, threads, callback,
    )


def evaluate_v_and_policy_distributed(
    scheme: MpcScheme,
    topology: GraphTopology,
    state: JointState | np.ndarray,
    admm_iterations: int = 50,
    gac_iterations: int = 100,
    rho: float = DEFAULT_RHO,
    *,
    tol: Optional[float] = None,
    tilts: Optional[np.ndarray] = None,
    warm_start: Optional[AdmmWorkspace] = None,
    threads: int = 1,
    callback: Optional[RoundCallback] = None,
) -> EvaluationResult:
    """V(s) and the local policy inputs u_i(0) by consensus ADMM."""
    return _evaluate_distributed(
        scheme, topology, state, None, admm_iterations, gac_iterations, rho,
        tol, tilts, warm_start, threads, callback,
    )


def evaluate_centralized(
    scheme: MpcScheme,
    state: JointState | np.ndarray,
    actions: Optional[np.ndarray] = None,
    *,
    tol: Optional[float] = None,
    tilts: Optional[np.ndarray] = None,
) -> EvaluationResult:
    """
    Exact Q (actions given) or V and policy from the monolithic QP.

    Per-agent solutions are returned in the local layout: neighbor copies
    hold the neighbors' optimal states and the multipliers are the agent's
    rows of the joint problem.
    """
    states = _as_states(scheme, state)
    if actions is not None:
        actions = np.asarray(actions, dtype=float).reshape(scheme.num_agents, scheme.input_dim)
    qp, central_layouts = build_centralized_qp(scheme, states, actions, tilts)
    joint = solve(qp, tol)

    solutions: list[KktSolution] = []
    layouts: list[AgentLayout] = []
    local_values = np.zeros(scheme.num_agents)
    for i, central in enumerate(central_layouts):
        local_layout = scheme.layout(i, with_action=actions is not None)
        x_local = np.zeros(local_layout.var_stop)
        for name in ("x", "u", "sigma"):
            x_local[getattr(local_layout, name)] = joint.x_opt[getattr(central, name)]
        for j, idx in local_layout.copies.items():
            x_local[idx] = joint.x_opt[central_layouts[j].x[:, :-1]]

        local_qp = build_local_qp(
            scheme,
            i,
            states[i],
            None if actions is None else actions[i],
            tilt=None if tilts is None else tilts[i],
        ).qp
        local_values[i] = objective_value(local_qp, x_local)
        solutions.append(
            KktSolution(
                x_opt=x_local,
                eq_duals=joint.eq_duals[central.eq_rows].copy(),
                ineq_duals=joint.ineq_duals[central.ineq_rows].copy(),
                objective=local_values[i],
                kkt_residual=joint.kkt_residual,
                iterations=joint.iterations,
                method=joint.method,
            )
        )
        layouts.append(local_layout)

    return EvaluationResult(
        value=joint.objective,
        local_objectives=local_values,
        first_inputs=_first_inputs(scheme, solutions, layouts),
        solutions=solutions,
        layouts=layouts,
        estimates=np.full(scheme.num_agents, joint.objective),
        diagnostics={
            "mode": "centralized",
            "kkt_residual": joint.kkt_residual,
            "consensus_spread": 0.0,
            "agreement_reached": True,
            "joint_solution": joint,
        },
    )
