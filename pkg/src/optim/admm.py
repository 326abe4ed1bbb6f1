"""
Consensus ADMM over an agent network

Each agent optimizes over its own variables plus local copies of the
neighbor variables it depends on. Every synchronous round runs the local QP
solves, averages each shared variable over its owner and all copiers, and
updates the consensus multipliers.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from src.network.topology import GraphTopology
from src.optim.qp import KktSolution, QuadProgram, objective_value, solve
from src.utils.logging import get_logger
from src.utils.metrics import admm_primal_residual, admm_rounds_total

logger = get_logger(__name__)

DEFAULT_RHO = 0.5
DIVERGENCE_WINDOW = 20
DIVERGENCE_GROWTH = 10.0
DIVERGENCE_FLOOR = 1e-8


class ConsensusError(Exception):
    """Base class for consensus failures."""


class DivergenceDetected(ConsensusError):
    """Primal residual keeps growing."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class ConsensusBlock:
    """One block of an augmented vector: the shared variables of `owner`."""

    owner: int
    span: slice


@dataclass(eq=False)
class LocalSubproblem:
    """
    Agent-local QP without consensus terms, plus its consensus layout.

    consensus_index picks the augmented vector x~_i out of the QP variables:
    own block first, then neighbor copies in ascending neighbor index.
    """

    agent: int
    qp: QuadProgram
    consensus_index: np.ndarray
    blocks: tuple[ConsensusBlock, ...]
    layout: object = None

    def __post_init__(self) -> None:
        self.consensus_index = np.asarray(self.consensus_index, dtype=int)
        if len(set(self.consensus_index.tolist())) != self.consensus_index.size:
            raise ValueError("consensus_index must not repeat variables")
        if self.blocks[0].owner != self.agent:
            raise ValueError("First consensus block must be the agent's own")
        owners = [blk.owner for blk in self.blocks[1:]]
        if owners != sorted(owners):
            raise ValueError("Neighbor copy blocks must be in ascending order")
        if self.blocks[-1].span.stop != self.consensus_index.size:
            raise ValueError("Blocks must cover the augmented vector")

    @property
    def augmented_size(self) -> int:
        return self.consensus_index.size

    def with_admm_terms(self, y: np.ndarray, z: np.ndarray, rho: float | np.ndarray) -> QuadProgram:
        """
        Local objective plus y'x~ + rho/2 ||x~ - z~||^2.

        rho may be given per entry of x~; zero entries leave that variable
        out of the consensus terms.
        """
        idx = self.consensus_index
        d = self.qp.num_vars
        penalty = np.zeros(d)
        penalty[idx] = rho
        if sp.issparse(self.qp.H):
            H = self.qp.H + sp.diags(penalty)
        else:
            H = self.qp.H + np.diag(penalty)
        g = self.qp.g.copy()
        g[idx] += y - rho * z
        c0 = self.qp.c0 + 0.5 * float(np.sum(rho * z * z))
        return QuadProgram(
            H=H, g=g, c0=c0,
            Aeq=self.qp.Aeq, beq=self.qp.beq,
            Aineq=self.qp.Aineq, bineq=self.qp.bineq,
        )


@dataclass(eq=False)
class AdmmWorkspace:
    """
    Per-agent augmented primal x~_i, global copies z~_i and multipliers y_i,
    all sharing the block layout of the agent's subproblem.
    """

    blocks: list[tuple[ConsensusBlock, ...]]
    x: list[np.ndarray]
    z: list[np.ndarray]
    y: list[np.ndarray]
    rho: float
    iteration: int = 0
    z_previous: Optional[list[np.ndarray]] = None

    @classmethod
    def cold(cls, subproblems: Sequence[LocalSubproblem], rho: float) -> "AdmmWorkspace":
        """Zero copies, global variables and multipliers."""
        zeros = [np.zeros(sub.augmented_size) for sub in subproblems]
        return cls(
            blocks=[sub.blocks for sub in subproblems],
            x=[v.copy() for v in zeros],
            z=[v.copy() for v in zeros],
            y=[v.copy() for v in zeros],
            rho=rho,
        )

    @property
    def num_agents(self) -> int:
        return len(self.blocks)

    def holders(self, owner: int) -> list[tuple[int, slice]]:
        """(agent, span) of every block referencing `owner`'s variables."""
        return [
            (i, blk.span)
            for i, agent_blocks in enumerate(self.blocks)
            for blk in agent_blocks
            if blk.owner == owner
        ]

    def average(self) -> None:
        """z-update: each shared variable is the mean over owner and copiers."""
        self.z_previous = [v.copy() for v in self.z]
        for owner in range(self.num_agents):
            holders = self.holders(owner)
            mean = sum(self.x[i][span] for i, span in holders) / len(holders)
            for i, span in holders:
                self.z[i][span] = mean

    def update_multipliers(self) -> None:
        for i in range(self.num_agents):
            self.y[i] += self.rho * (self.x[i] - self.z[i])

    def multiplier_sums(self) -> dict[int, np.ndarray]:
        """Sum of the multiplier blocks referencing each owner's variables."""
        return {
            owner: sum(self.y[i][span] for i, span in self.holders(owner))
            for owner in range(self.num_agents)
        }

    def copy(self) -> "AdmmWorkspace":
        return AdmmWorkspace(
            blocks=list(self.blocks),
            x=[v.copy() for v in self.x],
            z=[v.copy() for v in self.z],
            y=[v.copy() for v in self.y],
            rho=self.rho,
            iteration=self.iteration,
        )


def primal_residual(workspace: AdmmWorkspace) -> float:
    """||x~ - z~|| stacked over agents."""
    diffs = [x - z for x, z in zip(workspace.x, workspace.z)]
    return float(np.linalg.norm(np.concatenate(diffs))) if diffs else 0.0


def dual_residual(workspace: AdmmWorkspace) -> float:
    """rho ||z~(k+1) - z~(k)|| stacked over agents."""
    if workspace.z_previous is None:
        return 0.0
    diffs = [z - zp for z, zp in zip(workspace.z, workspace.z_previous)]
    return float(workspace.rho * np.linalg.norm(np.concatenate(diffs)))


@dataclass
class AdmmTraceRow:
    iteration: int
    primal_residual: float
    dual_residual: float
    objective: float


@dataclass(eq=False)
class AdmmResult:
    """Final local primal vectors, local KKT solutions and residual trace."""

    primal: list[np.ndarray]
    solutions: list[KktSolution]
    workspace: AdmmWorkspace
    trace: list[AdmmTraceRow] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.trace[-1].objective if self.trace else float("nan")

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(row) for row in self.trace],
            columns=["iteration", "primal_residual", "dual_residual", "objective"],
        )

    def export_trace(self, path: Path) -> None:
        """Write the residual trace as CSV."""
        path.parent.mkdir(parents=True, exist_ok=True)
        self.trace_frame().to_csv(path, index=False, float_format="%.17g")


RoundCallback = Callable[[int, AdmmWorkspace, list[KktSolution]], None]


def admm_solve(
    subproblems: Sequence[LocalSubproblem],
    topology: GraphTopology,
    rho: float = DEFAULT_RHO,
    iterations: int = 50,
    *,
    tol: Optional[float] = None,
    warm_start: Optional[AdmmWorkspace] = None,
    threads: int = 1,
    callback: Optional[RoundCallback] = None,
) -> AdmmResult:
    """
    Run synchronous consensus ADMM rounds.

    Args:
        subproblems: One local QP per agent, ascending agent index
        topology: Agent network; every copied agent must be a neighbor
        rho: Penalty parameter
        iterations: Number of rounds T_A
        tol: QP tolerance for the local solves
        warm_start: Workspace to start from instead of zeros
        threads: Worker threads for the local solves of one round
        callback: Called after every round with (iteration, workspace, solutions)

    Returns:
        AdmmResult of the final round

    Raises:
        DivergenceDetected: Primal residual grew over a long run of rounds
        QpError: A local solve failed
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    if len(subproblems) != topology.num_agents:
        raise ValueError(f"Expected {topology.num_agents} subproblems, got {len(subproblems)}")
    for i, sub in enumerate(subproblems):
        copied = {blk.owner for blk in sub.blocks[1:]}
        if sub.agent != i or not copied <= set(topology.neighborhoods[i]):
            raise ValueError(f"Subproblem {i} does not match the topology neighborhood")

    if warm_start is not None:
        workspace = warm_start.copy()
        workspace.rho = rho
        workspace.iteration = 0
    else:
        workspace = AdmmWorkspace.cold(subproblems, rho)

    trace: list[AdmmTraceRow] = []
    solutions: list[Optional[KktSolution]] = [None] * len(subproblems)
    increasing_run = 0
    run_start = np.inf

    # variables nobody else copies need no consensus terms
    shared = {blk.owner for sub in subproblems for blk in sub.blocks[1:]}
    penalties = [
        np.concatenate([
            np.full(blk.span.stop - blk.span.start, rho if blk.owner in shared else 0.0)
            for blk in sub.blocks
        ])
        for sub in subproblems
    ]

    def local_step(i: int) -> KktSolution:
        sub = subproblems[i]
        qp = sub.with_admm_terms(workspace.y[i], workspace.z[i], penalties[i])
        previous = solutions[i]
        return solve(
            qp,
            tol,
            warm_active=previous.active_set if previous is not None else None,
            check_convexity="auto" if previous is None else False,
        )

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for tau in range(1, iterations + 1):
            if executor is not None:
                solutions = list(executor.map(local_step, range(len(subproblems))))
            else:
                solutions = [local_step(i) for i in range(len(subproblems))]

            for i, (sub, sol) in enumerate(zip(subproblems, solutions)):
                workspace.x[i] = sol.x_opt[sub.consensus_index].copy()
            workspace.average()
            workspace.update_multipliers()
            workspace.iteration = tau
            admm_rounds_total.inc()

            r_primal = primal_residual(workspace)
            objective = sum(
                objective_value(sub.qp, sol.x_opt) for sub, sol in zip(subproblems, solutions)
            )
            trace.append(AdmmTraceRow(tau, r_primal, dual_residual(workspace), objective))
            admm_primal_residual.set(r_primal)

            if callback is not None:
                callback(tau, workspace, solutions)

            if len(trace) > 1 and r_primal > trace[-2].primal_residual:
                if increasing_run == 0:
                    run_start = trace[-2].primal_residual
                increasing_run += 1
            else:
                increasing_run = 0
            if (
                increasing_run >= DIVERGENCE_WINDOW
                and r_primal > DIVERGENCE_GROWTH * run_start
                and r_primal > DIVERGENCE_FLOOR
            ):
                raise DivergenceDetected(
                    f"Primal residual grew from {run_start:.3e} to {r_primal:.3e} "
                    f"over {increasing_run} rounds",
                    iteration=tau,
                )
    finally:
        if executor is not None:
            executor.shutdown()

    logger.debug(
        f"ADMM finished {iterations} rounds: primal {trace[-1].primal_residual:.3e}, "
        f"dual {trace[-1].dual_residual:.3e}"
    )
    return AdmmResult(
        primal=[sol.x_opt for sol in solutions],
        solutions=list(solutions),
        workspace=workspace,
        trace=trace,
    )
