"""
Agent coupling graph and global average consensus (GAC)
"""
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from src.utils.logging import get_logger
from src.utils.metrics import gac_rounds_total

logger = get_logger(__name__)

STOCHASTIC_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """
    Coupling graph between agents.

    An edge (i, j) means agent i affects the cost or dynamics of agent j, so
    i belongs to the neighborhood of j. Agents are indexed from 0.
    """

    num_agents: int
    edges: frozenset[tuple[int, int]]
    neighborhoods: tuple[tuple[int, ...], ...]
    consensus_matrix: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        """Validate graph and consensus matrix invariants."""
        if self.num_agents < 1:
            raise ValueError("num_agents must be positive")
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"Self-loop ({i}, {i}) is not allowed")
            if not (0 <= i < self.num_agents and 0 <= j < self.num_agents):
                raise ValueError(f"Edge ({i}, {j}) references an unknown agent")

        graph = self.communication_graph()
        if not nx.is_connected(graph):
            raise ValueError("Coupling graph must be connected")

        P = self.consensus_matrix
        if P.shape != (self.num_agents, self.num_agents):
            raise ValueError("consensus_matrix must be M x M")
        if np.any(P < 0.0):
            raise ValueError("consensus_matrix entries must be nonnegative")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > STOCHASTIC_TOLERANCE:
            raise ValueError("consensus_matrix rows must sum to 1")
        if np.max(np.abs(P.sum(axis=0) - 1.0)) > STOCHASTIC_TOLERANCE:
            raise ValueError("consensus_matrix columns must sum to 1")
        for i, j in zip(*np.nonzero(P)):
            if i != j and not graph.has_edge(int(i), int(j)):
                raise ValueError(f"consensus_matrix[{i}, {j}] is nonzero without an edge")

    def communication_graph(self) -> nx.Graph:
        """Undirected graph of agent pairs allowed to exchange messages."""
        graph = nx.Graph()
        graph.add_nodes_from(range(self.num_agents))
        graph.add_edges_from(self.edges)
        return graph

    def copiers(self, agent: int) -> tuple[int, ...]:
        """Agents holding a local copy of `agent`'s variables."""
        return tuple(j for j in range(self.num_agents) if agent in self.neighborhoods[j])

    @property
    def degrees(self) -> np.ndarray:
        """Number of communication partners per agent."""
        graph = self.communication_graph()
        return np.array([graph.degree[i] for i in range(self.num_agents)])


def metropolis_weights(num_agents: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """
    Metropolis-Hastings consensus weights.

    P(i, j) = 1 / (1 + max(deg_i, deg_j)) on communication edges, with the
    diagonal completing each row to 1. Doubly stochastic on any undirected graph.
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(num_agents))
    graph.add_edges_from(edges)

    P = np.zeros((num_agents, num_agents))
    for i, j in graph.edges:
        weight = 1.0 / (1.0 + max(graph.degree[i], graph.degree[j]))
        P[i, j] = weight
        P[j, i] = weight
    P[np.diag_indices(num_agents)] = 1.0 - P.sum(axis=1)
    return P


def from_edges(num_agents: int, edges: Iterable[Sequence[int]]) -> GraphTopology:
    """
    Build a topology from an explicit list of ordered edges.

    Args:
        num_agents: Number of agents M
        edges: Ordered pairs (i, j); i joins the neighborhood of j

    Returns:
        Validated topology with Metropolis consensus weights
    """
    edge_set = frozenset((int(i), int(j)) for i, j in edges)
    for i, j in edge_set:
        if not (0 <= i < num_agents and 0 <= j < num_agents):
            raise ValueError(f"Edge ({i}, {j}) references an unknown agent")
    neighborhoods = tuple(
        tuple(sorted(i for i, j in edge_set if j == agent)) for agent in range(num_agents)
    )
    return GraphTopology(
        num_agents=num_agents,
        edges=edge_set,
        neighborhoods=neighborhoods,
        consensus_matrix=metropolis_weights(num_agents, edge_set),
    )


def build_chain(num_agents: int) -> GraphTopology:
    """Chain 0 <-> 1 <-> ... <-> M-1 with bidirectional coupling."""
    if num_agents < 2:
        raise ValueError("A chain needs at least 2 agents")
    edges = []
    for i in range(num_agents - 1):
        edges.extend([(i, i + 1), (i + 1, i)])
    return from_edges(num_agents, edges)


def gac_round(values: np.ndarray, topology: GraphTopology) -> np.ndarray:
    """
    One synchronous GAC round: every agent averages with its neighbors.

    Raises:
        ValueError: If values does not hold one entry per agent
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (topology.num_agents,):
        raise ValueError(
            f"Expected {topology.num_agents} values, got shape {values.shape}"
        )
    return topology.consensus_matrix @ values


def gac_consensus(initial: np.ndarray, topology: GraphTopology, iterations: int) -> np.ndarray:
    """
    Run a fixed number of GAC rounds.

    Args:
        initial: Per-agent starting values
        topology: Communication topology
        iterations: Number of rounds T_C (0 returns the input)

    Returns:
        Per-agent estimates of the network average
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    values = np.array(initial, dtype=float)
    if values.shape != (topology.num_agents,):
        raise ValueError(
            f"Expected {topology.num_agents} values, got shape {values.shape}"
        )
    for _ in range(iterations):
        values = gac_round(values, topology)
    gac_rounds_total.inc(iterations)
    return values
