"""
Parametrized affine agent models and learnable parameter vectors
"""
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(eq=False)
class DynamicsParams:
    """
    Affine model of one agent:
    x+ = A x + B u + sum_j A_j x_j + b
    """

    A: np.ndarray
    B: np.ndarray
    A_neighbors: dict[int, np.ndarray] = field(default_factory=dict)
    b: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Normalize arrays and validate dimensions."""
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B.reshape(-1, 1)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {self.B.shape}")
        self.b = np.zeros(n) if self.b is None else np.asarray(self.b, dtype=float).reshape(n)
        self.A_neighbors = {
            int(j): np.asarray(Aij, dtype=float) for j, Aij in sorted(self.A_neighbors.items())
        }
        for j, Aij in self.A_neighbors.items():
            if Aij.shape != (n, n):
                raise ValueError(f"A_neighbors[{j}] must be {n}x{n}, got {Aij.shape}")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(self.A_neighbors)

    def copy(self) -> "DynamicsParams":
        return DynamicsParams(
            A=self.A.copy(),
            B=self.B.copy(),
            A_neighbors={j: Aij.copy() for j, Aij in self.A_neighbors.items()},
            b=self.b.copy(),
        )


@dataclass(eq=False)
class AgentParams:
    """
    Learnable local parameter theta_i of one agent.

    Flattened order: V0, x_lb_shift, x_ub_shift, b, f, A, B, A_j (ascending j).
    Matrices are flattened row-major.
    """

    dynamics: DynamicsParams
    V0: float = 0.0
    x_lb_shift: np.ndarray | None = None
    x_ub_shift: np.ndarray | None = None
    f: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Fill zero defaults and validate finiteness."""
        n, m = self.dynamics.state_dim, self.dynamics.input_dim
        self.V0 = float(self.V0)
        self.x_lb_shift = _vector_or_zeros(self.x_lb_shift, n, "x_lb_shift")
        self.x_ub_shift = _vector_or_zeros(self.x_ub_shift, n, "x_ub_shift")
        self.f = _vector_or_zeros(self.f, n + m, "f")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("AgentParams entries must be finite")

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def input_dim(self) -> int:
        return self.dynamics.input_dim

    def named_blocks(self) -> dict[str, np.ndarray]:
        """Parameter blocks keyed by name, in flattening order."""
        blocks: dict[str, np.ndarray] = {
            "V0": np.array([self.V0]),
            "x_lb": self.x_lb_shift,
            "x_ub": self.x_ub_shift,
            "b": self.dynamics.b,
            "f": self.f,
            "A": self.dynamics.A,
            "B": self.dynamics.B,
        }
        for j, Aij in self.dynamics.A_neighbors.items():
            blocks[f"A_{j}"] = Aij
        return blocks

    def slices(self) -> dict[str, slice]:
        """Position of each named block in the flattened vector."""
        out: dict[str, slice] = {}
        start = 0
        for name, block in self.named_blocks().items():
            out[name] = slice(start, start + block.size)
            start += block.size
        return out

    @property
    def size(self) -> int:
        return sum(block.size for block in self.named_blocks().values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([block.ravel() for block in self.named_blocks().values()])

    def from_vector(self, theta: np.ndarray) -> "AgentParams":
        """New parameters with the same structure and values taken from theta."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"Expected parameter vector of length {self.size}, got {theta.shape}")
        s = self.slices()
        n, m = self.state_dim, self.input_dim
        dynamics = DynamicsParams(
            A=theta[s["A"]].reshape(n, n),
            B=theta[s["B"]].reshape(n, m),
            A_neighbors={j: theta[s[f"A_{j}"]].reshape(n, n) for j in self.dynamics.neighbors},
            b=theta[s["b"]],
        )
        return AgentParams(
            dynamics=dynamics,
            V0=float(theta[s["V0"]][0]),
            x_lb_shift=theta[s["x_lb"]],
            x_ub_shift=theta[s["x_ub"]],
            f=theta[s["f"]],
        )

    def to_dict(self) -> dict[str, list]:
        """JSON-friendly view keyed by parameter name."""
        return {name: np.asarray(block).tolist() for name, block in self.named_blocks().items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, list]) -> "AgentParams":
        """Inverse of to_dict."""
        neighbors = {
            int(name.split("_", 1)[1]): np.asarray(value, dtype=float)
            for name, value in data.items()
            if name.startswith("A_")
        }
        dynamics = DynamicsParams(
            A=np.asarray(data["A"], dtype=float),
            B=np.asarray(data["B"], dtype=float),
            A_neighbors=neighbors,
            b=np.asarray(data["b"], dtype=float),
        )
        return cls(
            dynamics=dynamics,
            V0=float(np.asarray(data["V0"]).ravel()[0]),
            x_lb_shift=np.asarray(data["x_lb"], dtype=float),
            x_ub_shift=np.asarray(data["x_ub"], dtype=float),
            f=np.asarray(data["f"], dtype=float),
        )


@dataclass(eq=False)
class JointState:
    """Stacked agent states s = {s_i} at time t."""

    states: np.ndarray  # (M, n)
    t: int = 0

    def __post_init__(self) -> None:
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.t < 0:
            raise ValueError("time index must be nonnegative")

    @property
    def num_agents(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, agent: int) -> np.ndarray:
        return self.states[agent]


def predict(
    params: AgentParams | DynamicsParams,
    s_i: np.ndarray,
    a_i: np.ndarray,
    neighbor_states: Mapping[int, np.ndarray],
) -> np.ndarray:
    """
    One-step prediction A s_i + B a_i + sum_j A_j s_j + b.

    Raises:
        ValueError: If neighbor_states keys differ from the model's neighborhood
    """
    dynamics = params.dynamics if isinstance(params, AgentParams) else params
    if set(neighbor_states) != set(dynamics.neighbors):
        raise ValueError(
            f"Neighbor states for {sorted(neighbor_states)} do not match "
            f"neighborhood {list(dynamics.neighbors)}"
        )
    nxt = dynamics.A @ np.asarray(s_i, dtype=float) + dynamics.B @ np.atleast_1d(a_i) + dynamics.b
    for j, Aij in dynamics.A_neighbors.items():
        nxt = nxt + Aij @ np.asarray(neighbor_states[j], dtype=float)
    return nxt


def _vector_or_zeros(value: np.ndarray | None, size: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros(size)
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have length {size}, got {arr.shape}")
    return arr
