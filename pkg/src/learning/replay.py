"""
Per-agent experience replay of TD errors and Lagrangian gradients
"""
from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class Experience:
    """One step of learning signal for every agent."""

    td_errors: np.ndarray  # (M,), each agent's own estimate
    gradients: list[np.ndarray]
    step: int

    def __post_init__(self) -> None:
        self.td_errors = np.atleast_1d(np.asarray(self.td_errors, dtype=float))
        if self.td_errors.size != len(self.gradients):
            raise ValueError("One TD error and one gradient per agent are required")

    @property
    def td_error(self) -> float:
        return float(np.mean(self.td_errors))


class ExperienceReplay:
    """
    Uniform average over the most recent `window` experiences of each agent.

    Agents keep their own histories; only scalars cross agent boundaries.
    """

    def __init__(self, num_agents: int, window: int, update_period: int):
        if window < 1:
            raise ValueError("window must be at least 1")
        if update_period < 1:
            raise ValueError("update_period must be at least 1")
        self.window = window
        self.update_period = update_period
        self._td: list[deque[float]] = [deque(maxlen=window) for _ in range(num_agents)]
        self._grad: list[deque[np.ndarray]] = [deque(maxlen=window) for _ in range(num_agents)]

    def __len__(self) -> int:
        return len(self._td[0]) if self._td else 0

    def add(self, experience: Experience) -> None:
        for i, (delta, grad) in enumerate(zip(experience.td_errors, experience.gradients)):
            self._td[i].append(float(delta))
            self._grad[i].append(np.asarray(grad, dtype=float).copy())

    def should_update(self, step: int) -> bool:
        """Updates happen every update_period steps once samples exist."""
        return len(self) > 0 and (step + 1) % self.update_period == 0

    def averages(self, agent: int) -> tuple[float, np.ndarray]:
        """Mean TD error and mean gradient over the agent's window."""
        if not self._td[agent]:
            raise ValueError(f"No experience stored for agent {agent}")
        return float(np.mean(self._td[agent])), np.mean(np.stack(self._grad[agent]), axis=0)
