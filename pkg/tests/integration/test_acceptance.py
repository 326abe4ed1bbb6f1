"""
Accuracy checks of the distributed scheme on the academic example

Deselected by default; run with `pytest -m slow`.
"""
import numpy as np
import pytest

from src.cli.commands import _dual_errors
from src.cli.run_config import RunConfig
from src.control.evaluation import (
    evaluate_centralized,
    evaluate_q_distributed,
    evaluate_v_and_policy_distributed,
)
from src.learning.q_learning import LearnerConfig, agent_gradients, local_update
from src.utils.logging import get_logger

pytestmark = pytest.mark.slow

logger = get_logger(__name__)

FD_STEP = 1e-5


def build_academic(initial_model: str = "nominal"):
    config = RunConfig()
    topology = config.topology.build()
    env = config.environment.build(topology, seed=config.seed)
    scheme_config = config.scheme.model_copy(update={"initial_model": initial_model})
    scheme = scheme_config.build(topology, config.environment, seed=config.seed)
    return topology, env, scheme


@pytest.fixture
def academic():
    return build_academic()


def random_states(rng: np.random.Generator, count: int) -> list[np.ndarray]:
    return [rng.uniform([0.0, -1.0], [1.0, 1.0], size=(3, 2)) for _ in range(count)]


def random_actions(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(3, 1))


def dual_error_trace(scheme, topology, state, rounds: int) -> dict[int, float]:
    reference = evaluate_centralized(scheme, state)
    errors = {}

    def record(tau, workspace, solutions):
        errors[tau] = sum(_dual_errors(reference.solutions, solutions))

    evaluate_v_and_policy_distributed(scheme, topology, state, rounds, 100, callback=record)
    return errors


class TestDualRecovery:
    """Test that local multipliers converge to the centralized ones."""

    def test_error_at_solver_precision(self, academic):
        """Test the dual error at 20 and 40 ADMM rounds on the shipped model."""
        topology, env, scheme = academic
        errors = dual_error_trace(scheme, topology, env.reset().states, 40)
        assert errors[20] < 1e-6
        assert errors[40] < 1e-10

    def test_error_decreases_with_coupling(self):
        """Test that the error shrinks over the rounds when neighbors are coupled."""
        topology, env, scheme = build_academic("true")
        errors = dual_error_trace(scheme, topology, env.reset().states, 100)
        assert errors[100] < errors[10] < errors[1]


class TestValueAccuracy:
    """Test distributed values against the centralized optimum."""

    def test_q_within_tolerance(self, academic):
        """Test |Q_distributed - Q_centralized| on random states and actions."""
        topology, _, scheme = academic
        rng = np.random.default_rng(0)
        for state in random_states(rng, 20):
            actions = random_actions(rng)
            exact = evaluate_centralized(scheme, state, actions).value
            approx = evaluate_q_distributed(scheme, topology, state, actions).value
            assert abs(approx - exact) < 1e-5

    def test_bellman_consistency_distributed(self, academic):
        """Test Q(s, pi(s)) = V(s) with distributed evaluations."""
        topology, _, scheme = academic
        rng = np.random.default_rng(1)
        for state in random_states(rng, 10):
            v = evaluate_v_and_policy_distributed(scheme, topology, state)
            q = evaluate_q_distributed(scheme, topology, state, v.policy)
            assert q.value == pytest.approx(v.value, abs=1e-4)

    def test_bellman_consistency_centralized(self, academic):
        """Test Q(s, pi(s)) = V(s) exactly with the monolithic QP."""
        _, _, scheme = academic
        rng = np.random.default_rng(2)
        for state in random_states(rng, 20):
            v = evaluate_centralized(scheme, state)
            q = evaluate_centralized(scheme, state, v.policy)
            assert q.value == pytest.approx(v.value, abs=1e-6)


class TestSensitivities:
    """Test parameter gradients and the separable update."""

    def test_gradient_against_finite_differences(self, academic):
        """
        Test analytic gradients on random states, actions and parameters.

        Components whose +-h solves change the active set are excluded and
        reported; the gradient does not exist across a crossing.
        """
        _, _, scheme = academic
        rng = np.random.default_rng(3)
        checked, crossings = 0, []
        for sample, state in enumerate(random_states(rng, 20)):
            actions = random_actions(rng)
            params = [p.from_vector(p.to_vector() + rng.normal(scale=1e-2, size=p.size)) for p in scheme.params]
            perturbed = scheme.with_params(params)
            result = evaluate_centralized(perturbed, state, actions)
            joint = result.diagnostics["joint_solution"]
            if joint.degenerate:
                continue
            gradients = agent_gradients(perturbed, state, actions, result)
            for i in range(3):
                theta = params[i].to_vector()
                for k in range(theta.size):
                    values, crossed = [], False
                    for sign in (1.0, -1.0):
                        shifted = theta.copy()
                        shifted[k] += sign * FD_STEP
                        trial = list(params)
                        trial[i] = params[i].from_vector(shifted)
                        shifted_result = evaluate_centralized(perturbed.with_params(trial), state, actions)
                        crossed |= shifted_result.diagnostics["joint_solution"].active_set != joint.active_set
                        values.append(shifted_result.value)
                    if crossed:
                        crossings.append((sample, i, k))
                        continue
                    numeric = (values[0] - values[1]) / (2.0 * FD_STEP)
                    assert gradients[i][k] == pytest.approx(numeric, rel=1e-4, abs=1e-6)
                    checked += 1
        if crossings:
            logger.info(f"Excluded {len(crossings)} components at active-set crossings: {crossings}")
        assert checked > len(crossings)

    def test_distributed_update_matches_centralized(self, academic):
        """Test local updates from ADMM duals against the centralized update."""
        topology, _, scheme = academic
        config = LearnerConfig()
        rng = np.random.default_rng(4)
        for state in random_states(rng, 5):
            actions = random_actions(rng)
            exact = agent_gradients(scheme, state, actions, evaluate_centralized(scheme, state, actions))
            approx = agent_gradients(
                scheme, state, actions, evaluate_q_distributed(scheme, topology, state, actions)
            )
            delta = 1.0
            for i in range(3):
                step_exact = local_update(scheme.params[i].to_vector(), delta, exact[i], config.learning_rate)
                step_approx = local_update(
                    scheme.params[i].to_vector(), delta, approx[i], config.learning_rate
                )
                assert np.max(np.abs(step_exact - step_approx)) < 1e-5
