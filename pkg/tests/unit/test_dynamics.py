"""
Unit tests for agent models, learnable parameters and the academic plant
"""
import numpy as np
import pytest

from src.dynamics.academic import (
    MODEL_PERTURBATION_BOUNDS,
    NOMINAL_A,
    NOMINAL_B,
    AcademicEnv,
    env_step,
    nominal_model,
    sample_inaccurate_model,
    stage_cost,
    true_dynamics,
)
from src.dynamics.linsys import AgentParams, DynamicsParams, JointState, predict

LB = np.array([0.0, -1.0])
UB = np.array([1.0, 1.0])
OMEGA = np.array([100.0, 100.0])


class TestDynamicsParams:
    """Test model validation and prediction."""

    def test_dimensions(self):
        """Test that state and input dimensions come from A and B."""
        model = true_dynamics((0, 2))
        assert model.state_dim == 2
        assert model.input_dim == 1
        assert model.neighbors == (0, 2)
        np.testing.assert_array_equal(model.b, np.zeros(2))

    def test_rejects_non_square_a(self):
        """Test that A must be square."""
        with pytest.raises(ValueError, match="square"):
            DynamicsParams(A=np.ones((2, 3)), B=np.ones((2, 1)))

    def test_rejects_bad_neighbor_matrix(self):
        """Test that coupling matrices must be n x n."""
        with pytest.raises(ValueError):
            DynamicsParams(A=np.eye(2), B=np.ones((2, 1)), A_neighbors={1: np.eye(3)})

    def test_predict_with_neighbors(self):
        """Test the one-step prediction including neighbor coupling."""
        model = true_dynamics((1,))
        s_i, a_i, s_j = np.array([0.5, 0.2]), np.array([0.3]), np.array([0.1, 0.4])
        expected = model.A @ s_i + model.B @ a_i + model.A_neighbors[1] @ s_j
        np.testing.assert_allclose(predict(model, s_i, a_i, {1: s_j}), expected)

    def test_predict_requires_matching_neighbors(self):
        """Test that missing neighbor states are rejected."""
        with pytest.raises(ValueError, match="do not match"):
            predict(true_dynamics((1,)), np.zeros(2), np.zeros(1), {})


class TestAgentParams:
    """Test the learnable parameter vector."""

    def test_block_order_and_size(self):
        """Test the flattened layout V0, x_lb, x_ub, b, f, A, B, A_j."""
        params = AgentParams(dynamics=nominal_model((0, 2)))
        assert list(params.slices()) == ["V0", "x_lb", "x_ub", "b", "f", "A", "B", "A_0", "A_2"]
        # 1 + 2 + 2 + 2 + 3 + 4 + 2 + 4 + 4
        assert params.size == 24

    def test_vector_round_trip(self):
        """Test that from_vector inverts to_vector."""
        rng = np.random.default_rng(3)
        params = AgentParams(dynamics=nominal_model((1,)))
        theta = rng.normal(size=params.size)
        restored = params.from_vector(theta)
        np.testing.assert_array_equal(restored.to_vector(), theta)
        assert restored.dynamics.neighbors == (1,)

    def test_dict_round_trip(self):
        """Test that the JSON view restores every block."""
        params = AgentParams(
            dynamics=true_dynamics((0,)),
            V0=1.5,
            x_lb_shift=np.array([0.1, -0.2]),
            f=np.array([1.0, 2.0, 3.0]),
        )
        restored = AgentParams.from_dict(params.to_dict())
        np.testing.assert_array_equal(restored.to_vector(), params.to_vector())

    def test_rejects_wrong_vector_length(self):
        """Test that parameter vectors must match the structure."""
        params = AgentParams(dynamics=nominal_model())
        with pytest.raises(ValueError):
            params.from_vector(np.zeros(params.size + 1))

    def test_rejects_non_finite(self):
        """Test that NaN parameters are rejected."""
        with pytest.raises(ValueError, match="finite"):
            AgentParams(dynamics=nominal_model(), V0=float("nan"))


class TestAcademicModels:
    """Test the true plant and the inexact model family."""

    def test_nominal_model(self):
        """Test that the zero draw is the nominal model."""
        model = sample_inaccurate_model(np.random.default_rng(0), (1,), zero=True)
        np.testing.assert_array_equal(model.A, NOMINAL_A)
        np.testing.assert_array_equal(model.B, NOMINAL_B)
        np.testing.assert_array_equal(model.A_neighbors[1], np.zeros((2, 2)))

    def test_samples_stay_in_support(self):
        """Test that sampled perturbations respect their uniform bounds."""
        rng = np.random.default_rng(11)
        a_lo, a_hi = MODEL_PERTURBATION_BOUNDS["a1"]
        c_lo, c_hi = MODEL_PERTURBATION_BOUNDS["c"]
        for _ in range(50):
            model = sample_inaccurate_model(rng, (0, 2))
            delta = model.A - NOMINAL_A
            assert np.all(delta[[0, 0, 1], [0, 1, 1]] >= a_lo)
            assert np.all(delta[[0, 0, 1], [0, 1, 1]] <= a_hi)
            assert delta[1, 0] == 0.0
            assert 0.0 <= model.B[0, 0] - NOMINAL_B[0, 0] <= 0.075
            assert -0.075 <= model.B[1, 0] - NOMINAL_B[1, 0] <= 0.0
            coupling = model.A_neighbors[0]
            assert c_lo <= coupling[1, 1] <= c_hi
            np.testing.assert_array_equal(model.A_neighbors[0], model.A_neighbors[2])

    def test_sampling_is_seeded(self):
        """Test that equal seeds give equal models."""
        a = sample_inaccurate_model(np.random.default_rng(5), (1,))
        b = sample_inaccurate_model(np.random.default_rng(5), (1,))
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.B, b.B)


class TestStageCost:
    """Test the local stage cost."""

    def test_interior_state(self):
        """Test the quadratic cost inside the box."""
        assert stage_cost(np.array([0.5, 0.0]), np.array([0.0]), LB, UB, OMEGA) == pytest.approx(0.25)

    def test_lower_bound_violation(self):
        """Test the penalty for leaving the first lower bound by 0.01."""
        cost = stage_cost(np.array([-0.01, 0.0]), np.array([0.0]), LB, UB, OMEGA)
        assert cost == pytest.approx(1e-4 + 1.0)

    def test_input_cost(self):
        """Test the input weight of one half."""
        assert stage_cost(np.zeros(2), np.array([2.0]), LB, UB, OMEGA) == pytest.approx(2.0)

    def test_both_components_penalized(self):
        """Test that violations add up per component."""
        cost = stage_cost(np.array([1.5, -1.5]), np.array([0.0]), LB, UB, OMEGA)
        assert cost == pytest.approx(2.25 + 2.25 + 50.0 + 50.0)


class TestAcademicEnv:
    """Test the noisy plant."""

    def test_default_initial_state_is_box_midpoint(self, env):
        """Test that episodes start at the middle of the box."""
        state = env.reset()
        np.testing.assert_array_equal(state.states, np.tile([0.5, 0.0], (3, 1)))
        assert state.t == 0

    def test_explicit_reset_state(self, env, interior_state):
        """Test that an explicit state takes precedence."""
        np.testing.assert_array_equal(env.reset(state=interior_state).states, interior_state)

    def test_randomized_reset_inside_box(self, env):
        """Test that random starts lie in the box."""
        for _ in range(20):
            assert not np.any(env.violates(env.reset(randomize=True)))

    def test_noise_enters_first_component_only(self, env, interior_state):
        """Test the step against the noise-free prediction."""
        state = JointState(interior_state)
        actions = np.array([[0.1], [-0.2], [0.3]])
        next_state, costs = env_step(env, state, actions)
        for i, model in enumerate(env.models):
            clean = predict(model, state[i], actions[i], {j: state[j] for j in model.neighbors})
            noise = next_state[i] - clean
            assert -0.1 - 1e-12 <= noise[0] <= 1e-12
            assert noise[1] == pytest.approx(0.0, abs=1e-15)
        assert next_state.t == 1
        assert costs.shape == (3,)

    def test_seeded_trajectories_repeat(self, chain3, interior_state):
        """Test bit-identical rollouts for equal seeds."""
        runs = []
        for _ in range(2):
            plant = AcademicEnv(topology=chain3, seed=42)
            state = plant.reset(state=interior_state)
            for _ in range(5):
                state, _ = plant.step(state, np.zeros((3, 1)))
            runs.append(state.states)
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_clone_uses_new_generator(self, env, interior_state):
        """Test that clones share the plant but not the noise stream."""
        a, b = env.clone(1), env.clone(1)
        sa, _ = a.step(JointState(interior_state), np.zeros((3, 1)))
        sb, _ = b.step(JointState(interior_state), np.zeros((3, 1)))
        np.testing.assert_array_equal(sa.states, sb.states)

    def test_violation_flags(self, env):
        """Test the strict violation test with tolerance."""
        state = JointState(np.array([[0.5, 0.0], [-0.01, 0.0], [1.0 + 1e-12, 0.0]]))
        np.testing.assert_array_equal(env.violates(state), [False, True, False])

    def test_rejects_empty_noise_interval(self, chain3):
        """Test that the noise interval must be ordered."""
        with pytest.raises(ValueError):
            AcademicEnv(topology=chain3, noise_interval=(0.1, -0.1))
