"""
Unit tests for consensus ADMM
"""
import numpy as np
import pandas as pd
import pytest

from src.cli.commands import _dual_errors
from src.control.evaluation import evaluate_centralized
from src.control.scheme import MpcScheme, build_local_qp
from src.dynamics.academic import sample_inaccurate_model, true_dynamics
from src.dynamics.linsys import AgentParams
from src.network.topology import build_chain
from src.optim.admm import (
    ConsensusBlock,
    DivergenceDetected,
    LocalSubproblem,
    admm_solve,
    primal_residual,
)
from src.optim.qp import QuadProgram, objective_value


def local_subproblems(scheme, states, actions=None):
    return [
        build_local_qp(scheme, i, states[i], None if actions is None else actions[i])
        for i in range(scheme.num_agents)
    ]


class TestLocalSubproblem:
    """Test the consensus layout and ADMM terms."""

    def test_admm_terms_objective(self, short_scheme, interior_state):
        """Test that the augmented QP adds y'x~ + rho/2 ||x~ - z~||^2."""
        rng = np.random.default_rng(0)
        sub = build_local_qp(short_scheme, 1, interior_state[1])
        y = rng.normal(size=sub.augmented_size)
        z = rng.normal(size=sub.augmented_size)
        x = rng.normal(size=sub.qp.num_vars)
        augmented = sub.with_admm_terms(y, z, 0.5)
        xt = x[sub.consensus_index]
        expected = objective_value(sub.qp, x) + y @ xt + 0.25 * np.sum((xt - z) ** 2)
        assert objective_value(augmented, x) == pytest.approx(expected, rel=1e-12)

    def test_own_block_first(self, short_scheme, interior_state):
        """Test that the augmented vector starts with the agent's own states."""
        sub = build_local_qp(short_scheme, 1, interior_state[1])
        assert [blk.owner for blk in sub.blocks] == [1, 0, 2]
        size = short_scheme.horizon * short_scheme.state_dim
        assert sub.augmented_size == 3 * size

    def test_rejects_foreign_first_block(self):
        """Test that the first block must belong to the agent."""
        qp = QuadProgram(H=np.eye(2), g=np.zeros(2))
        with pytest.raises(ValueError, match="own"):
            LocalSubproblem(
                agent=0,
                qp=qp,
                consensus_index=np.array([0, 1]),
                blocks=(ConsensusBlock(1, slice(0, 2)),),
            )

    def test_rejects_repeated_variables(self):
        """Test that x~ cannot pick the same variable twice."""
        qp = QuadProgram(H=np.eye(2), g=np.zeros(2))
        with pytest.raises(ValueError, match="repeat"):
            LocalSubproblem(
                agent=0,
                qp=qp,
                consensus_index=np.array([0, 0]),
                blocks=(ConsensusBlock(0, slice(0, 2)),),
            )


class TestAdmmSolve:
    """Test synchronous ADMM rounds on the academic chain."""

    def test_multiplier_blocks_sum_to_zero(self, short_scheme, chain3, interior_state):
        """Test that multipliers referencing one variable cancel every round."""
        sums = []

        def record(tau, workspace, solutions):
            sums.append(max(np.max(np.abs(v)) for v in workspace.multiplier_sums().values()))

        admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=15, callback=record)
        assert len(sums) == 15
        assert max(sums) <= 1e-9

    def test_averaging_property(self, short_scheme, chain3, interior_state):
        """Test that x - z sums to zero over the holders of each variable."""
        result = admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=3)
        ws = result.workspace
        for owner in range(3):
            total = sum(ws.x[i][span] - ws.z[i][span] for i, span in ws.holders(owner))
            np.testing.assert_allclose(total, 0.0, atol=1e-12)

    def test_primal_residual_decreases(self, short_scheme, chain3, interior_state):
        """Test that the copies approach agreement over 50 rounds."""
        result = admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=50)
        assert len(result.trace) == 50
        assert result.trace[-1].primal_residual < result.trace[0].primal_residual
        assert primal_residual(result.workspace) == pytest.approx(result.trace[-1].primal_residual)

    def test_objective_close_to_centralized(self, short_scheme, chain3, interior_state):
        """Test that the summed local objectives approach the joint optimum."""
        result = admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=100)
        reference = evaluate_centralized(short_scheme, interior_state)
        assert result.objective == pytest.approx(reference.value, rel=1e-3, abs=1e-4)

    def test_threads_do_not_change_results(self, short_scheme, chain3, interior_state):
        """Test that parallel local solves give identical iterates."""
        serial = admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=10)
        parallel = admm_solve(
            local_subproblems(short_scheme, interior_state), chain3, iterations=10, threads=2
        )
        for a, b in zip(serial.primal, parallel.primal):
            np.testing.assert_array_equal(a, b)

    def test_warm_start_leaves_source_untouched(self, short_scheme, chain3, interior_state):
        """Test that warm starting copies the workspace."""
        subs = local_subproblems(short_scheme, interior_state)
        first = admm_solve(subs, chain3, iterations=5)
        before = [v.copy() for v in first.workspace.y]
        second = admm_solve(subs, chain3, iterations=5, warm_start=first.workspace)
        for a, b in zip(before, first.workspace.y):
            np.testing.assert_array_equal(a, b)
        assert second.workspace.iteration == 5

    def test_single_agent_is_exact_after_one_round(self, single_agent):
        """Test that a lone agent needs no consensus and solves exactly."""
        scheme = MpcScheme(
            topology=single_agent,
            params=[AgentParams(dynamics=true_dynamics(()))],
            horizon=5,
        )
        state = np.array([[0.4, 0.1]])
        result = admm_solve(local_subproblems(scheme, state), single_agent, iterations=1)
        reference = evaluate_centralized(scheme, state)
        assert result.objective == pytest.approx(reference.value, abs=1e-9)
        np.testing.assert_allclose(result.primal[0], reference.solutions[0].x_opt, atol=1e-8)

    def test_trace_export(self, short_scheme, chain3, interior_state, tmp_path):
        """Test the residual trace CSV layout."""
        result = admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=4)
        path = tmp_path / "trace" / "admm_trace.csv"
        result.export_trace(path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["iteration", "primal_residual", "dual_residual", "objective"]
        assert frame["iteration"].tolist() == [1, 2, 3, 4]

    def test_rejects_bad_arguments(self, short_scheme, chain3, interior_state):
        """Test argument validation."""
        subs = local_subproblems(short_scheme, interior_state)
        with pytest.raises(ValueError, match="iterations"):
            admm_solve(subs, chain3, iterations=0)
        with pytest.raises(ValueError, match="rho"):
            admm_solve(subs, chain3, rho=0.0)
        with pytest.raises(ValueError, match="subproblems"):
            admm_solve(subs[:2], chain3)

    def test_rejects_mismatched_neighborhoods(self, short_scheme, interior_state):
        """Test that the copies must follow the given topology."""
        from src.network.topology import from_edges

        star = from_edges(3, [(0, 1), (1, 0), (0, 2), (2, 0)])
        with pytest.raises(ValueError, match="neighborhood"):
            admm_solve(local_subproblems(short_scheme, interior_state), star)

    def test_uncoupled_agents_need_one_round(self, chain3, nominal_params, interior_state):
        """Test that zero couplings leave no copies and ADMM is exact at once."""
        scheme = MpcScheme(topology=chain3, params=nominal_params, horizon=4)
        subs = local_subproblems(scheme, interior_state)
        assert all(len(sub.blocks) == 1 for sub in subs)
        result = admm_solve(subs, chain3, iterations=1)
        reference = evaluate_centralized(scheme, interior_state)
        assert result.trace[-1].primal_residual == 0.0
        assert result.objective == pytest.approx(reference.value, abs=1e-9)

    def test_divergence_detected(self, short_scheme, chain3, interior_state, monkeypatch):
        """Test that a primal residual growing for many rounds aborts the run."""
        monkeypatch.setattr("src.optim.admm.primal_residual", lambda ws: 1e-6 * 2.0 ** ws.iteration)
        with pytest.raises(DivergenceDetected) as excinfo:
            admm_solve(local_subproblems(short_scheme, interior_state), chain3, iterations=30)
        assert excinfo.value.iteration == 21

    @pytest.mark.parametrize("rho", [0.1, 0.5, 1.0])
    def test_penalty_sweep(self, short_scheme, chain3, interior_state, rho):
        """Test convergence to the joint optimum over a range of penalties."""
        result = admm_solve(
            local_subproblems(short_scheme, interior_state), chain3, rho=rho, iterations=200
        )
        reference = evaluate_centralized(short_scheme, interior_state)
        assert result.objective == pytest.approx(reference.value, rel=1e-3, abs=1e-4)
        assert result.trace[-1].primal_residual < result.trace[0].primal_residual

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_chain_family(self, seed):
        """Test objective and multiplier recovery on random four-agent chains."""
        rng = np.random.default_rng(seed)
        topology = build_chain(4)
        params = [
            AgentParams(dynamics=sample_inaccurate_model(rng, nbrs))
            for nbrs in topology.neighborhoods
        ]
        scheme = MpcScheme(topology=topology, params=params, horizon=3)
        states = rng.uniform([0.1, -0.5], [0.9, 0.5], size=(4, 2))
        result = admm_solve(local_subproblems(scheme, states), topology, iterations=200)
        reference = evaluate_centralized(scheme, states)
        assert result.objective == pytest.approx(reference.value, abs=1e-6)
        eq, ineq = _dual_errors(reference.solutions, result.solutions)
        assert eq + ineq < 1e-5
