"""
Unit tests for CSV and JSON artifacts
"""
import json

import numpy as np
import pandas as pd
import pytest

from src.cli.commands import summarize_comparison
from src.cli.export import load_theta, snapshot_frame, write_csv, write_theta
from src.learning.q_learning import TrainingLog
from src.network.topology import build_chain


@pytest.fixture
def log(true_params) -> TrainingLog:
    log = TrainingLog(num_agents=3, state_dim=2, input_dim=1)
    log.snapshot(0, true_params)
    shifted = [p.from_vector(p.to_vector() + 0.5) for p in true_params]
    log.snapshot(10, shifted)
    log.final_params = shifted
    return log


class TestTheta:
    """Test the parameter file."""

    def test_round_trip(self, log, chain3, tmp_path):
        """Test that final parameters are restored for the same topology."""
        path = write_theta(log, tmp_path / "theta.json")
        restored = load_theta(path, chain3)
        for a, b in zip(restored, log.final_params):
            np.testing.assert_array_equal(a.to_vector(), b.to_vector())
        data = json.loads(path.read_text())
        assert [snap["step"] for snap in data["snapshots"]] == [0, 10]

    def test_rejects_other_topology(self, log, tmp_path):
        """Test that a file for three agents does not load on four."""
        path = write_theta(log, tmp_path / "theta.json")
        with pytest.raises(ValueError):
            load_theta(path, build_chain(4))

    def test_rejects_empty_file(self, chain3, tmp_path):
        """Test that a file without final parameters is refused."""
        path = tmp_path / "theta.json"
        path.write_text(json.dumps({"snapshots": []}))
        with pytest.raises(ValueError, match="no final parameters"):
            load_theta(path, chain3)


class TestFrames:
    """Test tabular artifacts."""

    def test_snapshot_frame(self, log):
        """Test one row per parameter component and snapshot."""
        frame = snapshot_frame(log.snapshots)
        assert list(frame.columns) == ["step", "agent", "name", "index", "value"]
        sizes = sum(p.size for p in log.final_params)
        assert len(frame) == 2 * sizes
        a_block = frame[(frame.step == 0) & (frame.agent == 1) & (frame.name == "A")]
        assert a_block["value"].tolist() == [0.9, 0.35, 0.0, 1.1]

    def test_empty_training_log(self, tmp_path):
        """Test that a run without steps still writes a header."""
        empty = TrainingLog(num_agents=2, state_dim=2, input_dim=1)
        path = write_csv(empty.to_frame(), tmp_path / "training.csv")
        frame = pd.read_csv(path)
        assert frame.empty
        assert list(frame.columns) == empty.columns()

    def test_full_precision(self, tmp_path):
        """Test that floats survive the CSV round trip exactly."""
        values = np.array([0.1, 1.0 / 3.0, 2.0 ** -40])
        path = write_csv(pd.DataFrame({"v": values}), tmp_path / "x.csv")
        np.testing.assert_array_equal(pd.read_csv(path)["v"].to_numpy(), values)

    def test_summary(self):
        """Test quartiles and violation counts per controller."""
        episodes = pd.DataFrame({
            "episode": [0, 1, 2, 3, 0, 1, 2, 3],
            "controller": ["a"] * 4 + ["b"] * 4,
            "total_cost": [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0],
            "violations": [0, 0, 2, 1, 0, 0, 0, 0],
        })
        summary = summarize_comparison(episodes).set_index("controller")
        assert summary.loc["a", "median"] == pytest.approx(2.5)
        assert summary.loc["a", "q1"] == pytest.approx(1.75)
        assert summary.loc["a", "q3"] == pytest.approx(3.25)
        assert summary.loc["a", "violations"] == 3
        assert summary.loc["a", "episodes_with_violations"] == 2
        assert summary.loc["b", "episodes"] == 4
        assert summary.loc["b", "episodes_with_violations"] == 0
