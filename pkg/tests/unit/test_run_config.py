"""
Unit tests for YAML run configuration loading
"""
from pathlib import Path

import pytest
import yaml

from src.cli.run_config import ConfigError, RunConfig, load_run_config
from src.control.scheme import MpcScheme

ACADEMIC_CONFIG = Path(__file__).resolve().parents[2] / "config" / "academic.yaml"


def write_config(tmp_path: Path, data) -> Path:
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestLoadRunConfig:
    """Test file handling and error messages."""

    def test_academic_config(self):
        """Test that the shipped example validates with the documented defaults."""
        config = load_run_config(ACADEMIC_CONFIG)
        assert config.seed == 0
        assert config.scheme.horizon == 10
        assert config.admm.iterations == 50
        assert config.admm.gac_iterations == 100
        assert config.compare.controllers == ["trained", "nmpc", "smpc_inexact", "smpc_true"]
        assert config.topology.build().num_agents == 3

    def test_empty_file_uses_defaults(self, tmp_path):
        """Test that an empty document is a valid default run."""
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert load_run_config(path).learner.learning_rate == pytest.approx(6e-5)

    def test_missing_file(self, tmp_path):
        """Test that a missing file names the path."""
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "nope.yaml")

    def test_malformed_yaml(self, tmp_path):
        """Test that YAML syntax errors are reported as config errors."""
        path = tmp_path / "bad.yaml"
        path.write_text("admm: [1, 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="Malformed"):
            load_run_config(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        """Test that a YAML list is rejected."""
        with pytest.raises(ConfigError, match="mapping"):
            load_run_config(write_config(tmp_path, [1, 2]))

    def test_dotted_key_in_message(self, tmp_path):
        """Test that invalid values name their dotted key."""
        with pytest.raises(ConfigError, match=r"admm\.rho"):
            load_run_config(write_config(tmp_path, {"admm": {"rho": -1.0}}))

    def test_unknown_key(self, tmp_path):
        """Test that typos in section keys are rejected."""
        with pytest.raises(ConfigError, match=r"learner\.learning_rat"):
            load_run_config(write_config(tmp_path, {"learner": {"learning_rat": 0.1}}))

    def test_learner_keys_owned_elsewhere(self, tmp_path):
        """Test that ADMM and discount settings live in their own sections."""
        with pytest.raises(ConfigError, match=r"scheme\.gamma"):
            load_run_config(write_config(tmp_path, {"learner": {"gamma": 0.5}}))
        with pytest.raises(ConfigError, match=r"admm\.iterations"):
            load_run_config(write_config(tmp_path, {"learner": {"admm_iterations": 5}}))

    def test_initial_state_shape(self, tmp_path):
        """Test that the initial state must be one row per agent."""
        data = {"environment": {"initial_state": [[0.5, 0.0], [0.5, 0.0]]}}
        with pytest.raises(ConfigError, match=r"environment\.initial_state"):
            load_run_config(write_config(tmp_path, data))

    def test_disconnected_topology(self, tmp_path):
        """Test that graph errors surface at load time."""
        data = {"topology": {"kind": "edges", "num_agents": 4, "edges": [[0, 1], [2, 3]]}}
        with pytest.raises(ConfigError, match="connected"):
            load_run_config(write_config(tmp_path, data))

    def test_edges_required(self, tmp_path):
        """Test that an explicit graph needs its edge list."""
        with pytest.raises(ConfigError, match="edges"):
            load_run_config(write_config(tmp_path, {"topology": {"kind": "edges"}}))


class TestRunConfig:
    """Test derived objects."""

    def test_learner_config_takes_admm_section(self):
        """Test that ADMM, GAC and discount settings flow into the learner."""
        config = RunConfig.model_validate({
            "admm": {"iterations": 7, "gac_iterations": 12, "rho": 0.3},
            "scheme": {"gamma": 0.95},
            "learner": {"learning_rate": 1e-4},
        })
        learner = config.learner_config()
        assert (learner.admm_iterations, learner.gac_iterations) == (7, 12)
        assert learner.rho == pytest.approx(0.3)
        assert learner.gamma == pytest.approx(0.95)
        assert learner.learning_rate == pytest.approx(1e-4)

    def test_dual_check_iterations_sorted(self):
        """Test that requested rounds are deduplicated and sorted."""
        config = RunConfig.model_validate({"dual_check": {"iterations": [20, 1, 20, 5]}})
        assert config.dual_check.iterations == [1, 5, 20]

    def test_scheme_build(self):
        """Test that the scheme section builds a scheme for the topology."""
        config = RunConfig.model_validate({"scheme": {"horizon": 3, "terminal_weight": 2.0}})
        topology = config.topology.build()
        scheme = config.scheme.build(topology, config.environment)
        assert isinstance(scheme, MpcScheme)
        assert scheme.horizon == 3
        assert scheme.terminal_weight == 2.0
        assert [p.dynamics.neighbors for p in scheme.params] == list(topology.neighborhoods)

    def test_sampled_initial_model_is_seeded(self):
        """Test that sampled starting models repeat for equal seeds."""
        config = RunConfig.model_validate({"scheme": {"initial_model": "sampled"}})
        topology = config.topology.build()
        a = config.scheme.initial_params(topology, seed=3)
        b = config.scheme.initial_params(topology, seed=3)
        for pa, pb in zip(a, b):
            assert (pa.to_vector() == pb.to_vector()).all()

    def test_environment_build(self):
        """Test that the environment section sets the plant."""
        config = RunConfig.model_validate({"environment": {"noise_interval": [-0.2, 0.0]}})
        env = config.environment.build(config.topology.build(), seed=1)
        assert env.noise_interval == (-0.2, 0.0)
        assert env.seed == 1
