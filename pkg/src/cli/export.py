"""
CSV and JSON artifacts written by the commands
"""
import json
from pathlib import Path
from typing import Sequence

import pandas as pd

from src.dynamics.linsys import AgentParams
from src.learning.q_learning import TrainingLog
from src.network.topology import GraphTopology

# Round-trips every float64
FLOAT_FORMAT = "%.17g"


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a frame with a header row and full-precision floats."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_theta(log: TrainingLog, path: Path) -> Path:
    """Parameter snapshots and final parameters keyed by agent and block name."""
    payload = {
        "snapshots": log.snapshots,
        "final": {str(i): p.to_dict() for i, p in enumerate(log.final_params)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_theta(path: Path, topology: GraphTopology) -> list[AgentParams]:
    """
    Final parameters from a file written by write_theta.

    Raises:
        FileNotFoundError: path does not exist
        ValueError: The file does not describe the agents of `topology`
    """
    data = json.loads(path.read_text(encoding="utf-8"))
    final = data.get("final") if isinstance(data, dict) else None
    if not final:
        raise ValueError(f"{path} holds no final parameters")
    params = []
    for i in range(topology.num_agents):
        if str(i) not in final:
            raise ValueError(f"{path} has no parameters for agent {i}")
        p = AgentParams.from_dict(final[str(i)])
        if p.dynamics.neighbors != topology.neighborhoods[i]:
            raise ValueError(
                f"{path}: agent {i} couples to {p.dynamics.neighbors}, "
                f"topology expects {topology.neighborhoods[i]}"
            )
        params.append(p)
    if len(final) != topology.num_agents:
        raise ValueError(f"{path} has {len(final)} agents, topology has {topology.num_agents}")
    return params


def snapshot_frame(snapshots: Sequence[dict]) -> pd.DataFrame:
    """Long table of parameter components: step, agent, name, index, value."""
    rows = []
    for snap in snapshots:
        for agent, blocks in snap["agents"].items():
            for name, value in blocks.items():
                for k, v in enumerate(_flatten(value)):
                    rows.append({
                        "step": snap["step"],
                        "agent": int(agent),
                        "name": name,
                        "index": k,
                        "value": float(v),
                    })
    return pd.DataFrame(rows, columns=["step", "agent", "name", "index", "value"])


def _flatten(value) -> list[float]:
    if isinstance(value, list):
        out: list[float] = []
        for item in value:
            out.extend(_flatten(item))
        return out
    return [value]
