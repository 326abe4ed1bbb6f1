"""
Static SVG figures generated from the command CSVs

matplotlib is an optional extra; without it the commands stay CSV-only.
"""
from pathlib import Path

import pandas as pd

from src.utils.logging import get_logger

logger = get_logger(__name__)


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        logger.warning("matplotlib not installed, skipping plots (pip install netmpc-rl[plots])")
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _agents(frame: pd.DataFrame) -> list[int]:
    return sorted(int(c.split("_")[1]) for c in frame.columns if c.startswith("L_"))


def _moving_average(values: pd.Series, window: int = 100) -> pd.Series:
    return values.rolling(window=window, min_periods=1).mean()


def plot_training(frame: pd.DataFrame, params: pd.DataFrame, out_dir: Path) -> list[Path]:
    """States and inputs, TD error and stage cost, parameter trajectories."""
    plt = _pyplot()
    if plt is None or frame.empty:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    agents = _agents(frame)
    written = []

    state_cols = [c for c in frame.columns if c.startswith(f"s_{agents[0]}_")]
    input_cols = [c for c in frame.columns if c.startswith(f"a_{agents[0]}_")]
    rows = len(state_cols) + len(input_cols)
    fig, grid = plt.subplots(rows, 1, sharex=True, figsize=(8, 2.2 * rows), squeeze=False)
    axes = grid[:, 0]
    for row, suffix in enumerate(c.split("_", 2)[2] for c in state_cols):
        for i in agents:
            axes[row].plot(frame["step"], frame[f"s_{i}_{suffix}"], label=f"agent {i}", linewidth=0.8)
        axes[row].set_ylabel(f"state {suffix}")
    for k, suffix in enumerate(c.split("_", 2)[2] for c in input_cols):
        ax = axes[len(state_cols) + k]
        for i in agents:
            ax.plot(frame["step"], frame[f"a_{i}_{suffix}"], label=f"agent {i}", linewidth=0.8)
        ax.set_ylabel(f"input {suffix}")
    axes[0].legend(loc="upper right")
    axes[-1].set_xlabel("step")
    fig.tight_layout()
    written.append(out_dir / "states_inputs.svg")
    fig.savefig(written[-1])
    plt.close(fig)

    total_cost = frame[[f"L_{i}" for i in agents]].sum(axis=1)
    fig, (ax_td, ax_cost) = plt.subplots(2, 1, sharex=True, figsize=(8, 5))
    ax_td.plot(frame["step"], frame["td_error"], linewidth=0.5, alpha=0.4)
    ax_td.plot(frame["step"], _moving_average(frame["td_error"]), linewidth=1.2)
    ax_td.set_ylabel("TD error")
    ax_cost.plot(frame["step"], total_cost, linewidth=0.5, alpha=0.4)
    ax_cost.plot(frame["step"], _moving_average(total_cost), linewidth=1.2)
    ax_cost.set_ylabel("stage cost")
    ax_cost.set_xlabel("step")
    fig.tight_layout()
    written.append(out_dir / "td_error_cost.svg")
    fig.savefig(written[-1])
    plt.close(fig)

    if not params.empty:
        names = list(dict.fromkeys(params["name"]))
        fig, axes = plt.subplots(len(names), 1, sharex=True, figsize=(8, 1.8 * len(names)), squeeze=False)
        for ax, name in zip(axes[:, 0], names):
            block = params[params["name"] == name]
            for (agent, index), series in block.groupby(["agent", "index"]):
                ax.plot(series["step"], series["value"], linewidth=0.8, label=f"{agent}.{index}")
            ax.set_ylabel(name)
        axes[-1, 0].set_xlabel("step")
        fig.tight_layout()
        written.append(out_dir / "parameters.svg")
        fig.savefig(written[-1])
        plt.close(fig)

    logger.info(f"Wrote {len(written)} training plots to {out_dir}")
    return written


def plot_dual_errors(frame: pd.DataFrame, path: Path) -> list[Path]:
    """Dual recovery error against the ADMM iteration, log scale."""
    plt = _pyplot()
    if plt is None or frame.empty:
        return []
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(frame["iteration"], frame["dual_error"], marker="o")
    ax.set_xlabel("ADMM iteration")
    ax.set_ylabel("dual error")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return [path]


def plot_comparison(frame: pd.DataFrame, path: Path) -> list[Path]:
    """Box plot of the per-episode cost of every controller."""
    plt = _pyplot()
    if plt is None or frame.empty:
        return []
    path.parent.mkdir(parents=True, exist_ok=True)
    controllers = list(dict.fromkeys(frame["controller"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([frame.loc[frame["controller"] == c, "total_cost"] for c in controllers], labels=controllers)
    ax.set_yscale("symlog")
    ax.set_ylabel("closed-loop cost")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return [path]
