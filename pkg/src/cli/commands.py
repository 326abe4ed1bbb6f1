"""
Command implementations: train, dual-check, compare

Each command reads a validated RunConfig, writes its CSV artifacts (plus
optional plots and a metrics file) into the output directory and returns the
process exit status. Failures propagate as exceptions; main() maps them to
exit codes.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import yaml

from src.cli.export import load_theta, snapshot_frame, write_csv, write_theta
from src.cli.plots import plot_comparison, plot_dual_errors, plot_training
from src.cli.run_config import ConfigError, RunConfig
from src.config import settings
from src.control.baselines import MpcPolicy, Policy, ScenarioMpcPolicy, closed_loop_eval
from src.control.evaluation import evaluate_centralized, evaluate_v_and_policy_distributed
from src.dynamics.academic import AcademicEnv, nominal_model
from src.dynamics.linsys import AgentParams
from src.learning.q_learning import train
from src.network.topology import GraphTopology
from src.optim.admm import AdmmWorkspace, primal_residual
from src.optim.qp import KktSolution
from src.utils.logging import get_logger
from src.utils.metrics import get_current_memory_usage_mb, write_metrics

logger = get_logger(__name__)

DUAL_ERROR_COLUMNS = ["iteration", "dual_error", "eq_dual_error", "ineq_dual_error", "primal_residual"]
SUMMARY_COLUMNS = [
    "controller", "episodes", "median", "q1", "q3", "mean", "violations", "episodes_with_violations",
]


@dataclass
class CommandContext:
    """Resolved inputs of one command invocation."""

    config: RunConfig
    out_dir: Path
    threads: int = 1
    plots: bool = True

    def topology(self) -> GraphTopology:
        return self.config.topology.build()

    def environment(self, topology: GraphTopology) -> AcademicEnv:
        return self.config.environment.build(topology, seed=self.config.seed)


def _start(ctx: CommandContext, command: str) -> None:
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    resolved = ctx.out_dir / "resolved_config.yaml"
    resolved.write_text(
        yaml.safe_dump(ctx.config.model_dump(mode="json"), sort_keys=False), encoding="utf-8"
    )
    logger.info(f"{command}: writing artifacts to {ctx.out_dir} (seed {ctx.config.seed}, threads {ctx.threads})")


def _finish(ctx: CommandContext, command: str) -> int:
    write_metrics(ctx.out_dir / "metrics.prom")
    logger.info(f"{command} finished, RSS {get_current_memory_usage_mb():.1f} MB")
    return 0


def cmd_train(ctx: CommandContext) -> int:
    """Run Q-learning and write training.csv, theta.json and parameters.csv."""
    _start(ctx, "train")
    cfg = ctx.config
    topology = ctx.topology()
    env = ctx.environment(topology)
    scheme = cfg.scheme.build(topology, cfg.environment, seed=cfg.seed)

    log = train(
        env,
        scheme,
        topology,
        cfg.learner_config(),
        cfg.training.steps,
        tol=cfg.training.qp_tolerance,
        threads=ctx.threads,
    )

    frame = log.to_frame()
    params = snapshot_frame(log.snapshots)
    write_csv(frame, ctx.out_dir / "training.csv")
    write_csv(params, ctx.out_dir / "parameters.csv")
    write_theta(log, ctx.out_dir / "theta.json")
    if ctx.plots:
        plot_training(frame, params, ctx.out_dir / "plots")
    return _finish(ctx, "train")


def _dual_errors(
    reference: list[KktSolution], solutions: list[KktSolution]
) -> tuple[float, float]:
    eq = sum(float(np.linalg.norm(s.eq_duals - r.eq_duals)) for s, r in zip(solutions, reference))
    ineq = sum(float(np.linalg.norm(s.ineq_duals - r.ineq_duals)) for s, r in zip(solutions, reference))
    return eq, ineq


def cmd_dual_check(ctx: CommandContext) -> int:
    """
    Accuracy of the locally recovered multipliers along the ADMM iterations.

    The reference is the centralized solve at the same state; the error at
    round tau is the sum over agents of the equality and inequality dual
    errors.
    """
    _start(ctx, "dual-check")
    cfg = ctx.config
    topology = ctx.topology()
    env = ctx.environment(topology)
    scheme = cfg.scheme.build(topology, cfg.environment, seed=cfg.seed)
    if cfg.dual_check.state is not None:
        state = np.array(cfg.dual_check.state, dtype=float)
    else:
        state = env.reset().states
    wanted = set(cfg.dual_check.iterations)
    tol = cfg.training.qp_tolerance

    reference = evaluate_centralized(scheme, state, tol=tol)
    rows: list[dict] = []

    def record(tau: int, workspace: AdmmWorkspace, solutions: list[KktSolution]) -> None:
        if tau not in wanted:
            return
        eq, ineq = _dual_errors(reference.solutions, solutions)
        rows.append({
            "iteration": tau,
            "dual_error": eq + ineq,
            "eq_dual_error": eq,
            "ineq_dual_error": ineq,
            "primal_residual": primal_residual(workspace),
        })
        logger.debug(f"tau={tau}: dual error {eq + ineq:.3e}")

    result = evaluate_v_and_policy_distributed(
        scheme,
        topology,
        state,
        max(wanted),
        cfg.admm.gac_iterations,
        cfg.admm.rho,
        tol=tol,
        threads=ctx.threads,
        callback=record,
    )
    logger.info(
        f"Distributed V {result.value:.10g} vs centralized {reference.value:.10g}, "
        f"final dual error {rows[-1]['dual_error']:.3e}"
    )

    frame = pd.DataFrame(rows, columns=DUAL_ERROR_COLUMNS)
    write_csv(frame, ctx.out_dir / "dual_errors.csv")
    result.diagnostics["admm"].export_trace(ctx.out_dir / "admm_trace.csv")
    if ctx.plots:
        plot_dual_errors(frame, ctx.out_dir / "plots" / "dual_errors.svg")
    return _finish(ctx, "dual-check")


def summarize_comparison(episodes: pd.DataFrame) -> pd.DataFrame:
    """Median, quartiles, mean and violation counts per controller."""
    if episodes.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    grouped = episodes.groupby("controller", sort=False)
    summary = grouped.agg(
        episodes=("total_cost", "size"),
        median=("total_cost", "median"),
        q1=("total_cost", lambda c: c.quantile(0.25)),
        q3=("total_cost", lambda c: c.quantile(0.75)),
        mean=("total_cost", "mean"),
        violations=("violations", "sum"),
        episodes_with_violations=("violations", lambda v: int((v > 0).sum())),
    ).reset_index()
    return summary[SUMMARY_COLUMNS]


def _theta_path(ctx: CommandContext) -> Path:
    configured = ctx.config.compare.theta_file
    path = Path(configured) if configured else ctx.out_dir / "theta.json"
    if not path.is_file():
        raise ConfigError(
            f"No trained parameters at {path}; run 'netmpc train' first or set compare.theta_file"
        )
    return path


def _controllers(
    ctx: CommandContext, topology: GraphTopology, env: AcademicEnv
) -> dict[str, Callable[[], Policy]]:
    cfg = ctx.config
    nominal = [AgentParams(dynamics=nominal_model(nbrs)) for nbrs in topology.neighborhoods]
    base = cfg.scheme.build(topology, cfg.environment, params=nominal)
    solver = {
        "topology": topology if cfg.compare.solver == "distributed" else None,
        "admm_iterations": cfg.admm.iterations,
        "gac_iterations": cfg.admm.gac_iterations,
        "rho": cfg.admm.rho,
        "tol": cfg.compare.qp_tolerance or settings.qp_deployment_tolerance,
    }

    def trained() -> Policy:
        path = _theta_path(ctx)
        try:
            params = load_theta(path, topology)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        logger.info(f"Loaded trained parameters from {path}")
        return MpcPolicy(base.with_params(params), **solver)

    def scenario(source: str, offset: int) -> Callable[[], Policy]:
        return lambda: ScenarioMpcPolicy(
            base, cfg.compare.scenario_count, env.noise_interval, source, seed=cfg.seed + offset, **solver
        )

    return {
        "trained": trained,
        "nmpc": lambda: MpcPolicy(base, **solver),
        "smpc_inexact": scenario("inexact", 2),
        "smpc_true": scenario("true", 3),
    }


def cmd_compare(ctx: CommandContext) -> int:
    """
    Closed-loop comparison of the trained policy with nominal and scenario MPC.

    Every controller sees the same episode seeds, so plant noise and start
    states are matched across controllers.
    """
    _start(ctx, "compare")
    cfg = ctx.config
    topology = ctx.topology()
    env = ctx.environment(topology)
    factories = _controllers(ctx, topology, env)
    # fail on a missing parameter file before any rollout
    policies = {name: factories[name]() for name in cfg.compare.controllers}

    frames = []
    for name, policy in policies.items():
        result = closed_loop_eval(
            policy,
            env,
            cfg.compare.steps,
            cfg.compare.episodes,
            np.random.default_rng(cfg.seed + 1000),
            randomize_start=cfg.compare.randomize_start,
            threads=ctx.threads,
            controller=name,
        )
        frames.append(result.to_frame(name))

    episodes = pd.concat(frames, ignore_index=True)
    summary = summarize_comparison(episodes)
    write_csv(episodes, ctx.out_dir / "compare_episodes.csv")
    write_csv(summary, ctx.out_dir / "compare_summary.csv")
    for row in summary.itertuples(index=False):
        logger.info(
            f"{row.controller}: median {row.median:.4g} [{row.q1:.4g}, {row.q3:.4g}], "
            f"{row.violations} violations"
        )
    if ctx.plots:
        plot_comparison(episodes, ctx.out_dir / "plots" / "compare.svg")
    return _finish(ctx, "compare")


COMMANDS: dict[str, Callable[[CommandContext], int]] = {
    "train": cmd_train,
    "dual-check": cmd_dual_check,
    "compare": cmd_compare,
}
