"""
Prometheus metrics for monitoring solver and training performance
"""
from pathlib import Path

import psutil
from prometheus_client import REGISTRY, Counter, Gauge, Histogram, Info, write_to_textfile

from src.config import settings


# QP Solver Metrics
qp_solves_total = Counter(
    "netmpc_qp_solves_total",
    "Total QP solves",
    ["method", "outcome"]  # method: warm/interior_point, outcome: ok/infeasible/nonconvex/max_iter
)

qp_solve_duration_seconds = Histogram(
    "netmpc_qp_solve_duration_seconds",
    "QP solve latency",
    ["backend"],  # dense, sparse
    buckets=(1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.5, 1.0, 5.0),
)

qp_degenerate_constraints_total = Counter(
    "netmpc_qp_degenerate_constraints_total",
    "Weakly active constraints flagged after a solve",
)

# Consensus Metrics
admm_rounds_total = Counter(
    "netmpc_admm_rounds_total",
    "Total synchronous ADMM rounds",
)

admm_primal_residual = Gauge(
    "netmpc_admm_primal_residual",
    "Primal residual after the latest ADMM round",
)

gac_rounds_total = Counter(
    "netmpc_gac_rounds_total",
    "Total global average consensus rounds",
)

# Learning Metrics
training_steps_total = Counter(
    "netmpc_training_steps_total",
    "Total environment steps taken during training",
    ["evaluation"]  # distributed, centralized
)

parameter_updates_total = Counter(
    "netmpc_parameter_updates_total",
    "Total applied parameter updates",
)

td_error_last = Gauge(
    "netmpc_td_error_last",
    "Most recent network TD error",
)

# Evaluation Metrics
closed_loop_episodes_total = Counter(
    "netmpc_closed_loop_episodes_total",
    "Total closed-loop evaluation episodes",
    ["controller"]
)

# Application Info
app_info = Info(
    "netmpc_app",
    "netmpc-rl application information"
)

app_info.info({
    "version": "0.1.0",
    "environment": settings.environment,
    "python_version": "3.11+",
})


def get_current_memory_usage_mb() -> float:
    """Get current memory usage in MB."""
    return psutil.Process().memory_info().rss / 1024 / 1024


def write_metrics(path: Path) -> None:
    """Dump the default registry in the Prometheus text format."""
    if not settings.enable_metrics:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
