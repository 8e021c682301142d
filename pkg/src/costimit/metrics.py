"""Evaluation metrics for constrained imitation runs.

All metrics are taken relative to expert anchors: R_E (mean expert episode
return) and J_E (mean expert episode cost).  Final numbers average the last
100 iterations of a run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

PENALTY_CONSTANT = 1.2
METRIC_WINDOW = 100


def _check_anchors(r_e: float, j_e: float) -> None:
    if not (math.isfinite(r_e) and math.isfinite(j_e)):
        raise ValueError("expert anchors must be finite")
    if r_e == 0.0:
        raise ValueError("expert return anchor must be nonzero")
    if j_e <= 0.0:
        raise ValueError("expert cost anchor must be positive")


def penalized_return(r: float, r_e: float, j: float, j_e: float,
                     kappa: float = PENALTY_CONSTANT) -> float:
    """Return ratio minus a penalty on cost overshoot.

    R/R_E - kappa * max(J/J_E - 1, 0); overshoot only, staying under the
    expert's cost is never rewarded.
    """
    _check_anchors(r_e, j_e)
    return r / r_e - kappa * max(j / j_e - 1.0, 0.0)


def recovered_return(r: float, r_e: float) -> float:
    """Percentage of the expert return recovered, floored at 0 for R < 0."""
    if not math.isfinite(r_e) or r_e == 0.0:
        raise ValueError("expert return anchor must be finite and nonzero")
    if r < 0.0:
        return 0.0
    return 100.0 * r / r_e


def cost_violation(j: float, j_e: float) -> float:
    """How far the mean episode cost exceeds the expert's; 0 when within it."""
    if not (math.isfinite(j) and math.isfinite(j_e)):
        raise ValueError("costs must be finite")
    return max(0.0, j - j_e)


def cost_rate(total_cost: float, total_steps: int) -> float:
    """Cumulative cost divided by cumulative environment steps."""
    if total_steps <= 0:
        raise ValueError("cost rate needs at least one environment step")
    return total_cost / total_steps


@dataclass(frozen=True)
class MetricRow:
    """Windowed run summary against the expert anchors."""

    window: int
    mean_return: float
    mean_cost: float
    expert_return: float
    expert_cost: float
    penalized: float
    recovered: float
    violation: float
    kappa: float = PENALTY_CONSTANT

    def as_dict(self) -> dict:
        return asdict(self)


def metric_row(returns, costs, r_e: float, j_e: float, *,
               window: int = METRIC_WINDOW, kappa: float = PENALTY_CONSTANT) -> MetricRow:
    """Summarize per-iteration return/cost histories over the trailing window.

    Shrinks to the full run (with a warning) when the run is shorter than the
    window.
    """
    returns = np.asarray(returns, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if len(returns) != len(costs):
        raise ValueError("return and cost histories must be the same length")
    if len(returns) == 0:
        raise ValueError("empty run history")
    if len(returns) < window:
        warnings.warn(
            f"run has {len(returns)} iterations, shrinking the {window}-iteration "
            "metric window to the full run",
            stacklevel=2,
        )
        window = len(returns)
    r = float(returns[-window:].mean())
    j = float(costs[-window:].mean())
    return MetricRow(
        window=window,
        mean_return=r,
        mean_cost=j,
        expert_return=r_e,
        expert_cost=j_e,
        penalized=penalized_return(r, r_e, j, j_e, kappa),
        recovered=recovered_return(r, r_e),
        violation=cost_violation(j, j_e),
        kappa=kappa,
    )
