"""Training-curve figures rendered from progress.csv files.

One figure per environment: true return, episode cost, and cumulative cost
rate against iteration, with a mean line and a one-standard-deviation band
across seeds for every algorithm found under the run root.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PANELS = (("mean_true_return", "mean true return"),
          ("mean_cost", "mean episode cost"),
          ("cost_rate", "cost rate"))


def read_progress(path) -> dict[str, np.ndarray]:
    """progress.csv as column arrays."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return {name: np.array([float(r[name]) for r in rows])
            for name in reader.fieldnames}


def _collect_runs(out_root) -> dict[str, dict[str, list[dict[str, np.ndarray]]]]:
    """{env: {algo: [per-seed column dicts]}} for every finished progress file."""
    runs: dict[str, dict[str, list[dict[str, np.ndarray]]]] = {}
    for path in sorted(Path(out_root).glob("*/*/*/progress.csv")):
        seed_dir = path.parent
        algo, env_name = seed_dir.parent.parent.name, seed_dir.parent.name
        if (seed_dir / "FAILED").exists():
            continue
        try:
            columns = read_progress(path)
        except ValueError:
            continue
        runs.setdefault(env_name, {}).setdefault(algo, []).append(columns)
    return runs


def _band(series: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and std across seeds, nan-padded so early-stopped runs keep their tails."""
    width = max(len(s) for s in series)
    stacked = np.full((len(series), width), np.nan)
    for i, s in enumerate(series):
        stacked[i, :len(s)] = s
    return (np.arange(1, width + 1), np.nanmean(stacked, axis=0),
            np.nanstd(stacked, axis=0))


def _anchor_for(out_root, env_name: str) -> dict | None:
    for path in sorted(Path(out_root).glob(f"*/{env_name}/*/metrics.json")):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)["anchor"]
    return None


def render_training_figure(out_root, env_name: str,
                           algos: dict[str, list[dict[str, np.ndarray]]]) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(13.5, 3.8))
    anchor = _anchor_for(out_root, env_name)
    for ax, (column, label) in zip(axes, PANELS):
        for algo in sorted(algos):
            xs, mean, std = _band([run[column] for run in algos[algo]])
            line, = ax.plot(xs, mean, label=algo, linewidth=1.4)
            ax.fill_between(xs, mean - std, mean + std,
                            color=line.get_color(), alpha=0.18, linewidth=0)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    if anchor is not None:
        axes[0].axhline(anchor["mean_return"], color="black", linestyle="--",
                        linewidth=1.0, label="expert")
        axes[1].axhline(anchor["mean_cost"], color="black", linestyle="--",
                        linewidth=1.0, label="expert")
    axes[0].legend(fontsize=8)
    fig.suptitle(f"training curves: {env_name}")
    fig.tight_layout()
    out = Path(out_root) / f"training_{env_name}.svg"
    fig.savefig(out)
    plt.close(fig)
    return out


def render_figures(out_root) -> list[Path]:
    """One SVG per environment under the run root; returns the written paths."""
    return [render_training_figure(out_root, env_name, algos)
            for env_name, algos in sorted(_collect_runs(out_root).items())]
