"""Per-seed training fan-out with streamed progress files and aggregation.

Every run writes into <out>/<algo>/<env>/<seed>/: a manifest (written before
training so even failed runs carry provenance), progress.csv streamed one row
per iteration, periodic policy checkpoints, the final policy, and metrics.json
with the trailing-window summary.  A run that dies mid-way leaves its partial
artifacts plus a FAILED marker.  Identical config and seed reproduce
progress.csv byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path

import numpy as np

from .config import RunConfig, serialize_config
from .envs import make_env
from .expert import ExpertDataset, load_expert_dataset
from .learners import (EngineConfig, bc_train, build_learner, evaluate_policy)
from .metrics import (METRIC_WINDOW, cost_violation, metric_row,
                      penalized_return, recovered_return)
from .nets import CategoricalPolicy, GaussianPolicy
from .params import save_params
from .trust_region import TrustRegionConfig

PROGRESS_COLUMNS = ("iteration", "steps", "mean_true_return", "mean_cost",
                    "lambda", "kl", "cost_rate", "r_pen", "r_rec", "cost_vio")
BC_EVAL_EPISODES = 100


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _describe_source() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
            timeout=10, check=False)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def engine_config(cfg: RunConfig) -> EngineConfig:
    """Translate the flat run config into the iteration engine's config."""
    return EngineConfig(
        batch_size=cfg.train_batch_size,
        gamma=cfg.gae_gamma,
        gae_lam=cfg.gae_lam,
        policy_passes=cfg.train_policy_passes,
        disc_passes=cfg.train_disc_passes,
        policy_entropy=cfg.policy_entropy,
        value_lr=cfg.value_lr,
        value_epochs=cfg.value_epochs,
        disc_lr=cfg.disc_lr,
        disc_entropy=cfg.disc_entropy,
        convention=cfg.disc_convention,
        lagrange_init=cfg.lagrange_init,
        lagrange_lr=cfg.lagrange_lr,
        lagrange_mode=cfg.lagrange_mode,
        limit_override=cfg.limit_override(),
        meta_lr=cfg.meta_lr,
        meta_train_frac=cfg.meta_train_frac,
        zero_cost_channel=cfg.train_zero_cost_channel,
        trust=TrustRegionConfig(
            max_kl=cfg.trust_max_kl,
            cg_iters=cfg.trust_cg_iters,
            cg_tol=cfg.trust_cg_tol,
            damping=cfg.trust_damping,
            backtrack_ratio=cfg.trust_backtrack_ratio,
            max_backtracks=cfg.trust_max_backtracks,
        ),
    )


def _build_env(cfg: RunConfig, seed: int):
    kwargs = {}
    if cfg.env_name == "grid":
        kwargs["slip"] = cfg.env_slip
    else:
        kwargs["cost_variant"] = cfg.env_cost_variant
        kwargs["safety_coefficient"] = cfg.env_safety_coefficient
    return make_env(cfg.env_name, seed=seed, **kwargs)


def load_dataset_for(cfg: RunConfig) -> ExpertDataset:
    """Load and validate the configured expert dataset.

    Errors name the expert-forge command, since a missing dataset is the
    normal state of a fresh checkout.
    """
    hint = (f"forge one with: costimit expert-forge --env {cfg.env_name} "
            f"--budget 2.0 --out expert_{cfg.env_name}.jsonl "
            "and point expert.path at the file")
    if not cfg.expert_path:
        raise FileNotFoundError(f"no expert dataset configured; {hint}")
    path = Path(cfg.expert_path)
    if not path.exists():
        raise FileNotFoundError(f"expert dataset {path} does not exist; {hint}")
    env = _build_env(cfg, seed=0)
    return load_expert_dataset(path, expect_env_hash=env.fingerprint())


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ProgressWriter:
    """Streams one CSV row per iteration; floats keep full repr precision."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(",".join(PROGRESS_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._fh.write(",".join(_format_cell(row[c]) for c in PROGRESS_COLUMNS) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def iteration_progress_row(record, anchor) -> dict:
    """Instantaneous per-iteration metrics; the windowed summary lives in metrics.json."""
    return {
        "iteration": record.iteration,
        "steps": record.steps,
        "mean_true_return": record.mean_true_return,
        "mean_cost": record.mean_cost,
        "lambda": record.lam,
        "kl": record.kl,
        "cost_rate": record.cost_rate,
        "r_pen": penalized_return(record.mean_true_return, anchor.mean_return,
                                  record.mean_cost, anchor.mean_cost),
        "r_rec": recovered_return(record.mean_true_return, anchor.mean_return),
        "cost_vio": cost_violation(record.mean_cost, anchor.mean_cost),
    }


def _write_manifest(run_path: Path, cfg: RunConfig, seed: int, dataset: ExpertDataset,
                    env_fingerprint: str) -> None:
    manifest = {
        "format": 1,
        "algo": cfg.algo,
        "env": cfg.env_name,
        "seed": seed,
        "config": serialize_config(cfg),
        "expert_path": cfg.expert_path,
        "expert_sha256": file_sha256(cfg.expert_path),
        "expert_summary": dataset.summary,
        "env_fingerprint": env_fingerprint,
        "source": _describe_source(),
    }
    (run_path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_metrics(run_path: Path, cfg: RunConfig, seed: int, returns, costs,
                   anchor, *, iterations_run: int, early_stopped: bool,
                   window: int = METRIC_WINDOW) -> dict:
    row = metric_row(returns, costs, anchor.mean_return, anchor.mean_cost,
                     window=min(window, len(returns)))
    payload = {
        "algo": cfg.algo,
        "env": cfg.env_name,
        "seed": seed,
        "iterations_run": iterations_run,
        "early_stopped": early_stopped,
        "final": row.as_dict(),
        "anchor": {"mean_return": anchor.mean_return,
                   "mean_cost": anchor.mean_cost,
                   "min_cost": anchor.min_cost},
    }
    (run_path / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload


def _bc_streams(seed: int):
    streams = np.random.SeedSequence(seed).spawn(5)
    make = lambda s: np.random.Generator(np.random.Philox(s))
    return make(streams[0]), make(streams[3]), make(streams[4])


def _train_bc(cfg: RunConfig, seed: int, env, dataset: ExpertDataset,
              run_path: Path, writer: ProgressWriter, anchor) -> tuple[list, list, bool]:
    rng_init, rng_shuffle, rng_eval = _bc_streams(seed)
    space = env.spec.action_space
    if space[0] == "discrete":
        policy = CategoricalPolicy(env.spec.obs_dim, cfg.hidden_sizes(), space[1],
                                   rng=rng_init)
    else:
        policy = GaussianPolicy(env.spec.obs_dim, cfg.hidden_sizes(), space[1],
                                rng=rng_init)
    obs, actions = dataset.pairs()
    bc_train(policy, obs, actions, rng_shuffle, epochs=cfg.bc_epochs, lr=cfg.bc_lr,
             batch_size=cfg.bc_batch_size, train_frac=cfg.bc_train_frac)
    report = evaluate_policy(policy, env, BC_EVAL_EPISODES, rng_eval)
    total_cost = float(report.episode_costs.sum())
    writer.write({
        "iteration": 1,
        "steps": report.total_steps,
        "mean_true_return": report.mean_return,
        "mean_cost": report.mean_cost,
        "lambda": 0.0,
        "kl": 0.0,
        "cost_rate": total_cost / report.total_steps,
        "r_pen": penalized_return(report.mean_return, anchor.mean_return,
                                  report.mean_cost, anchor.mean_cost),
        "r_rec": recovered_return(report.mean_return, anchor.mean_return),
        "cost_vio": cost_violation(report.mean_cost, anchor.mean_cost),
    })
    save_params(policy.params, run_path / "policy_final.npz")
    return [report.mean_return], [report.mean_cost], False


def _train_engine(cfg: RunConfig, seed: int, env, dataset: ExpertDataset,
                  run_path: Path, writer: ProgressWriter, anchor) -> tuple[list, list, bool]:
    obs, actions = dataset.pairs()
    learner = build_learner(cfg.algo, env, obs, actions, anchor,
                            cfg=engine_config(cfg), seed=seed,
                            hidden=cfg.hidden_sizes())
    ckpt_dir = run_path / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_record(record):
        writer.write(iteration_progress_row(record, anchor))
        if cfg.checkpoint_every > 0 and record.iteration % cfg.checkpoint_every == 0:
            save_params(learner.policy.params,
                        ckpt_dir / f"policy_{record.iteration:06d}.npz")

    records = learner.run(
        cfg.train_iterations,
        stop_recovered=cfg.stop_recovered,
        stop_violation=cfg.stop_violation,
        stop_patience=cfg.stop_patience,
        on_record=on_record,
    )
    save_params(learner.policy.params, run_path / "policy_final.npz")
    returns = [r.mean_true_return for r in records]
    costs = [r.mean_cost for r in records]
    return returns, costs, len(records) < cfg.train_iterations


def run_dir(out_root, algo: str, env_name: str, seed: int) -> Path:
    return Path(out_root) / algo / env_name / str(seed)


def train_single(cfg: RunConfig, seed: int, dataset: ExpertDataset) -> dict:
    """One (algo, seed) training run; artifacts under <out>/<algo>/<env>/<seed>/."""
    run_path = run_dir(cfg.run_out, cfg.algo, cfg.env_name, seed)
    run_path.mkdir(parents=True, exist_ok=True)
    failed_marker = run_path / "FAILED"
    if failed_marker.exists():
        failed_marker.unlink()
    env = _build_env(cfg, seed)
    anchor = dataset.anchor()
    _write_manifest(run_path, cfg, seed, dataset, env.fingerprint())
    writer = ProgressWriter(run_path / "progress.csv")
    try:
        if cfg.algo == "bc":
            returns, costs, early = _train_bc(cfg, seed, env, dataset, run_path,
                                              writer, anchor)
        else:
            returns, costs, early = _train_engine(cfg, seed, env, dataset, run_path,
                                                  writer, anchor)
        payload = _write_metrics(run_path, cfg, seed, returns, costs, anchor,
                                 iterations_run=len(returns), early_stopped=early)
        return {"seed": seed, "status": "ok", "run_dir": str(run_path),
                "metrics": payload}
    except Exception as exc:
        failed_marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        return {"seed": seed, "status": "failed", "run_dir": str(run_path),
                "error": f"{type(exc).__name__}: {exc}"}
    finally:
        writer.close()


def run_training(cfg: RunConfig) -> list[dict]:
    """Serial fan-out over the configured seeds; one result dict per seed."""
    dataset = load_dataset_for(cfg)
    return [train_single(cfg, seed, dataset) for seed in cfg.seeds()]


# -- aggregation -------------------------------------------------------------------


def collect_metrics(out_root) -> list[dict]:
    """All metrics.json payloads under <out>/<algo>/<env>/<seed>/."""
    found = []
    for path in sorted(Path(out_root).glob("*/*/*/metrics.json")):
        with open(path, "r", encoding="utf-8") as fh:
            found.append(json.load(fh))
    return found


def collect_failures(out_root) -> list[str]:
    return [str(p.parent) for p in sorted(Path(out_root).glob("*/*/*/FAILED"))]


def aggregate(out_root) -> tuple[str, dict]:
    """Across-seed mean and spread per algorithm, one block per environment."""
    rows = collect_metrics(out_root)
    failures = collect_failures(out_root)
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["env"], row["algo"]), []).append(row)

    def stat(values):
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    payload = {"environments": {}, "failed_runs": failures}
    lines = []
    for env_name in sorted({env for env, _ in groups}):
        lines.append(f"environment: {env_name}")
        lines.append(f"{'algorithm':<12}{'seeds':<7}{'recovered':<18}"
                     f"{'violation':<18}{'penalized'}")
        env_block = {}
        for (env, algo), items in sorted(groups.items()):
            if env != env_name:
                continue
            rec_m, rec_s = stat([i["final"]["recovered"] for i in items])
            vio_m, vio_s = stat([i["final"]["violation"] for i in items])
            pen_m, pen_s = stat([i["final"]["penalized"] for i in items])
            lines.append(
                f"{algo:<12}{len(items):<7}"
                f"{rec_m:6.1f} +/- {rec_s:<7.1f}"
                f"{vio_m:6.2f} +/- {vio_s:<7.2f}"
                f"{pen_m:6.2f} +/- {pen_s:.2f}")
            env_block[algo] = {
                "seeds": sorted(i["seed"] for i in items),
                "recovered": {"mean": rec_m, "std": rec_s},
                "violation": {"mean": vio_m, "std": vio_s},
                "penalized": {"mean": pen_m, "std": pen_s},
            }
        payload["environments"][env_name] = env_block
        lines.append("")
    if failures:
        lines.append("failed runs:")
        lines.extend(f"  {f}" for f in failures)
    else:
        lines.append("failed runs: none")
    return "\n".join(lines) + "\n", payload


def write_summary(out_root) -> tuple[Path, Path]:
    text, payload = aggregate(out_root)
    root = Path(out_root)
    txt = root / "summary.txt"
    js = root / "summary.json"
    txt.write_text(text, encoding="utf-8")
    js.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                  encoding="utf-8")
    return txt, js
