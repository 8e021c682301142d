"""Run configuration: a flat `key = value` text format with dotted sections.

Every hyperparameter has a shipped default; a config file only needs the keys
it overrides.  Parsing is typed by the default's type, and parse -> serialize
-> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

ALGORITHMS = ("ccil", "malm", "cvag", "gail", "lgail", "bc")


@dataclass(frozen=True)
class RunConfig:
    algo: str = "ccil"
    env_name: str = "grid"
    env_cost_variant: str = "hazard"
    env_safety_coefficient: float = 0.4
    env_slip: float = 0.1
    net_hidden: str = "100,100"
    train_iterations: int = 500
    train_batch_size: int = 2000
    train_policy_passes: int = 3
    train_disc_passes: int = 1
    train_zero_cost_channel: bool = False
    gae_gamma: float = 0.995
    gae_lam: float = 0.97
    trust_max_kl: float = 0.01
    trust_cg_iters: int = 10
    trust_cg_tol: float = 1e-10
    trust_damping: float = 0.1
    trust_backtrack_ratio: float = 0.8
    trust_max_backtracks: int = 10
    policy_entropy: float = 0.0
    value_lr: float = 0.001
    value_epochs: int = 1
    disc_lr: float = 0.0003
    disc_entropy: float = 0.001
    disc_convention: str = "objective"
    lagrange_init: float = 0.01
    lagrange_lr: float = 0.05
    lagrange_mode: str = "plain"
    lagrange_limit: str = "auto"
    meta_lr: float = 0.05
    meta_train_frac: float = 0.7
    stop_recovered: float = 95.0
    stop_violation: float = 0.0
    stop_patience: int = 20
    bc_epochs: int = 200
    bc_lr: float = 0.001
    bc_batch_size: int = 256
    bc_train_frac: float = 0.7
    checkpoint_every: int = 50
    run_seeds: str = "0,1,2,3,4"
    run_out: str = "runs"
    expert_path: str = ""

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {ALGORITHMS}")
        if self.lagrange_limit != "auto":
            float(self.lagrange_limit)  # must parse if not auto

    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.net_hidden.split(",") if s.strip())

    def seeds(self) -> tuple[int, ...]:
        return parse_seeds(self.run_seeds)

    def limit_override(self) -> float | None:
        return None if self.lagrange_limit == "auto" else float(self.lagrange_limit)


def _key_for(attr: str) -> str:
    # env_name -> env.name; single-word attrs stay bare
    head, _, tail = attr.partition("_")
    return f"{head}.{tail}" if tail else head


_ATTR_BY_KEY = {_key_for(f.name): f.name for f in fields(RunConfig)}
_TYPE_BY_ATTR = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(text: str, type_name: str, key: str):
    if type_name == "str":
        return text
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name == "bool":
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {text!r}")
    raise AssertionError(f"unhandled config field type {type_name}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment, blank lines skipped."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        attr = _ATTR_BY_KEY.get(key)
        if attr is None:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        overrides[attr] = _parse_value(value, _TYPE_BY_ATTR[attr], key)
    return replace(base or RunConfig(), **overrides)


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{_key_for(f.name)} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def parse_seeds(text: str) -> tuple[int, ...]:
    """Seed lists: '3', '0,2,5', or the inclusive range form '0..4'."""
    text = text.strip()
    if ".." in text:
        lo, _, hi = text.partition("..")
        start, end = int(lo), int(hi)
        if end < start:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(start, end + 1))
    seeds = tuple(int(s) for s in text.split(",") if s.strip())
    if not seeds:
        raise ValueError("no seeds given")
    return seeds
