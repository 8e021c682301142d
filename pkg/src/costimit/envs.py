"""Toy constrained MDPs with a known per-step cost channel.

Each environment returns a StepOutcome whose true reward is privileged:
learner-facing code paths (surrogate labeling, advantages, discriminator)
must never consume it, and the batch views handed to those paths do not
carry it.  Reporting and expert forging read it deliberately.

Costs follow the indicator rule: cost 1 exactly when the indicator value is
strictly larger than the safety coefficient.  Variants whose indicator is
already binary (hazard membership) use the indicator directly and ignore
the coefficient.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np


def indicator_cost(value: float, coefficient: float) -> float:
    """1.0 iff value exceeds the coefficient strictly, else 0.0."""
    return 1.0 if value > coefficient else 0.0


@dataclass(frozen=True)
class CmdpSpec:
    """Interface-level summary of a constrained MDP."""

    name: str
    obs_dim: int
    action_space: tuple  # ("discrete", n) or ("box", dim, low, high)
    discount: float = 0.995
    horizon: int = 50
    cost_variant: str = "hazard"
    safety_coefficient: float | None = None

    def __post_init__(self):
        if not (0.0 < self.discount < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    def canonical_block(self, extra: dict | None = None) -> str:
        """Deterministic printable block used by run manifests and dataset headers."""
        rows = {f.name: getattr(self, f.name) for f in fields(self)}
        if extra:
            rows.update(extra)
        lines = [f"cmdp {self.name}"]
        for key in sorted(rows):
            lines.append(f"  {key}: {rows[key]!r}")
        return "\n".join(lines) + "\n"

    def spec_hash(self, extra: dict | None = None) -> str:
        return hashlib.sha256(self.canonical_block(extra).encode("utf-8")).hexdigest()


@dataclass
class StepOutcome:
    observation: np.ndarray
    cost: float
    done: bool
    true_reward: float  # privileged: expert forge and metrics only
    action_clipped: bool = False


@dataclass(frozen=True)
class GridHazardSpec:
    """Gridworld with hazard cells; entering one costs 1."""

    width: int = 9
    height: int = 5
    start: tuple[int, int] = (0, 2)
    goal: tuple[int, int] = (8, 2)
    hazards: tuple[tuple[int, int], ...] = tuple(
        (x, y) for x in (3, 4, 5) for y in (1, 2, 3, 4)
    )
    slip: float = 0.1
    progress_coef: float = 0.1
    horizon: int = 50
    discount: float = 0.995

    def __post_init__(self):
        if self.start in self.hazards:
            raise ValueError("start cell cannot be a hazard")
        for cell in (self.start, self.goal):
            x, y = cell
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"cell {cell} outside the grid")
        if not (0.0 <= self.slip < 1.0):
            raise ValueError("slip must lie in [0, 1)")


# action index -> (dx, dy); y grows downward
GRID_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


class GridHazard:
    """Tabular hazard gridworld.

    One-hot observations over cells, four slip-perturbed moves, cost 1 on
    entering a hazard cell.  The reward is a potential-based progress term
    (progress_coef per Manhattan step toward the goal) plus a bonus of 1 on
    arrival; the progress sum telescopes, so every goal-reaching route earns
    the same undiscounted return and route choice shows up only in the cost
    channel.  The goal is absorbing: after arrival the state self-loops with
    zero reward and cost, and every episode runs the full horizon.  Fixed
    episode lengths keep termination from leaking into learned rewards, and
    the absorbing goal matches the tabular export of the same grid.
    """

    def __init__(self, spec: GridHazardSpec = GridHazardSpec(), *, seed: int = 0):
        self.grid = spec
        self.n_states = spec.width * spec.height
        self.n_actions = 4
        self._hazards = frozenset(spec.hazards)
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self._pos = spec.start
        self._t = 0
        self.spec = CmdpSpec(
            name="grid",
            obs_dim=self.n_states,
            action_space=("discrete", 4),
            discount=spec.discount,
            horizon=spec.horizon,
            cost_variant="hazard",
            safety_coefficient=None,
        )

    def rng_state(self) -> dict:
        return self._rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state

    def fingerprint(self) -> str:
        """Spec hash extended with the grid geometry and dynamics."""
        return self.spec.spec_hash(extra={
            "width": self.grid.width, "height": self.grid.height,
            "start": self.grid.start, "goal": self.grid.goal,
            "hazards": tuple(sorted(self.grid.hazards)), "slip": self.grid.slip,
            "progress_coef": self.grid.progress_coef,
        })

    def _cell_index(self, cell: tuple[int, int]) -> int:
        x, y = cell
        return y * self.grid.width + x

    def _obs(self) -> np.ndarray:
        out = np.zeros(self.n_states)
        out[self._cell_index(self._pos)] = 1.0
        return out

    def reset(self) -> np.ndarray:
        self._pos = self.grid.start
        self._t = 0
        return self._obs()

    def _move(self, cell: tuple[int, int], action: int) -> tuple[int, int]:
        dx, dy = GRID_MOVES[action]
        x = min(max(cell[0] + dx, 0), self.grid.width - 1)
        y = min(max(cell[1] + dy, 0), self.grid.height - 1)
        return (x, y)

    def _goal_distance(self, cell: tuple[int, int]) -> int:
        gx, gy = self.grid.goal
        return abs(cell[0] - gx) + abs(cell[1] - gy)

    def step(self, action: int) -> StepOutcome:
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"action {action} out of range")
        self._t += 1
        done = self._t >= self.grid.horizon
        if self._pos == self.grid.goal:  # absorbing: position frozen, nothing accrues
            return StepOutcome(self._obs(), 0.0, done, true_reward=0.0)
        if self._rng.random() < self.grid.slip:
            action = int(self._rng.integers(4))
        before = self._goal_distance(self._pos)
        self._pos = self._move(self._pos, action)
        cost = 1.0 if self._pos in self._hazards else 0.0
        reward = self.grid.progress_coef * (before - self._goal_distance(self._pos))
        if self._pos == self.grid.goal:
            reward += 1.0
        return StepOutcome(self._obs(), cost, done, true_reward=reward)


@dataclass(frozen=True)
class PointHazardSpec:
    """Planar point mass steering toward a goal under one of three cost rules."""

    arena_radius: float = 2.0
    start: tuple[float, float] = (-1.2, 0.0)
    goal: tuple[float, float] = (1.2, 0.0)
    goal_radius: float = 0.3
    hazards: tuple[tuple[tuple[float, float], float], ...] = (((0.0, 0.0), 0.5),)
    cost_variant: str = "hazard"  # hazard | control-cost | speed-limit
    safety_coefficient: float = 0.4
    start_jitter: float = 0.05
    horizon: int = 200
    discount: float = 0.995

    def __post_init__(self):
        if self.cost_variant not in ("hazard", "control-cost", "speed-limit"):
            raise ValueError(f"unknown cost variant {self.cost_variant!r}")


class PointHazard:
    """Continuous 2-D navigation: velocity-integrating point mass.

    Observation is (position, velocity, goal - position).  Reward is the
    negative goal distance plus a bonus of 10 on arrival.  Out-of-range
    actions are clipped to [-1, 1] and flagged.
    """

    ACTION_LOW, ACTION_HIGH = -1.0, 1.0

    def __init__(self, spec: PointHazardSpec = PointHazardSpec(), *, seed: int = 0):
        self.point = spec
        self.n_actions = None
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self._pos = np.array(spec.start, dtype=np.float64)
        self._vel = np.zeros(2)
        self._t = 0
        self.spec = CmdpSpec(
            name="point",
            obs_dim=6,
            action_space=("box", 2, self.ACTION_LOW, self.ACTION_HIGH),
            discount=spec.discount,
            horizon=spec.horizon,
            cost_variant=spec.cost_variant,
            safety_coefficient=spec.safety_coefficient,
        )

    def rng_state(self) -> dict:
        return self._rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state

    def fingerprint(self) -> str:
        """Spec hash extended with the arena layout and dynamics."""
        return self.spec.spec_hash(extra={
            "arena_radius": self.point.arena_radius, "start": self.point.start,
            "goal": self.point.goal, "goal_radius": self.point.goal_radius,
            "hazards": self.point.hazards, "start_jitter": self.point.start_jitter,
        })

    def _obs(self) -> np.ndarray:
        goal = np.asarray(self.point.goal)
        return np.concatenate([self._pos, self._vel, goal - self._pos])

    def reset(self) -> np.ndarray:
        jitter = self.point.start_jitter * self._rng.standard_normal(2)
        self._pos = np.asarray(self.point.start, dtype=np.float64) + jitter
        self._vel = np.zeros(2)
        self._t = 0
        return self._obs()

    def _cost(self, action: np.ndarray) -> float:
        variant = self.point.cost_variant
        if variant == "hazard":
            inside = any(
                np.hypot(*(self._pos - np.asarray(c))) <= r for c, r in self.point.hazards
            )
            return 1.0 if inside else 0.0
        if variant == "control-cost":
            return indicator_cost(float(action @ action), self.point.safety_coefficient)
        return indicator_cost(float(np.hypot(*self._vel)), self.point.safety_coefficient)

    def step(self, action: np.ndarray) -> StepOutcome:
        raw = np.asarray(action, dtype=np.float64).reshape(2)
        clipped = np.clip(raw, self.ACTION_LOW, self.ACTION_HIGH)
        was_clipped = bool(np.any(raw != clipped))
        self._vel = 0.9 * self._vel + 0.15 * clipped
        self._pos = self._pos + self._vel
        radius = float(np.hypot(*self._pos))
        if radius > self.point.arena_radius:
            self._pos *= self.point.arena_radius / radius
        self._t += 1
        dist = float(np.hypot(*(self._pos - np.asarray(self.point.goal))))
        reached = dist <= self.point.goal_radius
        reward = -dist + (10.0 if reached else 0.0)
        done = reached or self._t >= self.point.horizon
        return StepOutcome(self._obs(), self._cost(clipped), done, reward, was_clipped)


def make_env(name: str, *, seed: int = 0, cost_variant: str | None = None,
             safety_coefficient: float | None = None, slip: float | None = None):
    """Environment registry used by the CLI; names: grid, point."""
    if name == "grid":
        kwargs = {}
        if slip is not None:
            kwargs["slip"] = slip
        return GridHazard(GridHazardSpec(**kwargs), seed=seed)
    if name == "point":
        kwargs = {}
        if cost_variant is not None:
            kwargs["cost_variant"] = cost_variant
        if safety_coefficient is not None:
            kwargs["safety_coefficient"] = safety_coefficient
        return PointHazard(PointHazardSpec(**kwargs), seed=seed)
    raise ValueError(f"unknown environment {name!r}; known: grid, point")
