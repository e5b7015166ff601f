"""Small continuous-control environments with known reward surfaces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    max_episode_length: int

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("bounds must match action_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be < action_high")

    def clip(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        return np.clip(a, self.action_low, self.action_high)


class Env:
    """``reset(rng) -> state``; ``step(action) -> (state, reward, done)``.

    Actions are clipped to the spec bounds before they touch the dynamics.
    """

    spec: EnvSpec
    id: str = ""

    @property
    def solved(self) -> bool:
        """Whether the episode so far meets the task's success condition."""
        return False

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action):
        raise NotImplementedError


class Bandit(Env):
    """One-step task with a constant zero state and a reward surface."""

    def __init__(self, spec: EnvSpec, reward_fn, env_id: str, optimum: float,
                 success_fn=None):
        self.spec = spec
        self.reward_fn = reward_fn
        self.id = env_id
        self.optimum = optimum
        self.success_fn = success_fn
        self._state = np.zeros(spec.state_dim)
        self._last = None

    def reset(self, rng=None):
        self._last = None
        return self._state.copy()

    def reward(self, action) -> float:
        return float(self.reward_fn(self.spec.clip(action)))

    def step(self, action):
        self._last = self.spec.clip(action)
        return self._state.copy(), float(self.reward_fn(self._last)), True

    @property
    def solved(self) -> bool:
        if self._last is None:
            return False
        if self.success_fn is None:
            return self.reward_fn(self._last) >= 0.95 * self.optimum
        return bool(self.success_fn(self._last))


LOCAL_MODE = (-1.0, -1.0)
GLOBAL_MODE = (4.0, 4.0)


def deceptive_reward(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    d_local = np.sum((a - LOCAL_MODE) ** 2)
    d_global = np.sum((a - GLOBAL_MODE) ** 2)
    return 0.8 * math.exp(-d_local / 0.5) + 1.0 * math.exp(-d_global / 0.5)


def deceptive_bandit_2d() -> Bandit:
    """Actions in ``[-6, 6]^2``; a 0.8 bump at (-1,-1) near the origin and
    the 1.0 optimum at (4, 4)."""
    spec = EnvSpec(1, 2, (-6.0, -6.0), (6.0, 6.0), 1)
    return Bandit(spec, deceptive_reward, "deceptive_bandit2d", optimum=1.0,
                  success_fn=lambda a: np.linalg.norm(a - GLOBAL_MODE) < 1.0)


QUADRATIC_OPTIMUM = 1.0


def quadratic_bandit_1d() -> Bandit:
    """``r(a) = 1 - (a - 1)^2 / 4`` on ``[-3, 3]``; best reward 1 at a = 1."""
    spec = EnvSpec(1, 1, (-3.0,), (3.0,), 1)
    return Bandit(spec, lambda a: 1.0 - (float(a[0]) - QUADRATIC_OPTIMUM) ** 2 / 4.0,
                  "quadratic_bandit1d", optimum=1.0)


class PointMass(Env):
    """A point on ``[-10, 10]^2`` moved by a velocity action in ``[-1, 1]^2``.

    The state is ``(x, y, goal_x - x, goal_y - y)``.
    """

    BOUND = 10.0

    def __init__(self, env_id: str, start, goal, episode_length: int = 200):
        self.id = env_id
        self.spec = EnvSpec(4, 2, (-1.0, -1.0), (1.0, 1.0), episode_length)
        self.start = np.asarray(start, dtype=np.float64)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.pos = self.start.copy()
        self.t = 0

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal - self.pos])

    def reset(self, rng=None):
        self.pos = self.start.copy()
        self.t = 0
        return self.observe()

    def move(self, action):
        self.pos = np.clip(self.pos + self.spec.clip(action), -self.BOUND, self.BOUND)
        self.t += 1

    @property
    def goal_distance(self) -> float:
        return float(np.linalg.norm(self.pos - self.goal))

    @property
    def solved(self) -> bool:
        return self.goal_distance < 1.0


class PointMassDeceptive(PointMass):
    """Dense distance penalty plus a bonus bump sitting on the direct path."""

    START = (0.0, -8.0)
    GOAL = (0.0, 8.0)
    TRAP = (0.0, -2.0)

    def __init__(self):
        super().__init__("point_mass_deceptive", self.START, self.GOAL)
        self.trap = np.asarray(self.TRAP)

    def reward_at(self, pos) -> float:
        pos = np.asarray(pos, dtype=np.float64)
        return float(-0.01 * np.linalg.norm(pos - self.goal)
                     + 0.5 * math.exp(-np.sum((pos - self.trap) ** 2)))

    def step(self, action):
        self.move(action)
        return self.observe(), self.reward_at(self.pos), self.t >= self.spec.max_episode_length


class PointMassSparse(PointMass):
    """Reward 1 on entering the unit disc around the goal, which ends the episode."""

    START = (0.0, -8.0)
    GOAL = (0.0, 8.0)

    def __init__(self):
        super().__init__("point_mass_sparse", self.START, self.GOAL)

    def step(self, action):
        self.move(action)
        hit = self.solved
        done = hit or self.t >= self.spec.max_episode_length
        return self.observe(), 1.0 if hit else 0.0, done


def point_mass_deceptive() -> PointMassDeceptive:
    return PointMassDeceptive()


def point_mass_sparse() -> PointMassSparse:
    return PointMassSparse()


ENVS = {
    "deceptive_bandit2d": deceptive_bandit_2d,
    "quadratic_bandit1d": quadratic_bandit_1d,
    "point_mass_deceptive": point_mass_deceptive,
    "point_mass_sparse": point_mass_sparse,
}


def make_env(env_id: str) -> Env:
    try:
        return ENVS[env_id]()
    except KeyError:
        raise ValueError(f"unknown env {env_id!r}; choose from {sorted(ENVS)}") from None
