"""Desk-scale sparse-reward environments.

Three small tasks with a uniform episodic interface stand in for large
benchmark suites: a continuous point mass, a discrete gridworld, and a
discrete falling-object catcher. Rewards are sparse by construction, so a
random policy rarely scores and learning curves have room to move.

Interface: env.spec describes the task; reset(rng) returns the first
observation; step(action) returns a StepResult. Instances are single-owner;
run several instances for parallel evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContinuousActions:
    dim: int
    low: float
    high: float


@dataclass(frozen=True)
class DiscreteActions:
    n: int


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    actions: object
    max_steps: int
    reward_semantics: str
    feature_names: tuple


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool
    step: int


def tree_feature_names(spec, layout):
    """Feature names for a tree reading the given transition layout.

    layout "sa" is observation then action; "sas" appends the next
    observation under *_next names. Discrete actions contribute one entry.
    """
    if isinstance(spec.actions, DiscreteActions):
        action_names = ("action",)
    else:
        action_names = tuple(f"action_{i}" for i in range(spec.actions.dim))
    if layout == "sa":
        return spec.feature_names + action_names
    if layout == "sas":
        return spec.feature_names + action_names + tuple(f"{n}_next" for n in spec.feature_names)
    raise ValueError(f"unknown feature layout {layout!r}")


def tree_feature_dim(spec, layout):
    return len(tree_feature_names(spec, layout))


class SparsePointMass:
    """2-D point mass pushed by bounded forces toward a fixed goal.

    Arena is [-1, 1]^2. Observation is (x, y, vx, vy); actions are forces in
    [-1, 1]^2. Dynamics per step: x <- x + v*dt, then v <- v + a*dt -
    friction*v, with dt=0.05 and friction=0.1 (so |v| stays below dt/friction
    = 0.5 per axis). Positions are clipped to the arena. Reward is +1 exactly
    once, when the position comes within radius 0.05 of the goal, which ends
    the episode; otherwise 0. Starts are uniform in the box
    [-0.9, -0.5] x [-0.9, -0.5]; the goal sits at (0.6, 0.6).
    """

    DT = 0.05
    FRICTION = 0.1
    GOAL = np.array([0.6, 0.6])
    GOAL_RADIUS = 0.05
    START_LOW = -0.9
    START_HIGH = -0.5

    def __init__(self, max_steps=200):
        self.spec = EnvSpec(
            observation_dim=4,
            actions=ContinuousActions(dim=2, low=-1.0, high=1.0),
            max_steps=max_steps,
            reward_semantics="+1 within radius 0.05 of the goal (ends episode), else 0",
            feature_names=("x", "y", "vx", "vy"),
        )
        self._pos = None
        self._vel = None
        self._step = 0

    def reset(self, rng):
        self._pos = rng.uniform(self.START_LOW, self.START_HIGH, size=2)
        self._vel = np.zeros(2)
        self._step = 0
        return self._obs()

    def _obs(self):
        return np.concatenate([self._pos, self._vel])

    def step(self, action):
        if self._pos is None:
            raise RuntimeError("call reset before step")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (2,):
            raise ValueError(f"expected a force vector of shape (2,), got {a.shape}")
        self._pos = np.clip(self._pos + self._vel * self.DT, -1.0, 1.0)
        self._vel = self._vel + a * self.DT - self.FRICTION * self._vel
        self._step += 1
        at_goal = float(np.linalg.norm(self._pos - self.GOAL)) <= self.GOAL_RADIUS
        truncated = not at_goal and self._step >= self.spec.max_steps
        return StepResult(
            observation=self._obs(),
            reward=1.0 if at_goal else 0.0,
            done=at_goal or truncated,
            truncated=truncated,
            step=self._step,
        )


class SparseGridworld:
    """N x N grid with a single rewarded goal cell.

    Observation is (x, y, gx - x, gy - y) scaled by 1/(N-1). Actions are
    0 right, 1 left, 2 up, 3 down; moves into walls or off the grid leave the
    agent in place. Reward is +1 on entering the goal (ends episode), else 0.
    Start and goal are fixed cells, default (0, 0) and (N-1, N-1); the budget
    is 4*N steps. Transitions are fully deterministic.
    """

    MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))

    def __init__(self, n=8, walls=(), start=(0, 0), goal=None):
        if n < 2:
            raise ValueError(f"grid size must be >= 2, got {n}")
        self.n = int(n)
        self.start = (int(start[0]), int(start[1]))
        self.goal = (self.n - 1, self.n - 1) if goal is None else (int(goal[0]), int(goal[1]))
        self.walls = frozenset((int(x), int(y)) for x, y in walls)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self._inside(cell):
                raise ValueError(f"{name} cell {cell} outside the {self.n}x{self.n} grid")
            if cell in self.walls:
                raise ValueError(f"{name} cell {cell} is a wall")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        self.spec = EnvSpec(
            observation_dim=4,
            actions=DiscreteActions(n=4),
            max_steps=4 * self.n,
            reward_semantics="+1 on entering the goal cell (ends episode), else 0",
            feature_names=("x", "y", "goal_dx", "goal_dy"),
        )
        self._cell = None
        self._step = 0

    def _inside(self, cell):
        return 0 <= cell[0] < self.n and 0 <= cell[1] < self.n

    def reset(self, rng):
        self._cell = self.start
        self._step = 0
        return self._obs()

    def _obs(self):
        s = self.n - 1
        x, y = self._cell
        gx, gy = self.goal
        return np.array([x / s, y / s, (gx - x) / s, (gy - y) / s])

    def step(self, action):
        if self._cell is None:
            raise RuntimeError("call reset before step")
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"action must be in [0, 4), got {action}")
        dx, dy = self.MOVES[action]
        proposed = (self._cell[0] + dx, self._cell[1] + dy)
        if self._inside(proposed) and proposed not in self.walls:
            self._cell = proposed
        self._step += 1
        at_goal = self._cell == self.goal
        truncated = not at_goal and self._step >= self.spec.max_steps
        return StepResult(
            observation=self._obs(),
            reward=1.0 if at_goal else 0.0,
            done=at_goal or truncated,
            truncated=truncated,
            step=self._step,
        )


class SparseCatcher:
    """Catch falling objects with a paddle on the floor of a unit strip.

    Observation is (paddle_x, object_x, object_y, object_vy). Actions are
    0 left, 1 stay, 2 right, moving the paddle by paddle_speed within [0, 1].
    Objects spawn at y=1 at an x drawn uniformly from [0, 1] (from the reset
    rng, or cycled from drop_positions when given) and fall by fall_speed per
    step. When an object reaches the floor it scores +1 if |paddle - object|
    <= catch_radius, else -1, and the next object spawns. An episode is
    exactly `drops` objects; with fall_speed 0.05 that is drops * 20 steps,
    so the episode ends at its natural length and is never truncated.
    """

    def __init__(self, drops=10, fall_speed=0.05, paddle_speed=0.07, catch_radius=0.1,
                 drop_positions=None):
        if drops < 1:
            raise ValueError(f"drops must be >= 1, got {drops}")
        if not 0.0 < fall_speed <= 1.0:
            raise ValueError(f"fall_speed must be in (0, 1], got {fall_speed}")
        self.drops = int(drops)
        self.fall_speed = float(fall_speed)
        self.paddle_speed = float(paddle_speed)
        self.catch_radius = float(catch_radius)
        self.drop_positions = None if drop_positions is None else [float(x) for x in drop_positions]
        self._steps_per_drop = math.ceil(1.0 / self.fall_speed)
        self.spec = EnvSpec(
            observation_dim=4,
            actions=DiscreteActions(n=3),
            max_steps=self.drops * self._steps_per_drop,
            reward_semantics="+1 on catch, -1 on miss, at each of the fixed number of floor contacts",
            feature_names=("paddle_x", "object_x", "object_y", "object_vy"),
        )
        self._rng = None
        self._paddle = None
        self._obj_x = None
        self._obj_y = None
        self._caught = 0
        self._resolved = 0
        self._drop_index = 0
        self._step = 0

    def _spawn(self):
        if self.drop_positions is not None:
            x = self.drop_positions[self._drop_index % len(self.drop_positions)]
        else:
            x = float(self._rng.uniform(0.0, 1.0))
        self._drop_index += 1
        self._obj_x = x
        self._obj_y = 1.0

    def reset(self, rng):
        self._rng = rng
        self._paddle = 0.5
        self._caught = 0
        self._resolved = 0
        self._drop_index = 0
        self._step = 0
        self._spawn()
        return self._obs()

    def _obs(self):
        return np.array([self._paddle, self._obj_x, self._obj_y, -self.fall_speed])

    def step(self, action):
        if self._paddle is None:
            raise RuntimeError("call reset before step")
        action = int(action)
        if not 0 <= action < 3:
            raise ValueError(f"action must be in [0, 3), got {action}")
        self._paddle = float(np.clip(self._paddle + (action - 1) * self.paddle_speed, 0.0, 1.0))
        self._obj_y -= self.fall_speed
        self._step += 1
        reward = 0.0
        if self._obj_y <= 0.0:
            if abs(self._paddle - self._obj_x) <= self.catch_radius:
                reward = 1.0
                self._caught += 1
            else:
                reward = -1.0
            self._resolved += 1
            if self._resolved < self.drops:
                self._spawn()
        done = self._resolved >= self.drops
        return StepResult(
            observation=self._obs(),
            reward=reward,
            done=done,
            truncated=False,
            step=self._step,
        )


ENV_BUILDERS = {
    "sparse_pointmass": SparsePointMass,
    "sparse_gridworld": SparseGridworld,
    "sparse_catcher": SparseCatcher,
}


def make_env(name, **params):
    """Build a named environment; unknown names list the available ones."""
    try:
        builder = ENV_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; available: {sorted(ENV_BUILDERS)}") from None
    return builder(**params)
