"""Nominal force policies: scripted baselines, replay, and tabular Q-learning.

All policies return planar forces; the admittance gain in the filter turns
them into velocities.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import CellState, PotentialField, WorldSpec, solve
from .safety_filter import FilterParams, project

_S2 = math.sqrt(0.5)
# counter-clockwise from +x; index 0 is "right"
ACTIONS: tuple[tuple[float, float], ...] = (
    (1.0, 0.0), (_S2, _S2), (0.0, 1.0), (-_S2, _S2),
    (-1.0, 0.0), (-_S2, -_S2), (0.0, -1.0), (_S2, -_S2),
)
# grid offsets matching ACTIONS
MOVES: tuple[tuple[int, int], ...] = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


class UnvisitedState(KeyError):
    pass


@dataclass(frozen=True)
class PolicyState:
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)


def _unit(dx: float, dy: float) -> tuple[float, float]:
    n = math.hypot(dx, dy)
    if n == 0.0:
        return (0.0, 0.0)
    return (dx / n, dy / n)


def policy_goal_seek(s: PolicyState, goal: Sequence[float], gain: float = 1.0) -> tuple[float, float]:
    """Proportional pull toward ``goal``, clipped to unit magnitude."""
    fx = gain * (goal[0] - s.position[0])
    fy = gain * (goal[1] - s.position[1])
    n = math.hypot(fx, fy)
    if n > 1.0:
        return (fx / n, fy / n)
    return (fx, fy)


def policy_adversarial(s: PolicyState, target_obstacle_center: Sequence[float] | None) -> tuple[float, float]:
    """Unit push toward an unsafe cell; zero when there is nothing to aim at."""
    if target_obstacle_center is None:
        return (0.0, 0.0)
    return _unit(target_obstacle_center[0] - s.position[0], target_obstacle_center[1] - s.position[1])


def nearest_center(centers: np.ndarray, position: Sequence[float]) -> tuple[float, float] | None:
    """Closest row of an (N, 2) center array; ties go to the lowest row index."""
    if len(centers) == 0:
        return None
    d2 = (centers[:, 0] - position[0]) ** 2 + (centers[:, 1] - position[1]) ** 2
    k = int(np.argmin(d2))
    return (float(centers[k, 0]), float(centers[k, 1]))


# ---------------------------------------------------------------------------
# Policy objects used by the simulator. ``view`` exposes the active epoch:
# ``view.goal_centers`` and ``view.unsafe_centers`` as (N, 2) arrays.


class GoalSeek:
    def __init__(self, gain: float = 1.0, goal: Sequence[float] | None = None):
        self.gain = gain
        self.goal = tuple(goal) if goal is not None else None

    def force(self, s: PolicyState, view) -> tuple[float, float]:
        goal = self.goal or nearest_center(view.goal_centers, s.position)
        if goal is None:
            return (0.0, 0.0)
        return policy_goal_seek(s, goal, self.gain)


class NoisyGoalSeek(GoalSeek):
    """Goal seeking, replaced by a random unit force with probability ``epsilon``."""

    def __init__(self, gain: float = 1.0, epsilon: float = 0.3, seed: int = 0,
                 goal: Sequence[float] | None = None):
        super().__init__(gain, goal)
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)

    def force(self, s: PolicyState, view) -> tuple[float, float]:
        if self.rng.random() < self.epsilon:
            a = self.rng.uniform(0.0, 2.0 * math.pi)
            return (math.cos(a), math.sin(a))
        return super().force(s, view)


class Adversarial:
    def force(self, s: PolicyState, view) -> tuple[float, float]:
        return policy_adversarial(s, nearest_center(view.unsafe_centers, s.position))


class ReplayPolicy:
    """Plays back a recorded force sequence, then zero force."""

    def __init__(self, forces: Sequence[Sequence[float]]):
        self.forces = [(float(f[0]), float(f[1])) for f in forces]
        self.k = 0

    def force(self, s: PolicyState, view) -> tuple[float, float]:
        if self.k >= len(self.forces):
            return (0.0, 0.0)
        f = self.forces[self.k]
        self.k += 1
        return f

    @classmethod
    def from_csv(cls, path: str | Path) -> "ReplayPolicy":
        """Reads ``fx``/``fy`` columns; trajectory CSVs qualify."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r.get("fx") not in (None, "")]
        return cls([(float(r["fx"]), float(r["fy"])) for r in rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fx", "fy"])
            for fx, fy in self.forces:
                w.writerow([repr(fx), repr(fy)])


# ---------------------------------------------------------------------------
# Reward and tabular Q-learning


@dataclass(frozen=True)
class RewardParams:
    goal: tuple[float, float]
    step_penalty: float = 0.01
    success_bonus: float = 10.0
    oob_penalty: float = -10.0

    def __post_init__(self):
        if self.step_penalty < 0:
            raise ValueError("step_penalty must be non-negative")
        object.__setattr__(self, "goal", (float(self.goal[0]), float(self.goal[1])))


def reward(s: PolicyState, params: RewardParams, in_bounds: bool, at_goal: bool) -> float:
    dist = math.hypot(s.position[0] - params.goal[0], s.position[1] - params.goal[1])
    r = -dist - params.step_penalty
    if at_goal:
        r += params.success_bonus
    if not in_bounds:
        r += params.oob_penalty
    return r


@dataclass(frozen=True)
class QHyper:
    gamma: float = 0.95
    alpha_lr: float = 0.5
    epsilon: float = 0.2

    def __post_init__(self):
        if not (0 < self.gamma <= 1) and self.gamma != 0:
            raise ValueError("gamma must lie in (0, 1] (0 allowed for myopic fixtures)")
        if not (0 < self.alpha_lr <= 1):
            raise ValueError("alpha_lr must lie in (0, 1]")
        if not (0 <= self.epsilon <= 1):
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass
class GridWorld:
    """Cell-discretized training world. Cell (i, j) sits at origin + (i, j) * cell_size."""

    width: int
    height: int
    goal_cell: tuple[int, int]
    cell_size: tuple[float, float] = (1.0, 1.0)
    origin: tuple[float, float] = (0.0, 0.0)
    unsafe: np.ndarray | None = None

    def __post_init__(self):
        if self.unsafe is None:
            self.unsafe = np.zeros((self.width, self.height), dtype=bool)

    @classmethod
    def from_world(cls, world: WorldSpec, goal: Sequence[float]) -> "GridWorld":
        from .field import border_mask, rect_mask

        tf = world.transform
        unsafe = border_mask(world.width, world.height)
        for r in world.obstacles:
            unsafe |= rect_mask(tf, r)
        return cls(world.width, world.height, tf.cell_of(*goal), (tf.hx, tf.hy),
                   (world.x_min, world.y_min), unsafe)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def index(self, cell: tuple[int, int]) -> int:
        return cell[0] * self.height + cell[1]

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(index, self.height)

    def center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.origin[0] + cell[0] * self.cell_size[0], self.origin[1] + cell[1] * self.cell_size[1])

    def cell_at(self, pos: Sequence[float]) -> tuple[int, int]:
        i = int(math.floor((pos[0] - self.origin[0]) / self.cell_size[0] + 0.5))
        j = int(math.floor((pos[1] - self.origin[1]) / self.cell_size[1] + 0.5))
        return (i, j)

    def step(self, cell: tuple[int, int], action: int) -> tuple[tuple[int, int], bool]:
        """One-cell move; leaving the grid keeps the agent in place."""
        di, dj = MOVES[action]
        ni, nj = cell[0] + di, cell[1] + dj
        if 0 <= ni < self.width and 0 <= nj < self.height:
            return (ni, nj), True
        return cell, False


@dataclass
class QTable:
    values: dict[tuple[int, int], list[float]]
    hyper: QHyper
    seed: int | None = None
    goal: tuple[float, float] | None = None
    actions: tuple[tuple[float, float], ...] = ACTIONS
    grid: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def greedy(self, cell: tuple[int, int]) -> int:
        q = self.values.get(cell)
        if q is None:
            raise UnvisitedState(cell)
        return int(np.argmax(q))  # first maximum on ties

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid) if self.grid else None,
            "actions": [list(a) for a in self.actions],
            "hyperparams": asdict(self.hyper),
            "seed": self.seed,
            "goal": list(self.goal) if self.goal else None,
            "cells": [[c[0], c[1]] for c in self.values],
            "values": [list(v) for v in self.values.values()],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QTable":
        values = {(int(c[0]), int(c[1])): [float(x) for x in v] for c, v in zip(d["cells"], d["values"])}
        return cls(
            values,
            QHyper(**d["hyperparams"]),
            d.get("seed"),
            tuple(d["goal"]) if d.get("goal") else None,
            tuple(tuple(a) for a in d["actions"]),
            tuple(d["grid"]) if d.get("grid") else None,
            d.get("meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def q_update(q_sa: float, r: float, next_q: Sequence[float] | None, gamma: float, alpha_lr: float) -> float:
    """One temporal-difference step; ``next_q`` is None for terminal transitions."""
    target = r if next_q is None else r + gamma * max(next_q)
    return q_sa + alpha_lr * (target - q_sa)


def _shielded_action(gw: GridWorld, fld: PotentialField, cell, action: int, fp: FilterParams) -> int | None:
    """Pass an exploratory action through the barrier filter at the cell center.

    Returns the admissible action best aligned with the filtered velocity, or
    None when the filter stops the agent.
    """
    x, y = gw.center(cell)
    smp = fld.sample(x, y)
    u = (fp.alpha_adm * ACTIONS[action][0], fp.alpha_adm * ACTIONS[action][1])
    dec = project(u, smp.V, smp.grad, fp.k_alpha, fp.grad_epsilon)
    if not dec.violated and not gw.unsafe[gw.step(cell, action)[0]]:
        return action
    ox, oy = dec.output_u
    if ox == 0.0 and oy == 0.0:
        return None
    best, best_cos = None, -2.0
    for a, (dx, dy) in enumerate(ACTIONS):
        nxt, ok = gw.step(cell, a)
        if not ok or gw.unsafe[nxt]:
            continue
        c = (dx * ox + dy * oy) / math.hypot(ox, oy)
        if c > best_cos:
            best, best_cos = a, c
    return best


def _shield_field(gw: GridWorld) -> PotentialField:
    from .field import GridTransform

    occ = np.where(gw.unsafe, CellState.UNSAFE, CellState.FREE).astype(np.int8)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = CellState.UNSAFE
    occ[gw.goal_cell] = CellState.GOAL
    tf = GridTransform(gw.origin[0], gw.origin[0] + (gw.width - 1) * gw.cell_size[0],
                       gw.origin[1], gw.origin[1] + (gw.height - 1) * gw.cell_size[1],
                       gw.width, gw.height)
    return solve(occ, transform=tf)


def q_train(world: WorldSpec | GridWorld, reward_params: RewardParams, hyper: QHyper | None = None,
            episodes: int = 5000, seed: int = 0, *, max_steps: int | None = None,
            shielded: bool = False, filter_params: FilterParams | None = None,
            initial: float = 0.0) -> QTable:
    """Tabular Q-learning with an epsilon-greedy behaviour policy.

    States are cells, actions the 8 unit directions, transitions one-cell
    moves. Episodes start in a uniformly drawn non-goal cell and end at the
    goal cell or after ``max_steps``. Deterministic for a given seed.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    hyper = hyper or QHyper()
    gw = world if isinstance(world, GridWorld) else GridWorld.from_world(world, reward_params.goal)
    max_steps = max_steps or 4 * (gw.width + gw.height)
    rng = np.random.default_rng(seed)
    n_act = len(ACTIONS)
    Q = np.full((gw.width, gw.height, n_act), float(initial))
    visited = np.zeros((gw.width, gw.height), dtype=bool)
    starts = [c for c in np.ndindex(gw.width, gw.height) if c != gw.goal_cell]
    fld = fp = None
    if shielded:
        fld = _shield_field(gw)
        fp = filter_params or FilterParams()
        starts = [c for c in starts if not gw.unsafe[c]]
    if not starts:
        raise ValueError("world has no start cell besides the goal")

    for _ in range(episodes):
        cell = starts[int(rng.integers(len(starts)))]
        for _ in range(max_steps):
            if rng.random() < hyper.epsilon:
                a = int(rng.integers(n_act))
            else:
                a = int(np.argmax(Q[cell]))
            visited[cell] = True
            move = a
            if shielded:
                move = _shielded_action(gw, fld, cell, a, fp)
            if move is None:
                nxt, in_bounds = cell, True
            else:
                nxt, in_bounds = gw.step(cell, move)
            at_goal = nxt == gw.goal_cell
            r = reward(PolicyState(gw.center(nxt)), reward_params, in_bounds, at_goal)
            Q[cell][a] = q_update(Q[cell][a], r, None if at_goal else Q[nxt], hyper.gamma, hyper.alpha_lr)
            cell = nxt
            if at_goal:
                break

    values = {c: Q[c].tolist() for c in np.ndindex(gw.width, gw.height) if visited[c]}
    return QTable(values, hyper, seed, reward_params.goal, ACTIONS, (gw.width, gw.height),
                  {"episodes": episodes, "max_steps": max_steps, "shielded": shielded,
                   "cell_size": list(gw.cell_size), "origin": list(gw.origin)})


def policy_q(s: PolicyState, table: QTable, gw: GridWorld) -> tuple[float, float]:
    """Unit force along the greedy action of the agent's cell."""
    return table.actions[table.greedy(gw.cell_at(s.position))]


class QPolicy:
    """Greedy Q-table policy; unvisited cells fall back to goal seeking."""

    def __init__(self, table: QTable, gw: GridWorld, gain: float = 1.0):
        self.table = table
        self.gw = gw
        self.fallback = GoalSeek(gain, table.goal)
        self.fallbacks = 0

    def force(self, s: PolicyState, view) -> tuple[float, float]:
        try:
            return policy_q(s, self.table, self.gw)
        except UnvisitedState:
            self.fallbacks += 1
            return self.fallback.force(s, view)


def greedy_rollout(table: QTable, gw: GridWorld, start: tuple[int, int], max_steps: int) -> bool:
    """True when following the greedy action from ``start`` reaches the goal."""
    cell = start
    for _ in range(max_steps):
        if cell == gw.goal_cell:
            return True
        try:
            a = table.greedy(cell)
        except UnvisitedState:
            return False
        cell, _ = gw.step(cell, a)
    return cell == gw.goal_cell


def evaluate_greedy(table: QTable, gw: GridWorld, episodes: int = 200, seed: int = 0,
                    max_steps: int | None = None) -> float:
    """Fraction of random-start greedy rollouts that reach the goal."""
    rng = np.random.default_rng(seed)
    max_steps = max_steps or 4 * (gw.width + gw.height)
    starts = [c for c in np.ndindex(gw.width, gw.height) if c != gw.goal_cell]
    hits = sum(greedy_rollout(table, gw, starts[int(rng.integers(len(starts)))], max_steps)
               for _ in range(episodes))
    return hits / episodes
