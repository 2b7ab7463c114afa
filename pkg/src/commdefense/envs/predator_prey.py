"""Predator Prey: learned-communication search on an integer grid.

All agents must reach one fixed prey cell but can only see it within a
small Chebyshev radius, so the first agent to spot it has something worth
broadcasting. Moves off the grid are rejected (the step still counts) and
agents freeze on the prey cell.

Observation layout, width N + 6:
    [0:2]   own cell scaled to [-1, 1]
    [2]     prey visible flag
    [3:5]   (dx, dy) to prey divided by vision when visible, else 0
    [5:5+N] own-id one-hot
    [-1]    t / t_max
"""

from __future__ import annotations

import numpy as np

from .base import CommTaskEnv, EnvConfig

MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0], [0, 0]])  # N, S, W, E, stay


class PredatorPreyEnv(CommTaskEnv):
    task_name = "predator_prey"

    def __init__(self, cfg: EnvConfig):
        super().__init__(cfg)
        self.vision = int(cfg.vision) if cfg.vision is not None else 1
        self._t_max = cfg.t_max if cfg.t_max is not None else 60
        self.grid = cfg.grid_size
        self.pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.prey = np.zeros(2, dtype=np.int64)

    @property
    def obs_width(self) -> int:
        return self.n_agents + 6

    @property
    def n_actions(self) -> int:
        return 5

    @property
    def t_max(self) -> int:
        return self._t_max

    def _place(self, rng):
        self.prey = rng.integers(0, self.grid, size=2)
        # agents never spawn on the prey cell
        self.pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        for i in range(self.n_agents):
            while True:
                cell = rng.integers(0, self.grid, size=2)
                if not np.array_equal(cell, self.prey):
                    self.pos[i] = cell
                    break

    def _move(self, actions):
        live = ~self.finished
        target = self.pos + MOVES[actions]
        ok = np.all((target >= 0) & (target < self.grid), axis=1)
        update = live & ok
        self.pos[update] = target[update]

    def _check_completion(self):
        return (~self.finished) & np.all(self.pos == self.prey[None, :], axis=1)

    def _observations(self):
        n = self.n_agents
        obs = np.zeros((n, self.obs_width))
        obs[:, 0:2] = 2.0 * self.pos / (self.grid - 1) - 1.0
        diff = self.prey[None, :] - self.pos
        visible = np.max(np.abs(diff), axis=1) <= self.vision
        obs[:, 2] = visible
        obs[:, 3:5] = np.where(visible[:, None], diff / self.vision, 0.0)
        obs[:, 5:5 + n] = np.eye(n)
        obs[:, -1] = self.t / self._t_max
        return obs
