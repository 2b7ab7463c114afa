"""Treasure Hunt: learned-communication mutual assistance in a unit square.

Each agent knows the location of its own treasure but cannot collect it;
some other agent must come within the catch radius. Agents therefore have
to tell each other where their treasures are. Nobody freezes: an agent
whose treasure is already collected may still be needed elsewhere.

Observation layout, width N + 6:
    [0:2]   own position scaled to [-1, 1]
    [2]     own-treasure uncollected flag
    [3:5]   (dx, dy) from self to own treasure (zero once collected)
    [5:5+N] own-id one-hot
    [-1]    t / t_max
"""

from __future__ import annotations

import numpy as np

from .base import COMPASS_8, CommTaskEnv, EnvConfig


class TreasureHuntEnv(CommTaskEnv):
    task_name = "treasure_hunt"

    def __init__(self, cfg: EnvConfig):
        super().__init__(cfg)
        # paper-style speed 0.9 read as field-lengths/second on a 0.1 s tick
        self.speed = cfg.speed if cfg.speed is not None else 0.09
        self._t_max = cfg.t_max if cfg.t_max is not None else 50
        self.catch_radius = cfg.catch_radius if cfg.catch_radius is not None else 0.1
        self.pos = np.zeros((self.n_agents, 2))
        self.treasure = np.zeros((self.n_agents, 2))

    @property
    def obs_width(self) -> int:
        return self.n_agents + 6

    @property
    def n_actions(self) -> int:
        return 9

    @property
    def t_max(self) -> int:
        return self._t_max

    def _place(self, rng):
        self.pos = rng.uniform(0.0, 1.0, size=(self.n_agents, 2))
        self.treasure = rng.uniform(0.0, 1.0, size=(self.n_agents, 2))

    def _move(self, actions):
        # finished[i] marks treasure i collected, not agent i frozen
        delta = COMPASS_8[actions] * self.speed
        self.pos = np.clip(self.pos + delta, 0.0, 1.0)

    def _check_completion(self):
        # treasure i needs some agent j != i within the catch radius
        dist = np.linalg.norm(self.pos[:, None, :] - self.treasure[None, :, :], axis=2)
        np.fill_diagonal(dist, np.inf)
        return (~self.finished) & (dist.min(axis=0) <= self.catch_radius)

    def _observations(self):
        n = self.n_agents
        obs = np.zeros((n, self.obs_width))
        obs[:, 0:2] = 2.0 * self.pos - 1.0
        uncollected = ~self.finished
        obs[:, 2] = uncollected
        diff = self.treasure - self.pos
        obs[:, 3:5] = np.where(uncollected[:, None], diff, 0.0)
        obs[:, 5:5 + n] = np.eye(n)
        obs[:, -1] = self.t / self._t_max
        return obs
