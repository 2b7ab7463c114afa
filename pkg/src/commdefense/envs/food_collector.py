"""Food Collector: predefined-communication search in a unit square.

N agents with ids 0..N-1 look for same-id food items. An agent that spots a
food with a different id broadcasts (food-id one-hot, food coordinates); the
matching agent can then head straight there. Agents freeze once they reach
their own food.

Observation layout, width 4N + 3:
    [0:2]        own position scaled to [-1, 1]
    [2:2+3N]     per food j: (visible flag, dx / vision, dy / vision)
    [2+3N:2+4N]  own-id one-hot
    [-1]         t / t_max

Message layout, width N + 2: (food-id one-hot, food x and y scaled to [-1, 1]).
A null message (flag true, zero payload) is sent when nothing to report.
"""

from __future__ import annotations

import numpy as np

from .base import COMPASS_8, CommTaskEnv, EnvConfig


class FoodCollectorEnv(CommTaskEnv):
    task_name = "food_collector"

    def __init__(self, cfg: EnvConfig):
        super().__init__(cfg)
        self.vision = cfg.vision if cfg.vision is not None else 0.2
        self.speed = cfg.speed if cfg.speed is not None else 0.15
        self._t_max = cfg.t_max if cfg.t_max is not None else 60
        self.catch_radius = cfg.catch_radius if cfg.catch_radius is not None else 0.1
        self.pos = np.zeros((self.n_agents, 2))
        self.food = np.zeros((self.n_agents, 2))

    @property
    def obs_width(self) -> int:
        return 4 * self.n_agents + 3

    @property
    def n_actions(self) -> int:
        return 9

    @property
    def t_max(self) -> int:
        return self._t_max

    @property
    def msg_len(self) -> int:
        return self.n_agents + 2

    def _place(self, rng):
        self.pos = rng.uniform(0.0, 1.0, size=(self.n_agents, 2))
        self.food = rng.uniform(0.0, 1.0, size=(self.n_agents, 2))

    def _move(self, actions):
        live = ~self.finished
        delta = COMPASS_8[actions] * self.speed
        self.pos[live] = np.clip(self.pos[live] + delta[live], 0.0, 1.0)

    def _check_completion(self):
        dist = np.linalg.norm(self.pos - self.food, axis=1)
        return (~self.finished) & (dist <= self.catch_radius)

    def _visible(self) -> np.ndarray:
        """(N agents, N foods) bool: within vision and not yet collected."""
        diff = self.food[None, :, :] - self.pos[:, None, :]
        dist = np.linalg.norm(diff, axis=2)
        return (dist <= self.vision) & ~self.finished[None, :]

    def _observations(self):
        n = self.n_agents
        obs = np.zeros((n, self.obs_width))
        obs[:, 0:2] = 2.0 * self.pos - 1.0
        vis = self._visible()
        diff = (self.food[None, :, :] - self.pos[:, None, :]) / self.vision
        block = obs[:, 2:2 + 3 * n].reshape(n, n, 3)
        block[:, :, 0] = vis
        block[:, :, 1] = np.where(vis, diff[:, :, 0], 0.0)
        block[:, :, 2] = np.where(vis, diff[:, :, 1], 0.0)
        obs[:, 2 + 3 * n:2 + 4 * n] = np.eye(n)
        obs[:, -1] = self.t / self._t_max
        return obs

    def predefined_messages(self):
        n = self.n_agents
        payloads = np.zeros((n, self.msg_len))
        null = np.ones(n, dtype=bool)
        vis = self._visible()
        for i in range(n):
            others = [j for j in range(n) if j != i and vis[i, j]]
            if not others:
                continue
            j = others[0]  # lowest id wins when several foods are in sight
            payloads[i, j] = 1.0
            payloads[i, n:] = 2.0 * self.food[j] - 1.0
            null[i] = False
        return payloads, null
