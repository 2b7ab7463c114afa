"""Shared environment interface for the cooperation tasks.

All tasks share the same contract: a per-agent observation matrix from
``reset``, a ``step`` that takes one action id per agent (entries for
already-finished agents are ignored), per-agent rewards, and a ``done``
flag that is true exactly when every agent's task element is complete or
the step cap is reached.

Reward scheme (identical across tasks): an agent receives -0.05 on every
step while its own task element is unfinished and +1.0 extra on the step
it completes, nothing afterwards. Episode length is therefore the metric
a good policy minimizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError, UsageError

STEP_PENALTY = -0.05
COMPLETION_BONUS = 1.0

TASKS = ("food_collector", "predator_prey", "treasure_hunt")


@dataclass
class EnvConfig:
    """Flat task configuration; None fields take per-task defaults."""

    task: str = "predator_prey"
    n_agents: int = 5
    vision: float | None = None
    speed: float | None = None
    t_max: int | None = None
    catch_radius: float | None = None
    grid_size: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_agents < 2:
            raise ConfigError(f"n_agents must be >= 2, got {self.n_agents}")
        if self.vision is not None and self.vision <= 0:
            raise ConfigError(f"vision must be > 0, got {self.vision}")
        if self.speed is not None and self.speed <= 0:
            raise ConfigError(f"speed must be > 0, got {self.speed}")
        if self.t_max is not None and self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if self.catch_radius is not None and self.catch_radius <= 0:
            raise ConfigError(f"catch_radius must be > 0, got {self.catch_radius}")
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")


@dataclass
class StepResult:
    rewards: np.ndarray           # (N,)
    obs: np.ndarray               # (N, obs_width)
    done: bool
    finished: np.ndarray          # (N,) bool, per-agent task-element completion


class CommTaskEnv:
    """Base class; subclasses fill in dynamics and observations."""

    task_name: str = ""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        self.n_agents = cfg.n_agents
        self.t = 0
        self.finished = np.zeros(self.n_agents, dtype=bool)
        self._rng = np.random.default_rng(cfg.seed)
        self._done = False

    # -- shape metadata -----------------------------------------------------
    @property
    def obs_width(self) -> int:
        raise NotImplementedError

    @property
    def n_actions(self) -> int:
        raise NotImplementedError

    @property
    def t_max(self) -> int:
        raise NotImplementedError

    # msg_len is None for learned-communication tasks
    msg_len: int | None = None

    # -- lifecycle ----------------------------------------------------------
    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.t = 0
        self._done = False
        self.finished = np.zeros(self.n_agents, dtype=bool)
        self._place(self._rng)
        return self._observations()

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions, dtype=np.intp)
        if actions.shape != (self.n_agents,):
            raise ShapeError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        live = ~self.finished
        if np.any((actions[live] < 0) | (actions[live] >= self.n_actions)):
            raise ShapeError(f"action id out of range [0, {self.n_actions})")
        if self._done:
            raise UsageError("step() called on a finished episode; call reset()")

        unfinished_before = ~self.finished
        self._move(actions)
        newly_done = self._check_completion()
        self.finished |= newly_done
        self.t += 1

        rewards = np.where(unfinished_before, STEP_PENALTY, 0.0)
        rewards = rewards + np.where(newly_done, COMPLETION_BONUS, 0.0)
        self._done = bool(self.finished.all() or self.t >= self.t_max)
        return StepResult(rewards=rewards, obs=self._observations(), done=self._done,
                          finished=self.finished.copy())

    def predefined_messages(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent outgoing (payloads, null flags); predefined tasks only."""
        raise UsageError(f"{self.task_name} uses learned communication; no predefined messages")

    # -- subclass hooks -------------------------------------------------------
    def _place(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _move(self, actions: np.ndarray) -> None:
        raise NotImplementedError

    def _check_completion(self) -> np.ndarray:
        raise NotImplementedError

    def _observations(self) -> np.ndarray:
        raise NotImplementedError


def episode_timesteps(results: list[StepResult], t_max: int) -> int:
    """Completion timestep of an episode record (t_max when unfinished)."""
    for i, r in enumerate(results):
        if r.done:
            return i + 1
    return t_max


# Unit movement directions for the eight-way continuous tasks; action k moves
# at angle k*45deg starting due east, counterclockwise. Action 8 is "stay".
COMPASS_8 = np.stack([
    np.array([np.cos(k * np.pi / 4.0), np.sin(k * np.pi / 4.0)]) for k in range(8)
] + [np.zeros(2)])
