"""The three communication-critical cooperation tasks behind one interface."""

from .base import (
    COMPLETION_BONUS,
    STEP_PENALTY,
    TASKS,
    CommTaskEnv,
    EnvConfig,
    StepResult,
    episode_timesteps,
)
from .food_collector import FoodCollectorEnv
from .predator_prey import PredatorPreyEnv
from .treasure_hunt import TreasureHuntEnv

_REGISTRY = {
    "food_collector": FoodCollectorEnv,
    "predator_prey": PredatorPreyEnv,
    "treasure_hunt": TreasureHuntEnv,
}


def make_env(cfg: EnvConfig) -> CommTaskEnv:
    cfg.validate()
    return _REGISTRY[cfg.task](cfg)


__all__ = [
    "CommTaskEnv", "EnvConfig", "StepResult", "make_env", "episode_timesteps",
    "FoodCollectorEnv", "PredatorPreyEnv", "TreasureHuntEnv",
    "STEP_PENALTY", "COMPLETION_BONUS", "TASKS",
]
