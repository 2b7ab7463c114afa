"""Flat key=value configuration files and their mapping onto config objects.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Values parse as bool (true/false), int, float, comma-separated lists of
those, or plain strings. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

from .agents import AgentConfig
from .attacks import AttackSpec
from .envs import EnvConfig
from .errors import ConfigError
from .training import TrainConfig

ENV_KEYS = {"task", "n_agents", "vision", "speed", "t_max", "catch_radius",
            "grid_size", "seed"}
AGENT_KEYS = {"hidden_size", "msg_len", "defense", "aggregator"}
ATTACK_KEYS = {"attack", "objective", "p", "sigma", "eta", "epsilon", "pgd_steps",
               "mc_candidates", "lambda", "clip"}
TRAIN_KEYS = {"epochs", "steps_per_epoch", "gamma", "lr", "grad_clip", "at_enabled",
              "dataset_size", "p_a", "p_b", "stage2_lambda", "estimator_epochs",
              "estimator_batch", "estimator_lr", "literal_pg_weight", "seed"} \
    | {f"at_{k}" for k in ATTACK_KEYS}
EVAL_KEYS = {"checkpoint", "attention_checkpoint", "attacks", "objective", "p_grid",
             "p", "episodes", "defense", "seeds", "out_csv", "plot_dir", "sigma",
             "eta", "epsilon", "pgd_steps", "mc_candidates", "lambda", "clip", "seed"}


def parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [parse_scalar(part) for part in text.split(",") if part.strip()]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = parse_scalar(value)
    return out


def check_known(mapping: dict, allowed: set, context: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} config keys: {sorted(unknown)}")


def _pick(mapping: dict, keys: set) -> dict:
    return {k: v for k, v in mapping.items() if k in keys}


def env_config_from(mapping: dict, base: EnvConfig | None = None) -> EnvConfig:
    cfg = base if base is not None else EnvConfig()
    for key, value in _pick(mapping, ENV_KEYS).items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def agent_config_from(mapping: dict) -> AgentConfig:
    cfg = AgentConfig()
    for key, value in _pick(mapping, AGENT_KEYS).items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def attack_spec_from(mapping: dict, prefix: str = "") -> AttackSpec:
    spec = AttackSpec()
    rename = {"attack": "kind", "lambda": "lam"}
    for key in ATTACK_KEYS:
        full = prefix + key
        if full in mapping:
            setattr(spec, rename.get(key, key), mapping[full])
    spec.validate()
    return spec


def train_config_from(mapping: dict) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in _pick(mapping, TRAIN_KEYS).items():
        if key.startswith("at_") and key != "at_enabled":
            continue
        setattr(cfg, key, value)
    cfg.at_attack = attack_spec_from(mapping, prefix="at_")
    cfg.validate()
    return cfg


def as_list(value) -> list:
    if isinstance(value, list):
        return value
    return [value]
