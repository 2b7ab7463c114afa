"""Evaluation sweeps, the ablation grid, and the results CSV format.

Evaluation runs greedy-action episodes through the perturbation channel.
Defense modes weight each incoming message before aggregation:

    none  weight 1 (undefended)
    re    learned estimator's reliability output
    ire   ground-truth label oracle, weight 1 or 0 (ablation only)
    zero  weight 0 for every message (communication muted; diagnostics)

Episodes are seeded independently per (seed, episode index), so results do
not depend on evaluation order or parallelism. Evaluation is pure
inference; no parameter buffer is ever written.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .agents import broadcast_messages, decision_preferences, greedy_actions, pair_indices
from .attacks import VIEW_KINDS, AttackSpec, StepContext, apply_channel, message_stream
from .envs import CommTaskEnv, EnvConfig, make_env
from .errors import ConfigError, ShapeError
from .reliability import RELIABLE, directed_labels
from .training import Bundle

logger = logging.getLogger(__name__)

CSV_HEADER = ("framework", "task", "attack", "objective", "p", "seed", "episodes",
              "mean_timesteps", "stderr", "recall", "precision")

DEFENSES = ("none", "re", "ire", "zero")


@dataclass
class EvalSpec:
    bundle: Bundle
    env_cfg: EnvConfig
    attacks: list[AttackSpec]
    p_grid: list[float]
    episodes: int = 200
    defense: str = "none"
    seeds: tuple[int, ...] = (0,)

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if any(not 0.0 <= p <= 1.0 for p in self.p_grid):
            raise ConfigError("p grid values must be in [0, 1]")
        for a in self.attacks:
            a.validate()
        if self.defense in ("re",) and self.bundle.estimator is None:
            raise ConfigError("defense 're' needs a bundle with an estimator")
        if self.defense in ("re", "ire", "zero") and self.bundle.core.aggregator != "decomposable":
            raise ConfigError("message-weight defenses apply to the decomposable policy only")


@dataclass
class ResultRow:
    framework: str
    task: str
    attack: str
    objective: str
    p: float
    seed: int
    episodes: int
    mean_timesteps: float
    stderr: float
    recall: float | None = None
    precision: float | None = None


def framework_name(bundle: Bundle, defense: str) -> str:
    name = "attention" if bundle.core.aggregator == "attention" else "dpn"
    if bundle.metadata.get("train", {}).get("at_enabled"):
        name += "+at"
    if defense != "none":
        name += f"+{defense}"
    return name


# ---------------------------------------------------------------------------
# episode engine


def _message_weights(bundle: Bundle, defense: str, ctx: StepContext | None,
                     h: np.ndarray, obs: np.ndarray, directed) -> np.ndarray:
    n = h.shape[0]
    if defense == "none":
        return np.ones((n, n))
    if defense == "zero":
        return np.zeros((n, n))
    recv, send = pair_indices(n)
    if defense == "re":
        w = bundle.estimator.estimate(h[recv], obs[recv], directed.payloads[recv, send])
        out = np.zeros((n, n))
        out[recv, send] = w
        return out
    # ire: ground-truth labels from the raw-message best actions
    labels = directed_labels(bundle.core, ctx, directed.payloads)
    return (labels == RELIABLE).astype(np.float64)


def play_episode(env: CommTaskEnv, bundle: Bundle, attack: AttackSpec | None,
                 defense: str, seed: int, episode: int,
                 objective_log: list | None = None,
                 trace: list | None = None) -> int:
    """One greedy episode through the channel; returns its length.

    `trace`, when given, receives one (obs, directed payloads, actions,
    rewards) tuple per step for trajectory comparisons.
    """
    core = bundle.core
    n = env.n_agents
    obs = env.reset(int(np.random.SeedSequence([seed, 0, episode]).generate_state(1)[0]))
    h = np.zeros((n, core.hidden_size))
    t = 0
    while True:
        e = core.embed_obs(obs)
        h = core.update_hidden_from_embed(h, e).data
        broadcast, null = broadcast_messages(core, env, h, e)
        need_ctx = defense == "ire" or (
            attack is not None and attack.kind in VIEW_KINDS and attack.p > 0)
        ctx = StepContext(core, h, e.data, broadcast, null) if need_ctx else None
        directed = apply_channel(
            broadcast, null, attack, ctx,
            lambda j, i, _t=t: message_stream(seed, episode, _t, j, i),
            objective_log=objective_log)
        weights = _message_weights(bundle, defense, ctx, h, obs, directed)
        v = decision_preferences(core, e, h, directed.payloads, null, weights)
        actions = greedy_actions(nn.softmax(v).data)
        res = env.step(actions)
        if trace is not None:
            trace.append((obs.copy(), directed.payloads.copy(), actions.copy(),
                          res.rewards.copy()))
        obs = res.obs
        t += 1
        if res.done:
            return t


def run_setting(bundle: Bundle, env_cfg: EnvConfig, attack: AttackSpec | None,
                defense: str, episodes: int, seed: int,
                objective_log: list | None = None) -> tuple[float, float, list[int]]:
    env = make_env(env_cfg)
    lengths = [play_episode(env, bundle, attack, defense, seed, ep, objective_log)
               for ep in range(episodes)]
    arr = np.asarray(lengths, dtype=np.float64)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return mean, stderr, lengths


def evaluate(spec: EvalSpec, objective_log: list | None = None) -> list[ResultRow]:
    """Sweep framework x attack x p x seed; one row per setting."""
    spec.validate()
    bundle = spec.bundle
    name = framework_name(bundle, spec.defense)
    est_metrics = bundle.metadata.get("estimator_metrics", {})
    rows = []
    for attack in spec.attacks:
        for p in spec.p_grid:
            swept = replace(attack, p=p)
            for seed in spec.seeds:
                mean, stderr, _ = run_setting(bundle, spec.env_cfg, swept, spec.defense,
                                              spec.episodes, seed, objective_log)
                recall = precision = None
                if spec.defense == "re":
                    recall = est_metrics.get("recall")
                    precision = est_metrics.get("precision")
                elif spec.defense == "ire":
                    recall = precision = 1.0
                rows.append(ResultRow(
                    framework=name, task=spec.env_cfg.task, attack=attack.kind,
                    objective=attack.objective, p=p, seed=seed, episodes=spec.episodes,
                    mean_timesteps=mean, stderr=stderr, recall=recall, precision=precision))
                logger.info("%s %s %s p=%.2f seed=%d: %.2f +- %.2f", name,
                            spec.env_cfg.task, attack.kind, p, seed, mean, stderr)
    return rows


def ablation(bundle: Bundle, attention_bundle: Bundle, env_cfg: EnvConfig,
             attacks: list[AttackSpec], p: float = 0.3, episodes: int = 200,
             seeds: tuple[int, ...] = (0,)) -> list[ResultRow]:
    """The four-way comparison at a fixed attack probability.

    Rows: undefended attention baseline, decomposable undefended,
    decomposable + learned estimator, decomposable + ideal estimator.
    """
    if bundle.estimator is None:
        raise ConfigError("ablation needs a bundle with a trained estimator")
    configs = [
        (attention_bundle, "none"),
        (bundle, "none"),
        (bundle, "re"),
        (bundle, "ire"),
    ]
    rows: list[ResultRow] = []
    for b, defense in configs:
        spec = EvalSpec(bundle=b, env_cfg=env_cfg, attacks=attacks, p_grid=[p],
                        episodes=episodes, defense=defense, seeds=seeds)
        rows.extend(evaluate(spec))
    return rows


# ---------------------------------------------------------------------------
# CSV files


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_results(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, start=1):
            if lineno == 1:
                if tuple(rec) != CSV_HEADER:
                    raise ShapeError(f"{path}:1: bad header {rec!r}")
                continue
            if len(rec) != len(CSV_HEADER):
                raise ShapeError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, "
                                 f"got {len(rec)}")
            try:
                rows.append(ResultRow(
                    framework=rec[0], task=rec[1], attack=rec[2], objective=rec[3],
                    p=float(rec[4]), seed=int(rec[5]), episodes=int(rec[6]),
                    mean_timesteps=float(rec[7]), stderr=float(rec[8]),
                    recall=float(rec[9]) if rec[9] else None,
                    precision=float(rec[10]) if rec[10] else None))
            except ValueError as exc:
                raise ShapeError(f"{path}:{lineno}: {exc}") from exc
    return rows
