"""Three-stage training: policy gradients, dataset generation, estimator fit.

Stage 1 is on-policy REINFORCE with a learned value baseline. Each epoch
collects ``steps_per_epoch`` environment steps of fresh rollouts (finishing
the last episode), computes discounted returns per agent, and takes exactly
one Adam step each on the policy and value parameters before the buffer is
discarded. All message weights are fixed at 1; no estimator or attack code
runs unless adversarial training is explicitly enabled.

The policy update rebuilds every timestep's computation graph from the
stored pre-step hidden states and recomputes messages from sender states,
so gradients flow through the communication channel into the senders'
encoders. Directed messages that the channel replaced during an
adversarially-trained rollout enter the rebuilt graph as constants.

Stages 2 and 3 delegate to the reliability module and wrap the result,
together with the policy and value nets, into a checkpoint bundle.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .agents import (
    AgentConfig,
    CommPolicy,
    batched_attention_preference,
    batched_total_preference,
    broadcast_messages,
    decision_preferences,
    pair_indices,
    sample_actions,
)
from .attacks import VIEW_KINDS, AttackSpec, StepContext, apply_channel, message_stream
from .envs import CommTaskEnv
from .errors import CheckpointError, ConfigError, TrainingError
from .nn import Dense, ParamStore, Tape, Tensor, backward

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 1500
    gamma: float = 0.98
    lr: float = 3e-4
    grad_clip: float = 5.0
    at_enabled: bool = False
    at_attack: AttackSpec = field(default_factory=AttackSpec)
    dataset_size: int = 30000
    p_a: float = 0.5
    p_b: float = 0.5
    stage2_lambda: float = 0.5
    estimator_epochs: int = 10
    estimator_batch: int = 64
    estimator_lr: float = 3e-4
    literal_pg_weight: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lr <= 0 or self.estimator_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0.0 <= self.p_a <= 1.0 and 0.0 <= self.p_b <= 1.0):
            raise ConfigError("p_a and p_b must be in [0, 1]")
        self.at_attack.validate()


@dataclass
class StepRecord:
    """One environment step for all agents (the per-agent transition rows)."""

    episode: int
    t: int
    obs: np.ndarray        # (N, W) at decision time
    h_prev: np.ndarray     # (N, H) before the recurrent update
    h_post: np.ndarray     # (N, H) after it
    directed: np.ndarray   # (N, N, L) payloads as received
    null: np.ndarray       # (N,) sender null flags
    perturbed: np.ndarray  # (N, N) channel bookkeeping
    actions: np.ndarray    # (N,)
    rewards: np.ndarray    # (N,)
    active: np.ndarray     # (N,) agent unfinished at step start
    values: np.ndarray     # (N,) value estimates, filled post-rollout
    done: bool


class ValueNet:
    """State-value head over (hidden state, embedded observation)."""

    def __init__(self, policy_hidden: int, obs_width: int, hidden_size: int = 128,
                 rng: np.random.Generator | None = None):
        self.policy_hidden = policy_hidden
        self.obs_width = obs_width
        self.hidden_size = hidden_size
        store = ParamStore()
        self.obs_embed = Dense(store, "obs_embed", obs_width, hidden_size, "linear", rng)
        self.h1 = Dense(store, "h1", policy_hidden + hidden_size, hidden_size, "relu", rng)
        self.out = Dense(store, "out", hidden_size, 1, "linear", rng)
        self.store = store

    def value(self, h, obs) -> Tensor:
        e = self.obs_embed(nn.as_tensor(obs))
        return self.out(self.h1(nn.concat([nn.as_tensor(h), e])))


def build_policy_for_env(env: CommTaskEnv, agent_cfg: AgentConfig,
                         rng: np.random.Generator | None) -> CommPolicy:
    msg_len = env.msg_len if env.msg_len is not None else agent_cfg.msg_len
    return CommPolicy(env.obs_width, env.n_actions, msg_len,
                      hidden_size=agent_cfg.hidden_size,
                      aggregator=agent_cfg.aggregator, rng=rng)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# rollouts and returns


def rollout(env: CommTaskEnv, core: CommPolicy, attack: AttackSpec | None,
            steps: int, seed: int) -> tuple[list[StepRecord], list[int]]:
    """Collect at least `steps` env steps of complete episodes.

    Actions are sampled; all message weights are 1. When an attack spec is
    given, messages pass through the perturbation channel exactly as they
    would at evaluation time.
    """
    n = env.n_agents
    records: list[StepRecord] = []
    lengths: list[int] = []
    action_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    ones = np.ones((n, n))
    episode = 0
    while len(records) < steps:
        obs = env.reset(_derived_seed(seed, 0, episode))
        h = np.zeros((n, core.hidden_size))
        t = 0
        while True:
            active = ~env.finished
            e = core.embed_obs(obs)
            h_prev = h
            h = core.update_hidden_from_embed(h, e).data
            broadcast, null = broadcast_messages(core, env, h, e)
            ctx = None
            if attack is not None and attack.kind in VIEW_KINDS and attack.p > 0:
                ctx = StepContext(core, h, e.data, broadcast, null)
            directed = apply_channel(
                broadcast, null, attack, ctx,
                lambda j, i, _ep=episode, _t=t: message_stream(seed, _ep, _t, j, i))
            v = decision_preferences(core, e, h, directed.payloads, null, ones)
            probs = nn.softmax(v).data
            actions = sample_actions(probs, action_rng)
            res = env.step(actions)
            records.append(StepRecord(
                episode=episode, t=t, obs=obs, h_prev=h_prev, h_post=h,
                directed=directed.payloads, null=null, perturbed=directed.perturbed,
                actions=actions, rewards=res.rewards, active=active,
                values=np.zeros(n), done=res.done))
            obs = res.obs
            t += 1
            if res.done:
                lengths.append(t)
                break
        episode += 1
    return records, lengths


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Backward-accumulated discounted return; works on (T,) or (T, N)."""
    out = np.zeros_like(np.asarray(rewards, dtype=np.float64))
    acc = np.zeros_like(out[0])
    for t in range(len(out) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def attach_returns(records: list[StepRecord], gamma: float) -> np.ndarray:
    """(R, N) per-agent returns over the buffer; episodes must be complete."""
    q = np.zeros((len(records), records[0].rewards.shape[0]))
    start = 0
    for i, rec in enumerate(records):
        if rec.done:
            rewards = np.stack([r.rewards for r in records[start:i + 1]])
            q[start:i + 1] = discounted_returns(rewards, gamma)
            start = i + 1
    if start != len(records):
        raise TrainingError("buffer ends with an incomplete episode")
    return q


def fill_values(records: list[StepRecord], value_net: ValueNet) -> np.ndarray:
    """Evaluate the value net on every transition and store it in place."""
    h = np.concatenate([r.h_post for r in records])
    obs = np.concatenate([r.obs for r in records])
    n = records[0].obs.shape[0]
    values = value_net.value(h, obs).data.reshape(len(records), n)
    for rec, row in zip(records, values):
        rec.values = row
    return values


def advantage(record: StepRecord, agent: int, q: float, value_net: ValueNet) -> float:
    """Q minus the value baseline for one transition."""
    v = value_net.value(record.h_post[agent], record.obs[agent]).data
    return float(q - v[0])


# ---------------------------------------------------------------------------
# updates


@dataclass
class PolicyBatch:
    """Flattened rollout buffer ready for one policy-gradient step."""

    obs: np.ndarray          # (B, W)
    h_prev: np.ndarray       # (B, H)
    actions: np.ndarray      # (B,)
    weights: np.ndarray      # (B,) advantage * active mask
    n_agents: int
    learned_messages: bool
    pair_stored: np.ndarray | None = None     # (P, L) received payloads
    pair_const_mask: np.ndarray | None = None  # (P, 1) 1 where payload is a constant
    pair_send_rows: np.ndarray | None = None   # (P,) sender row per pair
    null_pair: np.ndarray | None = None        # (P,) sender null flags
    pair_weights: np.ndarray | None = None     # (P,) live mask weights


def assemble_batch(records: list[StepRecord], q: np.ndarray, values: np.ndarray,
                   learned_messages: bool) -> PolicyBatch:
    n = records[0].obs.shape[0]
    obs = np.concatenate([r.obs for r in records])
    h_prev = np.concatenate([r.h_prev for r in records])
    actions = np.concatenate([r.actions for r in records])
    active = np.concatenate([r.active for r in records]).astype(np.float64)
    weights = (q - values).reshape(-1) * active
    batch = PolicyBatch(obs=obs, h_prev=h_prev, actions=actions, weights=weights,
                        n_agents=n, learned_messages=learned_messages)
    if n > 1:
        recv, send = pair_indices(n)
        blocks = len(records)
        send_rows = (np.arange(blocks)[:, None] * n + send[None, :]).reshape(-1)
        pair_stored = np.concatenate([r.directed[recv, send] for r in records])
        perturbed = np.concatenate([r.perturbed[recv, send] for r in records])
        null_pair = np.concatenate([r.null[send] for r in records])
        const = perturbed if learned_messages else np.ones_like(perturbed, dtype=bool)
        batch.pair_stored = pair_stored
        batch.pair_const_mask = const.astype(np.float64).reshape(-1, 1)
        batch.pair_send_rows = send_rows
        batch.null_pair = null_pair
        batch.pair_weights = (~null_pair).astype(np.float64)
    return batch


def policy_loss(core: CommPolicy, batch: PolicyBatch, literal_pg_weight: bool = False
                ) -> Tensor:
    """Negative weighted log-likelihood of the taken actions.

    Minimizing this ascends sum_j A_j * grad log pi_j. Messages are
    recomputed from sender states wherever the executed payload was the
    sender's own broadcast, so encoder parameters receive gradient through
    their receivers.
    """
    e = core.embed_obs(batch.obs)
    h = core.update_hidden_from_embed(batch.h_prev, e)
    n = batch.n_agents
    if n == 1:
        v = core.base_preference(h)
    else:
        if batch.learned_messages:
            enc = core.encode_from_embed(h, e)
            gathered = nn.gather_rows(enc, batch.pair_send_rows)
            live = 1.0 - batch.pair_const_mask
            stored_part = batch.pair_stored * batch.pair_const_mask
            payloads = nn.add(nn.mul(gathered, Tensor(live)), Tensor(stored_part))
        else:
            payloads = Tensor(batch.pair_stored)
        if core.aggregator == "attention":
            v = batched_attention_preference(core, e, h, payloads, batch.null_pair, n)
        else:
            v = batched_total_preference(core, e, h, payloads, batch.pair_weights, n)
    p = nn.softmax(v)
    weights = batch.weights
    if literal_pg_weight:
        picked = p.data[np.arange(len(batch.actions)), batch.actions]
        weights = weights * picked
    return nn.cross_entropy(p, batch.actions, weights)


def policy_update(core: CommPolicy, batch: PolicyBatch, cfg: TrainConfig) -> dict:
    core.store.zero_grad()
    with Tape() as tape:
        loss = policy_loss(core, batch, cfg.literal_pg_weight)
    backward(tape, loss)
    pre_norm = nn.clip_grad_norm(core.store, cfg.grad_clip)
    nn.adam_step(core.store, cfg.lr)
    return {"policy_loss": loss.item(), "policy_grad_norm": pre_norm}


def value_loss(value_net: ValueNet, records: list[StepRecord], q: np.ndarray) -> Tensor:
    """Summed squared error of the value baseline over active transitions."""
    h = np.concatenate([r.h_post for r in records])
    obs = np.concatenate([r.obs for r in records])
    active = np.concatenate([r.active for r in records]).astype(np.float64)
    v = value_net.value(h, obs)
    diff = nn.sub(Tensor(q.reshape(-1, 1)), v)
    return nn.sum_all(nn.mul(nn.mul(diff, diff), Tensor(active.reshape(-1, 1))))


def value_update(value_net: ValueNet, records: list[StepRecord], q: np.ndarray,
                 cfg: TrainConfig) -> dict:
    value_net.store.zero_grad()
    with Tape() as tape:
        loss = value_loss(value_net, records, q)
    backward(tape, loss)
    pre_norm = nn.clip_grad_norm(value_net.store, cfg.grad_clip)
    nn.adam_step(value_net.store, cfg.lr)
    return {"value_loss": loss.item(), "value_grad_norm": pre_norm}


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(env: CommTaskEnv, agent_cfg: AgentConfig, cfg: TrainConfig
                 ) -> tuple[CommPolicy, ValueNet, list[dict]]:
    agent_cfg.validate()
    cfg.validate()
    core = build_policy_for_env(env, agent_cfg,
                                np.random.default_rng(np.random.SeedSequence([cfg.seed, 10])))
    value_net = ValueNet(core.hidden_size, env.obs_width, agent_cfg.hidden_size,
                         np.random.default_rng(np.random.SeedSequence([cfg.seed, 11])))
    attack = None
    if cfg.at_enabled:
        attack = cfg.at_attack
    elif cfg.at_attack.p > 0 and cfg.at_attack.kind != "none":
        logger.warning("at_enabled is false; ignoring configured training attack %s",
                       cfg.at_attack.kind)
    learned = env.msg_len is None
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        records, lengths = rollout(env, core, attack, cfg.steps_per_epoch,
                                   _derived_seed(cfg.seed, 20, epoch))
        q = attach_returns(records, cfg.gamma)
        values = fill_values(records, value_net)
        batch = assemble_batch(records, q, values, learned)
        stats = policy_update(core, batch, cfg)
        stats.update(value_update(value_net, records, q, cfg))
        stats.update({"epoch": epoch, "mean_timesteps": float(np.mean(lengths)),
                      "episodes": len(lengths), "env_steps": len(records)})
        if not all(math.isfinite(v) for k, v in stats.items() if isinstance(v, float)):
            raise TrainingError(f"training diverged at epoch {epoch}: {stats}")
        history.append(stats)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            logger.info("epoch %d: mean timesteps %.2f over %d episodes",
                        epoch, stats["mean_timesteps"], stats["episodes"])
    return core, value_net, history


# ---------------------------------------------------------------------------
# checkpoint bundles and the full pipeline


@dataclass
class Bundle:
    core: CommPolicy
    value_net: ValueNet
    estimator: "object | None"
    metadata: dict


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(bundle: Bundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_tensors(directory / "policy.ckpt", bundle.core.store.arrays())
    nn.save_tensors(directory / "value.ckpt", bundle.value_net.store.arrays())
    files = ["policy.ckpt", "value.ckpt"]
    if bundle.estimator is not None:
        nn.save_tensors(directory / "estimator.ckpt", bundle.estimator.store.arrays())
        files.append("estimator.ckpt")
    meta = dict(bundle.metadata)
    meta["format"] = BUNDLE_FORMAT
    meta["hashes"] = {f: _file_sha256(directory / f) for f in files}
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bundle(directory) -> Bundle:
    from .reliability import ReliabilityEstimator

    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.exists():
        raise CheckpointError(f"{directory}: no metadata.json; not a checkpoint bundle")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != BUNDLE_FORMAT:
        raise CheckpointError(f"{directory}: unsupported bundle format {meta.get('format')}")
    for fname, digest in meta["hashes"].items():
        actual = _file_sha256(directory / fname)
        if actual != digest:
            raise CheckpointError(f"{directory}/{fname}: content hash mismatch")
    core = CommPolicy(meta["obs_width"], meta["n_actions"], meta["msg_len"],
                      hidden_size=meta["hidden_size"], aggregator=meta["aggregator"])
    core.store.load_arrays(nn.load_tensors(directory / "policy.ckpt"))
    value_net = ValueNet(meta["hidden_size"], meta["obs_width"], meta["hidden_size"])
    value_net.store.load_arrays(nn.load_tensors(directory / "value.ckpt"))
    estimator = None
    if "estimator.ckpt" in meta["hashes"]:
        estimator = ReliabilityEstimator(meta["hidden_size"], meta["obs_width"],
                                         meta["msg_len"], meta["hidden_size"])
        estimator.store.load_arrays(nn.load_tensors(directory / "estimator.ckpt"))
    return Bundle(core=core, value_net=value_net, estimator=estimator, metadata=meta)


def bundle_metadata(env: CommTaskEnv, core: CommPolicy, agent_cfg: AgentConfig,
                    cfg: TrainConfig, history: list[dict], extra: dict | None = None
                    ) -> dict:
    meta = {
        "task": env.task_name,
        "obs_width": core.obs_width,
        "n_actions": core.n_actions,
        "msg_len": core.msg_len,
        "hidden_size": core.hidden_size,
        "aggregator": core.aggregator,
        "env": asdict(env.cfg),
        "agent": asdict(agent_cfg),
        "train": {**asdict(cfg), "at_attack": asdict(cfg.at_attack)},
        "history": history,
    }
    if extra:
        meta.update(extra)
    return meta


def train_full_pipeline(env: CommTaskEnv, agent_cfg: AgentConfig, cfg: TrainConfig
                        ) -> Bundle:
    """Stage 1 policy training, stage 2 dataset, stage 3 estimator."""
    from .reliability import build_dataset, train_estimator

    core, value_net, history = train_stage1(env, agent_cfg, cfg)
    n = env.n_agents
    steps = max(1, math.ceil(cfg.dataset_size / (n * (n - 1))))
    dataset = build_dataset(core, env, steps, cfg.p_a, cfg.p_b,
                            lam=cfg.stage2_lambda, seed=_derived_seed(cfg.seed, 30))
    estimator, est_metrics = train_estimator(
        dataset, epochs=cfg.estimator_epochs, batch_size=cfg.estimator_batch,
        lr=cfg.estimator_lr, hidden_size=agent_cfg.hidden_size,
        seed=_derived_seed(cfg.seed, 31))
    logger.info("estimator holdout recall %.3f precision %.3f",
                est_metrics["recall"], est_metrics["precision"])
    meta = bundle_metadata(env, core, agent_cfg, cfg, history, extra={
        "estimator_metrics": {k: v for k, v in est_metrics.items() if k != "losses"},
        "dataset_samples": len(dataset),
    })
    return Bundle(core=core, value_net=value_net, estimator=estimator, metadata=meta)
