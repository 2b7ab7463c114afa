"""Message reliability: the learned estimator, the labeling rule, and the
dataset pipeline that trains it.

A message is labeled reliable exactly when it recommends the receiver's
best action, where "recommends action k" means the message's preference
term puts strictly more than average mass on k, and "best action" is the
argmax of the receiver's decision fed all raw (pre-attack) messages at
weight 1. Labels need only local, unperturbed information plus the message
itself, which is what makes the estimator trainable and deployable.

Label convention follows the estimator's output head: 0 = reliable,
1 = unreliable. The estimator's softmax component 0 is used directly as
the message weight. The ideal variant (weight 1 for reliable, 0 for
unreliable, computed from ground-truth labels) exists for ablations only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .agents import CommPolicy, broadcast_messages, pair_indices, sample_actions
from .attacks import StepContext, attack_l2grad, attack_random, message_stream
from .errors import CheckpointError, ShapeError, TrainingError
from .nn import Dense, ParamStore, Tensor

RELIABLE, UNRELIABLE = 0, 1

_DS_MAGIC = b"CDRELDS1"
_DS_VERSION = 1


class ReliabilityEstimator:
    """Two-hidden-layer classifier over (hidden state, embedded obs, message)."""

    def __init__(self, policy_hidden: int, obs_width: int, msg_len: int,
                 hidden_size: int = 128, rng: np.random.Generator | None = None):
        self.policy_hidden = policy_hidden
        self.obs_width = obs_width
        self.msg_len = msg_len
        self.hidden_size = hidden_size
        store = ParamStore()
        self.obs_embed = Dense(store, "obs_embed", obs_width, hidden_size, "linear", rng)
        width = policy_hidden + hidden_size + msg_len
        self.h1 = Dense(store, "h1", width, hidden_size, "relu", rng)
        self.h2 = Dense(store, "h2", hidden_size, hidden_size, "relu", rng)
        self.out = Dense(store, "out", hidden_size, 2, "linear", rng)
        self.store = store

    def logits(self, h, obs, msg) -> Tensor:
        e = self.obs_embed(nn.as_tensor(obs))
        x = nn.concat([nn.as_tensor(h), e, nn.as_tensor(msg)])
        return self.out(self.h2(self.h1(x)))

    def estimate(self, h, obs, msg) -> np.ndarray | float:
        """Reliability weight(s) in (0, 1): softmax component 0."""
        p = nn.softmax(self.logits(h, obs, msg)).data
        return p[..., 0] if p.ndim > 1 else float(p[0])


# ---------------------------------------------------------------------------
# labeling


def recommends(core: CommPolicy, obs, payload, k: int) -> bool:
    """Does the message put strictly above-average preference on action k?"""
    if not 0 <= k < core.n_actions:
        raise ShapeError(f"action {k} out of range for {core.n_actions} actions")
    pref = core.message_preference(obs, payload).data
    return bool(pref[k] > pref.mean())


def best_action(core: CommPolicy, obs, h, raw_messages) -> int:
    """Undefended greedy action given all raw messages at weight 1."""
    v = core.total_preference(h, obs, [(m, 1.0) for m in raw_messages])
    return int(np.argmax(v.data))


def label_message(core: CommPolicy, obs, h, payload, raw_messages) -> int:
    best = best_action(core, obs, h, raw_messages)
    return RELIABLE if recommends(core, obs, payload, best) else UNRELIABLE


def ire_weight(label: int) -> float:
    return 1.0 if label == RELIABLE else 0.0


def pair_labels(core: CommPolicy, e_rows: np.ndarray, payloads: np.ndarray,
                best_actions: np.ndarray) -> np.ndarray:
    """Vectorized labels for (receiver embedding, payload) rows."""
    prefs = core.message_preference_from_embed(Tensor(e_rows), Tensor(payloads)).data
    rec = prefs[np.arange(len(best_actions)), best_actions] > prefs.mean(axis=1)
    return np.where(rec, RELIABLE, UNRELIABLE).astype(np.uint8)


def directed_labels(core: CommPolicy, ctx: StepContext, payloads: np.ndarray) -> np.ndarray:
    """(N, N) labels of directed payloads against raw-message best actions.

    Entries for self-pairs and null senders are UNRELIABLE placeholders and
    must be masked by the caller.
    """
    recv, send = pair_indices(ctx.n)
    flat = pair_labels(core, ctx.e[recv], payloads[recv, send], ctx.best[recv])
    out = np.full((ctx.n, ctx.n), UNRELIABLE, dtype=np.uint8)
    out[recv, send] = flat
    return out


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ReliabilityDataset:
    """Supervised samples (h, o, m, label) grouped by source episode.

    ``kinds`` (0 raw / 1 random / 2 adversarial) and ``best`` are in-memory
    diagnostics from the builder; they are not part of the file format.
    """

    h: np.ndarray
    obs: np.ndarray
    msg: np.ndarray
    labels: np.ndarray
    episode_ids: np.ndarray
    kinds: np.ndarray | None = None
    best: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def save(self, path) -> None:
        episodes, counts = np.unique(self.episode_ids, return_counts=True)
        order = np.argsort(self.episode_ids, kind="stable")
        h, obs, msg, labels = (a[order] for a in (self.h, self.obs, self.msg, self.labels))
        header = [
            _DS_MAGIC,
            struct.pack("<IIIIII", _DS_VERSION, len(labels), self.h.shape[1],
                        self.obs.shape[1], self.msg.shape[1], len(episodes)),
            struct.pack(f"<{len(episodes)}I", *counts),
        ]
        width = self.h.shape[1] + self.obs.shape[1] + self.msg.shape[1]
        rec = np.empty(len(labels), dtype=np.dtype([("vec", "<f8", (width,)), ("label", "u1")]))
        rec["vec"] = np.hstack([h, obs, msg])
        rec["label"] = labels
        Path(path).write_bytes(b"".join(header) + rec.tobytes())

    @classmethod
    def load(cls, path) -> "ReliabilityDataset":
        raw = Path(path).read_bytes()
        if len(raw) < 32 or raw[:8] != _DS_MAGIC:
            raise CheckpointError(f"{path}: not a reliability dataset (bad magic)")
        version, n, hw, ow, mw, n_ep = struct.unpack_from("<IIIIII", raw, 8)
        if version != _DS_VERSION:
            raise CheckpointError(f"{path}: unsupported dataset version {version}")
        pos = 32
        counts = struct.unpack_from(f"<{n_ep}I", raw, pos)
        pos += 4 * n_ep
        if sum(counts) != n:
            raise CheckpointError(f"{path}: episode counts sum {sum(counts)} != {n} samples")
        width = hw + ow + mw
        dtype = np.dtype([("vec", "<f8", (width,)), ("label", "u1")])
        expected = pos + n * dtype.itemsize
        if len(raw) != expected:
            raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
        vec = rec["vec"].astype(np.float64)
        episode_ids = np.repeat(np.arange(n_ep, dtype=np.int64), counts)
        return cls(h=vec[:, :hw], obs=vec[:, hw:hw + ow], msg=vec[:, hw + ow:],
                   labels=rec["label"].astype(np.uint8), episode_ids=episode_ids)


def build_dataset(core: CommPolicy, env, steps: int, p_a: float, p_b: float,
                  lam: float = 0.5, seed: int = 0, clip: bool = True) -> ReliabilityDataset:
    """Roll the trained policy, perturb a slice of the messages, label all.

    Each directed message is replaced with probability ``p_a``; a replaced
    message is random with probability ``p_b``, otherwise an L2-normed
    gradient attack. Every directed message (perturbed or not) becomes one
    sample labeled against the receiver's raw-message best action. The
    environment always advances on raw-message decisions; perturbed ones
    exist only to be judged.
    """
    if not (0.0 <= p_a <= 1.0 and 0.0 <= p_b <= 1.0):
        raise TrainingError(f"perturb probabilities must be in [0, 1], got {p_a}, {p_b}")
    n = env.n_agents
    recv, send = pair_indices(n)
    rows_h, rows_o, rows_m, rows_y, rows_ep, rows_kind, rows_best = [], [], [], [], [], [], []
    action_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    steps_done = 0
    episode = 0
    while steps_done < steps:
        env_seed = int(np.random.SeedSequence([seed, 0, episode]).generate_state(1)[0])
        obs = env.reset(env_seed)
        h = np.zeros((n, core.hidden_size))
        for t in range(env.t_max):
            e = core.embed_obs(obs)
            h = core.update_hidden_from_embed(h, e).data
            broadcast, null = broadcast_messages(core, env, h, e)
            ctx = StepContext(core, h, e.data, broadcast, null)
            payloads, kinds = [], []
            keep = ~null[send]
            for pj, pi in zip(send[keep], recv[keep]):
                stream = message_stream(seed, episode, t, int(pj), int(pi))
                if stream.random() < p_a:
                    if stream.random() < p_b:
                        payloads.append(attack_random(stream, core.msg_len))
                        kinds.append(1)
                    else:
                        payloads.append(attack_l2grad(ctx.view(int(pj), [int(pi)]),
                                                      broadcast[pj], lam, clip))
                        kinds.append(2)
                else:
                    payloads.append(broadcast[pj])
                    kinds.append(0)
            if payloads:
                payloads = np.stack(payloads)
                e_rows = ctx.e[recv[keep]]
                best_rows = ctx.best[recv[keep]]
                labels = pair_labels(core, e_rows, payloads, best_rows)
                rows_h.append(h[recv[keep]])
                rows_o.append(obs[recv[keep]])
                rows_m.append(payloads)
                rows_y.append(labels)
                rows_kind.append(np.array(kinds, dtype=np.int8))
                rows_best.append(best_rows)
                rows_ep.append(np.full(len(labels), episode, dtype=np.int64))
            actions = sample_actions(ctx.raw_probs, action_rng)
            res = env.step(actions)
            obs = res.obs
            steps_done += 1
            if res.done or steps_done >= steps:
                break
        episode += 1
    return ReliabilityDataset(
        h=np.concatenate(rows_h), obs=np.concatenate(rows_o), msg=np.concatenate(rows_m),
        labels=np.concatenate(rows_y), episode_ids=np.concatenate(rows_ep),
        kinds=np.concatenate(rows_kind), best=np.concatenate(rows_best))


# ---------------------------------------------------------------------------
# stage-3 training


def split_by_episode(dataset: ReliabilityDataset, holdout_frac: float = 0.2
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Train/holdout sample indices; the last fifth of episodes is held out."""
    episodes = np.unique(dataset.episode_ids)
    if len(episodes) < 2:
        raise TrainingError("episode-level holdout needs at least 2 episodes")
    n_hold = max(1, int(round(holdout_frac * len(episodes))))
    held = set(episodes[-n_hold:].tolist())
    mask = np.array([ep in held for ep in dataset.episode_ids])
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def reliable_class_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Recall and precision with 'reliable' (label 0) as the positive class."""
    tp = int(np.sum((pred == RELIABLE) & (truth == RELIABLE)))
    fn = int(np.sum((pred != RELIABLE) & (truth == RELIABLE)))
    fp = int(np.sum((pred == RELIABLE) & (truth != RELIABLE)))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    return recall, precision


def train_estimator(dataset: ReliabilityDataset, epochs: int = 100, batch_size: int = 64,
                    lr: float = 3e-4, hidden_size: int = 128, seed: int = 0
                    ) -> tuple[ReliabilityEstimator, dict]:
    """Cross-entropy training of the estimator; returns holdout metrics.

    Raises TrainingError when the training split does not contain both
    classes, since a one-class estimator is vacuous.
    """
    train_idx, hold_idx = split_by_episode(dataset)
    y_train = dataset.labels[train_idx]
    if len(np.unique(y_train)) < 2:
        raise TrainingError("training split contains a single class; cannot fit estimator")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    est = ReliabilityEstimator(dataset.h.shape[1], dataset.obs.shape[1],
                               dataset.msg.shape[1], hidden_size=hidden_size,
                               rng=np.random.default_rng(np.random.SeedSequence([seed, 3])))
    x_h, x_o, x_m = dataset.h, dataset.obs, dataset.msg
    losses = []
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            est.store.zero_grad()
            with nn.Tape() as tape:
                logits = est.logits(x_h[batch], x_o[batch], x_m[batch])
                loss = nn.cross_entropy(nn.softmax(logits), dataset.labels[batch])
            nn.backward(tape, loss)
            nn.adam_step(est.store, lr)
            total += loss.item()
        losses.append(total / len(order))
    hold_logits = est.logits(x_h[hold_idx], x_o[hold_idx], x_m[hold_idx]).data
    pred = hold_logits.argmax(axis=1)
    recall, precision = reliable_class_metrics(pred, dataset.labels[hold_idx])
    metrics = {
        "recall": recall,
        "precision": precision,
        "holdout_samples": int(len(hold_idx)),
        "train_samples": int(len(train_idx)),
        "losses": losses,
    }
    return est, metrics
