"""Message-aggregation policies.

The decomposable policy keeps every message's influence inside an additive
per-action preference term: a recurrent module turns observations into a
hidden state, a base module scores actions from that hidden state, and a
message module scores actions from (observation, message) pairs. The total
preference is

    v = base(h) + sum_j w_j * msg_pref(o, m_j)

with per-message weights w_j in [0, 1] (1 when no defense is active), and
the action distribution is softmax(v). Because each message enters through
its own term, down-weighting a suspect message provably shrinks its pull on
the actions it promotes most and least.

An attention aggregator is also provided as the undefended baseline: the
same base/message modules, but weights come from scaled dot-product
attention between the hidden state and message payloads instead of from a
reliability judgment.

Parameters are shared across agents of a task; hidden states are owned by
the caller (one row per agent), so the policy object itself is stateless
and safe to read from many rollout workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import nn
from .errors import ShapeError
from .nn import Dense, GRUCell, ParamStore, Tensor

ATTN_DIM = 32


@dataclass
class Message:
    """One broadcast message: bounded payload plus sender identity."""

    payload: np.ndarray
    sender: int = -1
    null: bool = False


@dataclass
class AgentConfig:
    hidden_size: int = 128
    msg_len: int = 16
    defense: str = "none"              # none | re | ire | zero (evaluation-time)
    aggregator: str = "decomposable"   # decomposable | attention

    def validate(self) -> None:
        from .errors import ConfigError
        if self.hidden_size < 1 or self.msg_len < 1:
            raise ConfigError("hidden_size and msg_len must be positive")
        if self.defense not in ("none", "re", "ire", "zero"):
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.aggregator not in ("decomposable", "attention"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")


@lru_cache(maxsize=None)
def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Receiver/sender index vectors for all ordered pairs (i, j != i).

    Receiver-major, senders ascending; length n*(n-1) each.
    """
    recv = np.repeat(np.arange(n), n - 1)
    send = np.concatenate([np.delete(np.arange(n), i) for i in range(n)])
    recv.setflags(write=False)
    send.setflags(write=False)
    return recv, send


class CommPolicy:
    """Shared policy network for one task (see module docstring)."""

    def __init__(self, obs_width: int, n_actions: int, msg_len: int,
                 hidden_size: int = 128, aggregator: str = "decomposable",
                 rng: np.random.Generator | None = None):
        # rng=None builds an all-zero network (useful as a fixed point in tests)
        self.obs_width = obs_width
        self.n_actions = n_actions
        self.msg_len = msg_len
        self.hidden_size = hidden_size
        self.aggregator = aggregator
        h = hidden_size
        store = ParamStore()
        self.obs_embed = Dense(store, "obs_embed", obs_width, h, "linear", rng)
        self.gru = GRUCell(store, "gru", h, h, rng)
        self.base_hidden = Dense(store, "base.h1", h, h, "relu", rng)
        self.base_out = Dense(store, "base.out", h, n_actions, "linear", rng)
        self.msg_hidden = Dense(store, "msg.h1", h + msg_len, h, "relu", rng)
        self.msg_out = Dense(store, "msg.out", h, n_actions, "linear", rng)
        self.enc_hidden = Dense(store, "enc.h1", 2 * h, h, "relu", rng)
        self.enc_out = Dense(store, "enc.out", h, msg_len, "tanh", rng)
        if aggregator == "attention":
            self.attn_q = Dense(store, "attn.q", h, ATTN_DIM, "linear", rng)
            self.attn_k = Dense(store, "attn.k", msg_len, ATTN_DIM, "linear", rng)
        self.store = store

    # -- forward pieces (rows may be single vectors or batches) -------------
    def embed_obs(self, obs) -> Tensor:
        return self.obs_embed(nn.as_tensor(obs))

    def update_hidden(self, h_prev, obs) -> Tensor:
        """One recurrent step; messages never enter the hidden state."""
        return self.gru(self.embed_obs(obs), nn.as_tensor(h_prev))

    def update_hidden_from_embed(self, h_prev, e) -> Tensor:
        return self.gru(e, nn.as_tensor(h_prev))

    def encode_message(self, h, obs) -> Tensor:
        return self.encode_from_embed(h, self.embed_obs(obs))

    def encode_from_embed(self, h, e) -> Tensor:
        return self.enc_out(self.enc_hidden(nn.concat([nn.as_tensor(h), e])))

    def base_preference(self, h) -> Tensor:
        return self.base_out(self.base_hidden(nn.as_tensor(h)))

    def message_preference(self, obs, payload) -> Tensor:
        return self.message_preference_from_embed(self.embed_obs(obs), payload)

    def message_preference_from_embed(self, e, payload) -> Tensor:
        return self.msg_out(self.msg_hidden(nn.concat([e, nn.as_tensor(payload)])))

    # -- aggregation ----------------------------------------------------------
    def total_preference(self, h, obs, incoming) -> Tensor:
        """Weighted aggregation for one agent.

        `incoming` is a list of (Message-or-payload, weight) pairs; null
        messages are skipped entirely. Weights outside [0, 1] are rejected.
        """
        v = self.base_preference(h)
        e = None
        for msg, weight in incoming:
            if isinstance(msg, Message):
                if msg.null:
                    continue
                payload = msg.payload
            else:
                payload = msg
            if not (0.0 <= weight <= 1.0):
                raise ShapeError(f"message weight {weight} outside [0, 1]")
            if e is None:
                e = self.embed_obs(obs)
            term = self.message_preference_from_embed(e, payload)
            v = nn.add(v, nn.mul(term, float(weight)))
        return v

    def attention_aggregate(self, h, obs, messages) -> Tensor:
        """Aggregation for one agent with attention-derived weights."""
        if self.aggregator != "attention":
            raise ShapeError("policy was not built with the attention aggregator")
        payloads = []
        for msg in messages:
            if isinstance(msg, Message):
                if msg.null:
                    continue
                payloads.append(msg.payload)
            else:
                payloads.append(np.asarray(msg))
        v = self.base_preference(h)
        if not payloads:
            return v
        e = self.embed_obs(obs)
        stacked = Tensor(np.stack(payloads))
        q = self.attn_q(nn.as_tensor(h))
        k = self.attn_k(stacked)
        scores = nn.mul(nn.matmul(k, nn.reshape(q, (ATTN_DIM, 1))), 1.0 / math.sqrt(ATTN_DIM))
        weights = nn.softmax(nn.reshape(scores, (len(payloads),)))
        e_rows = nn.gather_rows(nn.reshape(e, (1, -1)), np.zeros(len(payloads), dtype=np.intp))
        terms = self.message_preference_from_embed(e_rows, stacked)
        weighted = nn.mul(terms, nn.reshape(weights, (len(payloads), 1)))
        return nn.add(v, nn.reshape(nn.sum_groups(weighted, len(payloads)), v.shape))

    def attention_weights(self, h, messages) -> np.ndarray:
        """Attention weights for one agent's non-null messages (no grad)."""
        payloads = [m.payload if isinstance(m, Message) else np.asarray(m)
                    for m in messages
                    if not (isinstance(m, Message) and m.null)]
        if not payloads:
            return np.zeros(0)
        q = self.attn_q(nn.as_tensor(h)).data
        k = self.attn_k(Tensor(np.stack(payloads))).data
        scores = k @ q / math.sqrt(ATTN_DIM)
        e = np.exp(scores - scores.max())
        return e / e.sum()


# -- batched aggregation over (rows = agents or agent-timesteps) -------------

def batched_total_preference(core: CommPolicy, e: Tensor, h: Tensor,
                             pair_payloads: Tensor, pair_weights: np.ndarray,
                             n_agents: int) -> Tensor:
    """Total preferences for B rows at once, decomposable weighting.

    Pair rows follow pair_indices order repeated per timestep block; null
    senders must carry weight 0 (bit-exact equal to skipping them).
    """
    base = core.base_preference(h)
    recv, _ = pair_indices(n_agents)
    rows = e.data.shape[0]
    blocks = rows // n_agents
    recv_rows = (np.arange(blocks)[:, None] * n_agents + recv[None, :]).reshape(-1)
    pe = nn.gather_rows(e, recv_rows)
    terms = core.msg_out(core.msg_hidden(nn.concat([pe, pair_payloads])))
    weighted = nn.mul(terms, Tensor(pair_weights.reshape(-1, 1)))
    return nn.add(base, nn.sum_groups(weighted, n_agents - 1))


def batched_attention_preference(core: CommPolicy, e: Tensor, h: Tensor,
                                 pair_payloads: Tensor, null_pair: np.ndarray,
                                 n_agents: int) -> Tensor:
    """Attention-weighted analogue of batched_total_preference.

    Null senders are masked out of each receiver's softmax; a receiver with
    no live senders gets zero message contribution.
    """
    base = core.base_preference(h)
    recv, _ = pair_indices(n_agents)
    rows = e.data.shape[0]
    blocks = rows // n_agents
    recv_rows = (np.arange(blocks)[:, None] * n_agents + recv[None, :]).reshape(-1)
    pe = nn.gather_rows(e, recv_rows)
    terms = core.msg_out(core.msg_hidden(nn.concat([pe, pair_payloads])))

    q = nn.gather_rows(core.attn_q(h), recv_rows)
    k = core.attn_k(pair_payloads)
    scores = nn.mul(nn.sum_last_keepdims(nn.mul(q, k)), 1.0 / math.sqrt(ATTN_DIM))
    mask_penalty = np.where(null_pair.reshape(-1, 1), -1e30, 0.0)
    masked = nn.add(scores, Tensor(mask_penalty))
    grouped = nn.softmax(nn.reshape(masked, (-1, n_agents - 1)))
    weights = nn.reshape(grouped, (-1, 1))
    live = np.where(null_pair.reshape(-1, 1), 0.0, 1.0)
    weights = nn.mul(weights, Tensor(live))
    weighted = nn.mul(terms, weights)
    return nn.add(base, nn.sum_groups(weighted, n_agents - 1))


def decision_preferences(core: CommPolicy, e, h, directed: np.ndarray,
                         null: np.ndarray, weights: np.ndarray) -> Tensor:
    """Per-agent total preferences given received directed payloads.

    ``directed[i, j]`` is receiver i's copy of sender j's message and
    ``weights[i, j]`` its defense weight (ignored by the attention
    aggregator, which derives its own). Null senders contribute nothing.
    """
    n = directed.shape[0]
    if n == 1:
        return core.base_preference(h)
    recv, send = pair_indices(n)
    pair_payloads = Tensor(directed[recv, send])
    if core.aggregator == "attention":
        return batched_attention_preference(core, nn.as_tensor(e), nn.as_tensor(h),
                                            pair_payloads, null[send], n)
    live = (~null[send]).astype(np.float64)
    pair_w = weights[recv, send] * live
    return batched_total_preference(core, nn.as_tensor(e), nn.as_tensor(h),
                                    pair_payloads, pair_w, n)


def broadcast_messages(core: CommPolicy, env, h: np.ndarray, e: Tensor
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Outgoing (payloads, null flags) for all agents this step.

    Predefined-communication tasks hand out env-authored messages; learned
    tasks run the encoder on (hidden state, observation embedding).
    """
    if env.msg_len is not None:
        return env.predefined_messages()
    payloads = core.encode_from_embed(nn.as_tensor(h), e).data
    return payloads, np.zeros(h.shape[0], dtype=bool)


# -- action selection ---------------------------------------------------------

def decide(v) -> Tensor:
    """Preference vector to action distribution."""
    return nn.softmax(nn.as_tensor(v))


def act(dist, rng: np.random.Generator | None = None, mode: str = "sample") -> int:
    """Pick an action from a distribution; greedy breaks ties low."""
    p = np.asarray(dist.data if isinstance(dist, Tensor) else dist, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(p))
    if rng is None:
        raise ShapeError("sampling requires an rng")
    return int(_sample_rows(p[None, :], rng.random(1))[0])


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise categorical sampling, one uniform draw per row."""
    return _sample_rows(probs, rng.random(probs.shape[0]))


def greedy_actions(probs: np.ndarray) -> np.ndarray:
    return probs.argmax(axis=1)


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cs = np.cumsum(probs, axis=1)
    mask = cs > u[:, None]
    idx = mask.argmax(axis=1)
    return np.where(mask.any(axis=1), idx, probs.shape[1] - 1)
