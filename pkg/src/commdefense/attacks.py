"""The message perturbation channel and the attack suite.

Threat model: at every timestep each directed message (sender j to receiver
i) is independently replaced with probability p. Perturbations are not norm
bounded; attacked payloads are clipped back to the valid [-1, 1] box by
default since out-of-range components would be trivially detectable.

Adversarial attacks optimize one of two objectives over the candidate
payload, evaluated against the victim's own aggregation (all weights 1 for
the decomposable policy, learned attention weights for the attention
baseline):

    objective A: sum over victims of P(best action)   -- attacker minimizes
    objective B: sum over victims of KL(perturbed distribution || raw one)
                                                       -- attacker maximizes

Attack evaluation is side-effect free on the agents: gradients are taken
with respect to the candidate payload only (``Tape(grad_params=False)``)
and never touch parameter or hidden state buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .agents import ATTN_DIM, CommPolicy, pair_indices
from .errors import ConfigError
from .nn import Tape, Tensor, backward

ATTACK_KINDS = ("none", "random", "l2grad", "gaussian", "montecarlo", "fgsm", "pgd")
GRADIENT_KINDS = ("l2grad", "fgsm", "pgd")
VIEW_KINDS = ("l2grad", "montecarlo", "fgsm", "pgd")

# floor for log-probabilities of the raw distribution inside objective B;
# keeps KL finite if a raw probability underflowed to exactly zero
_LOG_FLOOR = -745.0


@dataclass
class AttackSpec:
    kind: str = "none"
    objective: str = "A"
    p: float = 0.0
    sigma: float = 0.5
    eta: float = 1.0
    epsilon: float = 0.3
    pgd_steps: int = 5
    mc_candidates: int = 10
    lam: float = 0.5
    clip: bool = True

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.objective not in ("A", "B"):
            raise ConfigError(f"attack objective must be A or B, got {self.objective!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"attack probability must be in [0, 1], got {self.p}")
        for name in ("sigma", "eta", "epsilon", "lam"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"attack parameter {name} must be > 0")
        if self.pgd_steps < 1 or self.mc_candidates < 1:
            raise ConfigError("pgd_steps and mc_candidates must be >= 1")


@dataclass
class Victim:
    """Everything the attacker needs about one receiver of the message."""

    e: np.ndarray                 # receiver's observation embedding
    best_action: int
    raw_probs: np.ndarray
    # decomposable receivers: base + all other raw message terms, precomputed
    const_pref: np.ndarray | None = None
    # attention receivers: weights must be re-derived per candidate
    base: np.ndarray | None = None
    query: np.ndarray | None = None
    other_keys: np.ndarray | None = None   # (M, attn_dim)
    other_terms: np.ndarray | None = None  # (M, K)


@dataclass
class VictimView:
    core: CommPolicy
    victims: list[Victim]


@dataclass
class DirectedMessages:
    """Per-receiver message payloads after the channel.

    ``payloads[i, j]`` is what receiver i got from sender j. The perturbed
    flags are bookkeeping for metrics and training; agents never see them.
    """

    payloads: np.ndarray   # (N, N, L)
    null: np.ndarray       # (N,) sender null flags
    perturbed: np.ndarray  # (N, N) bool

    @staticmethod
    def passthrough(broadcast: np.ndarray, null: np.ndarray) -> "DirectedMessages":
        n = broadcast.shape[0]
        return DirectedMessages(
            payloads=np.repeat(broadcast[None, :, :], n, axis=0),
            null=null.copy(),
            perturbed=np.zeros((n, n), dtype=bool),
        )


# ---------------------------------------------------------------------------
# attacker's view of one step


class StepContext:
    """Raw-message decision state for one timestep, shared by the attacker,
    the ideal-estimator labeler, and the dataset builder."""

    def __init__(self, core: CommPolicy, h: np.ndarray, e: np.ndarray,
                 broadcast: np.ndarray, null: np.ndarray):
        self.core = core
        self.h = h
        self.e = e
        self.broadcast = broadcast
        self.null = null
        n = h.shape[0]
        self.n = n
        recv, send = pair_indices(n)
        self.base = core.base_preference(Tensor(h)).data
        terms = core.message_preference_from_embed(
            Tensor(e[recv]), Tensor(broadcast[send])).data
        k = terms.shape[1]
        self.pair_terms = np.zeros((n, n, k))
        self.pair_terms[recv, send] = terms
        live = (~null[send]).astype(float)
        if core.aggregator == "attention":
            q = core.attn_q(Tensor(h)).data
            keys = core.attn_k(Tensor(broadcast)).data
            scores = (q[recv] * keys[send]).sum(axis=1) / math.sqrt(ATTN_DIM)
            scores = np.where(null[send], -1e30, scores).reshape(n, n - 1)
            shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
            w = shifted / shifted.sum(axis=1, keepdims=True)
            w = w.reshape(-1) * live
            self.keys = keys
            self.query = q
        else:
            w = live
            self.keys = None
            self.query = None
        self.pair_weights = np.zeros((n, n))
        self.pair_weights[recv, send] = w
        contrib = (terms * w[:, None]).reshape(n, n - 1, k).sum(axis=1)
        self.raw_total = self.base + contrib
        shiftedt = np.exp(self.raw_total - self.raw_total.max(axis=1, keepdims=True))
        self.raw_probs = shiftedt / shiftedt.sum(axis=1, keepdims=True)
        self.best = self.raw_total.argmax(axis=1)

    def view(self, sender: int, receivers) -> VictimView:
        victims = []
        for i in receivers:
            if i == sender:
                continue
            others = [j for j in range(self.n) if j not in (i, sender) and not self.null[j]]
            if self.core.aggregator == "attention":
                victims.append(Victim(
                    e=self.e[i], best_action=int(self.best[i]), raw_probs=self.raw_probs[i],
                    base=self.base[i], query=self.query[i],
                    other_keys=self.keys[others] if others else np.zeros((0, ATTN_DIM)),
                    other_terms=self.pair_terms[i, others] if others
                    else np.zeros((0, self.base.shape[1])),
                ))
            else:
                const = self.base[i].copy()
                for j in others:
                    const += self.pair_terms[i, j]
                victims.append(Victim(e=self.e[i], best_action=int(self.best[i]),
                                      raw_probs=self.raw_probs[i], const_pref=const))
        return VictimView(core=self.core, victims=victims)


def _victim_pref(core: CommPolicy, victim: Victim, candidate) -> Tensor:
    """Total preference of one victim with the candidate payload in place."""
    term = core.message_preference_from_embed(Tensor(victim.e), candidate)
    if victim.const_pref is not None:
        return nn.add(Tensor(victim.const_pref), term)
    # attention: the candidate's key shifts every weight
    key = core.attn_k(candidate)
    m = victim.other_keys.shape[0]
    other_scores = (victim.other_keys @ victim.query) / math.sqrt(ATTN_DIM)
    cand_score = nn.mul(nn.sum_all(nn.mul(key, Tensor(victim.query))), 1.0 / math.sqrt(ATTN_DIM))
    scores = nn.concat([Tensor(other_scores), nn.reshape(cand_score, (1,))], axis=0) \
        if m else nn.reshape(cand_score, (1,))
    weights = nn.softmax(scores)
    terms = nn.concat([Tensor(victim.other_terms), nn.reshape(term, (1, -1))], axis=0) \
        if m else nn.reshape(term, (1, -1))
    weighted = nn.mul(terms, nn.reshape(weights, (m + 1, 1)))
    agg = nn.reshape(nn.sum_groups(weighted, m + 1), victim.base.shape)
    return nn.add(Tensor(victim.base), agg)


def objective_A(view: VictimView, candidate) -> Tensor:
    """Summed best-action probability across victims; attacker minimizes."""
    cand = nn.as_tensor(candidate)
    total = None
    for victim in view.victims:
        p = nn.softmax(_victim_pref(view.core, victim, cand))
        onehot = np.zeros(p.data.shape[-1])
        onehot[victim.best_action] = 1.0
        picked = nn.sum_all(nn.mul(p, Tensor(onehot)))
        total = picked if total is None else nn.add(total, picked)
    return total


def objective_B(view: VictimView, candidate) -> Tensor:
    """Summed KL(perturbed || raw) across victims; attacker maximizes."""
    cand = nn.as_tensor(candidate)
    total = None
    for victim in view.victims:
        pref = _victim_pref(view.core, victim, cand)
        shifted = nn.sub(pref, float(pref.data.max()))
        log_norm = nn.log(nn.sum_all(nn.exp(shifted)))
        log_p_hat = nn.sub(shifted, log_norm)
        p_hat = nn.exp(log_p_hat)
        log_raw = np.maximum(np.log(np.maximum(victim.raw_probs, 5e-324)), _LOG_FLOOR)
        kl = nn.sum_all(nn.mul(p_hat, nn.sub(log_p_hat, Tensor(log_raw))))
        total = kl if total is None else nn.add(total, kl)
    return total


def _objective_value_and_grad(view, payload, objective: str):
    cand = Tensor(payload, requires_grad=True)
    fn = objective_A if objective == "A" else objective_B
    with Tape(grad_params=False) as tape:
        out = fn(view, cand)
    backward(tape, out)
    grad = cand.grad if cand.grad is not None else np.zeros_like(payload)
    return float(out.data), grad


def _clip(payload: np.ndarray, clip: bool) -> np.ndarray:
    return np.clip(payload, -1.0, 1.0) if clip else payload


# ---------------------------------------------------------------------------
# the six attacks


def attack_random(rng: np.random.Generator, length: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=length)


def attack_l2grad(view: VictimView, payload: np.ndarray, lam: float,
                  clip: bool = True) -> np.ndarray:
    """Unit-norm gradient step that decreases the best-action objective."""
    _, grad = _objective_value_and_grad(view, payload, "A")
    norm = float(np.linalg.norm(grad))
    if norm == 0.0:
        return payload.copy()
    return _clip(payload - lam * grad / norm, clip)


def attack_gaussian(payload: np.ndarray, sigma: float, rng: np.random.Generator,
                    clip: bool = True) -> np.ndarray:
    return _clip(payload + sigma * rng.standard_normal(payload.shape), clip)


def attack_montecarlo(view: VictimView, objective: str, n_candidates: int,
                      rng: np.random.Generator) -> np.ndarray:
    length = view.core.msg_len
    candidates = rng.uniform(-1.0, 1.0, size=(n_candidates, length))
    fn = objective_A if objective == "A" else objective_B
    values = [float(fn(view, c).data) for c in candidates]
    idx = int(np.argmin(values)) if objective == "A" else int(np.argmax(values))
    return candidates[idx]


def attack_fgsm(view: VictimView, payload: np.ndarray, eta: float, objective: str,
                clip: bool = True) -> np.ndarray:
    """One signed-gradient ascent step on the attacker's gain."""
    _, grad = _objective_value_and_grad(view, payload, objective)
    gain_grad = -grad if objective == "A" else grad
    return _clip(payload + eta * np.sign(gain_grad), clip)


def attack_pgd(view: VictimView, payload: np.ndarray, epsilon: float, steps: int,
               objective: str, clip: bool = True) -> np.ndarray:
    current = payload.copy()
    for _ in range(steps):
        _, grad = _objective_value_and_grad(view, current, objective)
        gain_grad = -grad if objective == "A" else grad
        current = _clip(current + epsilon * np.sign(gain_grad), clip)
    return current


# ---------------------------------------------------------------------------
# the channel


def apply_channel(broadcast: np.ndarray, null: np.ndarray, spec: AttackSpec | None,
                  ctx: StepContext | None, rng_for, objective_log: list | None = None
                  ) -> DirectedMessages:
    """Independently perturb each directed non-null message with prob spec.p.

    ``rng_for(sender, receiver)`` must hand back an independent, reproducible
    generator per directed message. ``ctx`` may be None for attacks that need
    no victim view. ``objective_log`` optionally collects the attacker's
    objective value at each emitted perturbation (diagnostics only).
    """
    out = DirectedMessages.passthrough(broadcast, null)
    if spec is None or spec.kind == "none" or spec.p == 0.0:
        return out
    if spec.kind in VIEW_KINDS and ctx is None:
        raise ConfigError(f"attack kind {spec.kind!r} needs a step context")
    n = broadcast.shape[0]
    length = broadcast.shape[1]
    for j in range(n):
        if null[j]:
            continue
        for i in range(n):
            if i == j:
                continue
            rng = rng_for(j, i)
            if rng.random() >= spec.p:
                continue
            raw = broadcast[j]
            if spec.kind == "random":
                new = attack_random(rng, length)
            elif spec.kind == "gaussian":
                new = attack_gaussian(raw, spec.sigma, rng, spec.clip)
            elif spec.kind == "l2grad":
                new = attack_l2grad(ctx.view(j, [i]), raw, spec.lam, spec.clip)
            elif spec.kind == "montecarlo":
                new = attack_montecarlo(ctx.view(j, [i]), spec.objective,
                                        spec.mc_candidates, rng)
            elif spec.kind == "fgsm":
                new = attack_fgsm(ctx.view(j, [i]), raw, spec.eta, spec.objective, spec.clip)
            elif spec.kind == "pgd":
                new = attack_pgd(ctx.view(j, [i]), raw, spec.epsilon, spec.pgd_steps,
                                 spec.objective, spec.clip)
            else:  # pragma: no cover
                raise ConfigError(f"unhandled attack kind {spec.kind!r}")
            out.payloads[i, j] = new
            out.perturbed[i, j] = True
            if objective_log is not None and spec.kind in VIEW_KINDS:
                fn = objective_A if spec.objective == "A" else objective_B
                objective_log.append(float(fn(ctx.view(j, [i]), new).data))
    return out


def message_stream(master_seed: int, episode: int, t: int, sender: int, receiver: int
                   ) -> np.random.Generator:
    """Independent reproducible RNG stream per directed message."""
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, episode, t, sender, receiver]))
