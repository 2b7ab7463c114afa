"""Adam optimizer and gradient-norm clipping over a ParamStore."""

from __future__ import annotations

import math

import numpy as np

from .layers import ParamStore


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; zeroes gradients afterwards.

    Requires exclusive access to the store: no concurrent forward pass may
    be reading parameter values while this runs.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in zip(store.names(), store.tensors()):
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g.fill(0.0)


def grad_norm(store: ParamStore) -> float:
    total = 0.0
    for p in store.tensors():
        total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in store.tensors():
            p.grad *= scale
    return norm
