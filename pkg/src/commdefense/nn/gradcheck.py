"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from .autodiff import Tape, Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds a scalar-valued forward pass from scratch on every call and
    must be deterministic. Error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12); the max over all
    coordinates of all `params` is returned.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(tape, out, np.ones_like(out.data))
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(aflat[i] - numeric) / (abs(aflat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
