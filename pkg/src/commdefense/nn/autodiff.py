"""Reverse-mode automatic differentiation over float64 numpy arrays.

Everything here is eager: an op computes its numpy result immediately and,
when a :class:`Tape` is active, appends a vector-Jacobian callback for each
input that can receive gradient. ``backward`` replays the tape in exact
reverse execution order and accumulates gradients into the ``grad`` buffers
of the tensors that asked for them.

Only the ops the package's networks need are provided; this is not a general
autodiff system. All data is float64. Shapes follow numpy broadcasting for
``add``/``mul``/``sub``; everything else is 1-D vectors or 2-D batches.

Two details matter for callers:

* A tensor created under one tape must not be fed into ops under another
  tape; build a fresh forward pass instead. Parameters (``is_param=True``)
  are exempt and may appear in any number of passes; their gradients
  accumulate across backward calls until explicitly zeroed.
* ``Tape(grad_params=False)`` records a pass whose backward leaves every
  parameter untouched and only fills gradients of non-parameter leaves.
  The attack objectives use this to differentiate with respect to a message
  without disturbing optimizer state.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError, TapeError

_ACTIVE: "Tape | None" = None


class Tensor:
    """A float64 numpy array plus an optional gradient buffer.

    ``requires_grad`` marks a leaf whose gradient should be produced by
    ``backward``. ``is_param`` additionally marks it as an optimizer-owned
    parameter, which ``Tape(grad_params=False)`` excludes.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_param", "_tape", "_recorded")

    def __init__(self, data, requires_grad: bool = False, is_param: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_param = is_param
        self._tape: Tape | None = None
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of one forward pass, consumed once by ``backward``.

    Use as a context manager; nesting tapes is an error because forward
    recording is single-writer by design.
    """

    def __init__(self, grad_params: bool = True):
        self.grad_params = grad_params
        self.nodes: list[tuple[Tensor, list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a tape is already active; nested recording is not supported")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None


def active_tape() -> Tape | None:
    return _ACTIVE


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor, tape: Tape) -> bool:
    if t._recorded and t._tape is tape:
        return True
    if t.requires_grad:
        return tape.grad_params or not t.is_param
    return False


def _emit(out: Tensor, pairs) -> Tensor:
    """Record `out` on the active tape if any input can receive gradient."""
    tape = _ACTIVE
    if tape is None:
        return out
    kept = [(t, fn) for t, fn in pairs if t is not None and _needs_grad(t, tape)]
    if kept:
        out._tape = tape
        out._recorded = True
        tape.nodes.append((out, kept))
    return out


def backward(tape: Tape, output: Tensor, seed=None) -> None:
    """Accumulate d(seed . output)/d(leaf) into leaf ``grad`` buffers.

    The seed defaults to ones of the output's shape (for scalars, plain 1).
    Repeated backward calls over fresh tapes accumulate; reusing one tape
    raises ``TapeError``.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward; run a new forward pass")
    tape.consumed = True
    if seed is None:
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != output.data.shape:
            raise ShapeError(
                f"seed shape {seed_arr.shape} does not match output shape {output.data.shape}"
            )
    output._accumulate(seed_arr)
    for out, pairs in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        for t, fn in pairs:
            t._accumulate(fn(g))
    # Intermediate grads die with their tensors; parameters keep theirs.


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _emit(out, [
        (a, lambda g, sa=a.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.shape: _unbroadcast(g, sb)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _emit(out, [
        (a, lambda g, sa=a.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.shape: _unbroadcast(-g, sb)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _emit(out, [
        (a, lambda g, bd=b.data, sa=a.shape: _unbroadcast(g * bd, sa)),
        (b, lambda g, ad=a.data, sb=b.shape: _unbroadcast(g * ad, sb)),
    ])


def matmul(x, w) -> Tensor:
    """x @ w for x of shape (F,) or (B, F) and w of shape (F, O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {x.data.shape} @ {w.data.shape}")
    out = Tensor(x.data @ w.data)

    def vjp_x(g, wd=w.data):
        return g @ wd.T

    def vjp_w(g, xd=x.data):
        if xd.ndim == 1:
            return np.outer(xd, g)
        return xd.T @ g

    return _emit(out, [(x, vjp_x), (w, vjp_w)])


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    return _emit(out, [(x, lambda g, xd=x.data: g * (xd > 0.0))])


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)
    return _emit(out, [(x, lambda g, yd=y: g * (1.0 - yd * yd))])


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    return _emit(out, [(x, lambda g, yd=y: g * yd * (1.0 - yd))])


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))
    return _emit(out, [(x, lambda g, xd=x.data: g / xd)])


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)
    return _emit(out, [(x, lambda g, yd=y: g * yd)])


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        pairs.append((p, vjp))
    return _emit(out, pairs)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _emit(out, [(x, lambda g, s=x.data.shape: g.reshape(s))])


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum())
    return _emit(out, [(x, lambda g, s=x.data.shape: np.broadcast_to(g, s).copy())])


def sum_last_keepdims(x) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=-1, keepdims=True))
    return _emit(out, [(x, lambda g, s=x.data.shape: np.broadcast_to(g, s).copy())])


def gather_rows(x, idx) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def vjp(g, shape=x.data.shape, idx=idx):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return buf

    return _emit(out, [(x, vjp)])


def sum_groups(x, group: int) -> Tensor:
    """Sum consecutive groups of `group` rows of a 2-D tensor.

    (B*group, K) -> (B, K). Used to reduce per-message terms into
    per-receiver totals when every receiver has the same in-degree.
    """
    x = as_tensor(x)
    rows, cols = x.data.shape
    if rows % group != 0:
        raise ShapeError(f"sum_groups: {rows} rows not divisible by group {group}")
    out = Tensor(x.data.reshape(rows // group, group, cols).sum(axis=1))
    return _emit(out, [(x, lambda g, group=group: np.repeat(g, group, axis=0))])


def softmax(x) -> Tensor:
    """Row-wise stable softmax over the last axis (1-D or 2-D input)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g, yd=y):
        dot = (g * yd).sum(axis=-1, keepdims=True)
        return yd * (g - dot)

    return _emit(out, [(x, vjp)])


def cross_entropy(p, labels, weights=None) -> Tensor:
    """Summed negative log-likelihood: -sum_i w_i * ln p[i, labels[i]].

    `p` is a probability vector (1-D with an int label) or a batch of row
    distributions (2-D with a label per row). Weights default to ones; the
    policy-gradient update passes advantages here.
    """
    p = as_tensor(p)
    if p.ndim == 1:
        rows = p.data[None, :]
        labels_arr = np.asarray([labels], dtype=np.intp)
    else:
        rows = p.data
        labels_arr = np.asarray(labels, dtype=np.intp)
        if labels_arr.shape != (rows.shape[0],):
            raise ShapeError(f"labels shape {labels_arr.shape} for batch of {rows.shape[0]}")
    k = rows.shape[1]
    if labels_arr.min(initial=0) < 0 or labels_arr.max(initial=-1) >= k:
        raise ShapeError(f"label out of range for {k} classes")
    if weights is None:
        w = np.ones(rows.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (rows.shape[0],):
            raise ShapeError(f"weights shape {w.shape} for batch of {rows.shape[0]}")
    picked = rows[np.arange(rows.shape[0]), labels_arr]
    out = Tensor(-(w * np.log(picked)).sum())

    def vjp(g, shape=p.data.shape, labels_arr=labels_arr, picked=picked, w=w):
        buf = np.zeros((np.prod(shape[:-1], dtype=int) if len(shape) > 1 else 1, shape[-1]))
        buf[np.arange(labels_arr.shape[0]), labels_arr] = -g * w / picked
        return buf.reshape(shape)

    return _emit(out, [(p, vjp)])
