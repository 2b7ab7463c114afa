"""Parameter storage and the layer types the policy networks are built from."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .autodiff import Tensor, add, concat, matmul, mul, relu, sigmoid, sub, tanh

_ACTIVATIONS = ("linear", "relu", "tanh")


class ParamStore:
    """Named parameter tensors plus their gradient and Adam moment buffers.

    Insertion order is fixed at construction time and determines checkpoint
    layout, so identical seeds give byte-identical checkpoints.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator | None = None,
            fan_in: int | None = None) -> Tensor:
        """Create a parameter, uniform in +-1/sqrt(fan_in) (zeros without rng)."""
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if rng is None:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in else int(np.prod(shape)))
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, is_param=True)
        t.zero_grad()
        self._params[name] = t
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; shapes and names must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data[...] = arr


class Dense:
    """y = activation(x @ W + b) with activation in {linear, relu, tanh}."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 activation: str = "linear", rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.w = store.add(f"{name}.W", (n_in, n_out), rng, fan_in=n_in)
        self.b = store.add(f"{name}.b", (n_out,), rng, fan_in=n_in)

    def __call__(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.shape[-1] != self.n_in:
            raise ShapeError(f"dense input width {data.shape[-1]}, expected {self.n_in}")
        y = add(matmul(x, self.w), self.b)
        if self.activation == "relu":
            return relu(y)
        if self.activation == "tanh":
            return tanh(y)
        return y


class GRUCell:
    """Single GRU step.

    Convention: z = sigma(Wz [x;h] + bz), r = sigma(Wr [x;h] + br),
    c = tanh(Wh [x; r*h] + bh), h' = (1 - z)*h + z*c.
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator | None = None):
        self.n_in = n_in
        self.n_hidden = n_hidden
        fan = n_in + n_hidden
        self.wz = store.add(f"{name}.Wz", (fan, n_hidden), rng, fan_in=fan)
        self.bz = store.add(f"{name}.bz", (n_hidden,), rng, fan_in=fan)
        self.wr = store.add(f"{name}.Wr", (fan, n_hidden), rng, fan_in=fan)
        self.br = store.add(f"{name}.br", (n_hidden,), rng, fan_in=fan)
        self.wh = store.add(f"{name}.Wh", (fan, n_hidden), rng, fan_in=fan)
        self.bh = store.add(f"{name}.bh", (n_hidden,), rng, fan_in=fan)

    def __call__(self, x, h) -> Tensor:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        hd = h.data if isinstance(h, Tensor) else np.asarray(h)
        if xd.shape[-1] != self.n_in or hd.shape[-1] != self.n_hidden:
            raise ShapeError(
                f"gru widths: x {xd.shape[-1]} (want {self.n_in}), h {hd.shape[-1]} (want {self.n_hidden})"
            )
        xh = concat([x, h])
        z = sigmoid(add(matmul(xh, self.wz), self.bz))
        r = sigmoid(add(matmul(xh, self.wr), self.br))
        xrh = concat([x, mul(r, h)])
        c = tanh(add(matmul(xrh, self.wh), self.bh))
        return add(mul(sub(1.0, z), h), mul(z, c))
