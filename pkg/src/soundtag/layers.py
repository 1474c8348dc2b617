"""Parameterised layers wrapping :mod:`soundtag.functional`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import Tensor

# parameter roles, consumed by the optimizer's centralization scope
CONV_WEIGHT = "conv_weight"
DENSE_WEIGHT = "dense_weight"
RECURRENT_WEIGHT = "recurrent_weight"
BIAS = "bias"
NORM = "norm"


class Parameter(Tensor):
    __slots__ = ("role",)

    def __init__(self, data, role: str):
        super().__init__(data, requires_grad=True)
        self.role = role


class Module:
    """Minimal container: parameters, buffers and sub-modules found by attribute scan."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for name, target in list(own.items()) + list(bufs.items()):
            if name not in state:
                if strict:
                    raise KeyError(f"missing tensor '{name}'")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            current = target.data if isinstance(target, Parameter) else target
            if arr.shape != current.shape:
                raise ValueError(f"shape mismatch for '{name}': expected {current.shape}, got {arr.shape}")
        for name, p in own.items():
            if name in state:
                p.data = np.array(state[name], dtype=np.float64)
        for name, buf in bufs.items():
            if name in state:
                buf[...] = state[name]


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """3x3 same-padded convolution, stride 1."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel: int = 3):
        fan_in = in_channels * kernel * kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = Parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (out_channels, in_channels, kernel, kernel)), CONV_WEIGHT)
        self.bias = Parameter(np.zeros(out_channels), BIAS)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} channels, got {x.shape[1]}")
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, n_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(n_channels), NORM)
        self.beta = Parameter(np.zeros(n_channels), NORM)
        self.running_mean = np.zeros(n_channels)
        self.running_var = np.ones(n_channels)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class GroupNorm(Module):
    def __init__(self, n_groups: int, n_channels: int, eps: float = 1e-5):
        if n_channels % n_groups:
            raise ValueError(f"{n_channels} channels not divisible into {n_groups} groups")
        self.n_groups, self.eps = n_groups, eps
        self.gamma = Parameter(np.ones(n_channels), NORM)
        self.beta = Parameter(np.zeros(n_channels), NORM)

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.n_groups, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)), DENSE_WEIGHT)
        self.bias = Parameter(np.zeros(out_features), BIAS)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GRUDirection(Module):
    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.w_input = Parameter(_uniform(rng, bound, (in_features, 3 * hidden)), RECURRENT_WEIGHT)
        self.w_hidden = Parameter(_uniform(rng, bound, (hidden, 3 * hidden)), RECURRENT_WEIGHT)
        self.b_input = Parameter(_uniform(rng, bound, 3 * hidden), BIAS)
        self.b_hidden = Parameter(_uniform(rng, bound, 3 * hidden), BIAS)

    def weights(self) -> F.GRUWeights:
        return F.GRUWeights(self.w_input, self.w_hidden, self.b_input, self.b_hidden)


class BiGRU(Module):
    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.fwd = GRUDirection(in_features, hidden, rng)
        self.bwd = GRUDirection(in_features, hidden, rng)

    @property
    def out_features(self) -> int:
        return 2 * self.hidden

    def forward(self, x: Tensor) -> Tensor:
        return F.bigru(x, self.fwd.weights(), self.bwd.weights())


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        bound = np.sqrt(6.0 / (2 * d_model))
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", Parameter(_uniform(rng, bound, (d_model, d_model)), DENSE_WEIGHT))
            setattr(self, f"b{name}", Parameter(np.zeros(d_model), BIAS))

    @property
    def out_features(self) -> int:
        return self.d_model

    def weights(self) -> F.AttentionWeights:
        return F.AttentionWeights(self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)

    def forward(self, x: Tensor, return_weights: bool = False):
        return F.multi_head_self_attention(x, self.weights(), self.n_heads, return_weights)


class Activation(Module):
    def __init__(self, kind: str):
        if kind not in ("relu", "mish"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.kind == "relu" else T.mish(x)
