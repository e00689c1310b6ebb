"""Attention, feed-forward, normalization and embedding building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise ShapeError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(xavier(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            return self.forward(x.reshape(1, -1)).reshape(-1)
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads of width d/heads.

    Inputs are ``(q, d)`` / ``(k, d)`` or carry one leading batch axis. The
    last call's head-averaged attention weights are kept in ``last_weights``
    when ``record`` is set.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        if heads <= 0 or d % heads:
            raise ConfigError(f"model dim {d} is not divisible by head count {heads}")
        self.d = d
        self.heads = heads
        self.q_proj = Linear(rng, d, d)
        self.k_proj = Linear(rng, d, d)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.record = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        x = x.reshape(tuple(lead) + (n, self.heads, self.d // self.heads))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return x.transpose(axes)

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return x.transpose(axes).reshape(tuple(lead) + (n, h * dh))

    def attention_weights(self, query: Tensor, key: Tensor) -> Tensor:
        """Per-head attention weights, shape (..., heads, q, k)."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        scores = (q @ k.swap_last()) * (1.0 / math.sqrt(self.d // self.heads))
        return T.softmax(scores, axis=-1)

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        for name, x in (("query", query), ("key", key), ("value", value)):
            if x.shape[-1] != self.d:
                raise ShapeError(f"attention {name} has feature dim {x.shape[-1]}, expected {self.d}")
        if key.shape != value.shape:
            raise ShapeError(f"attention key {key.shape} and value {value.shape} must match")
        if query.shape[:-2] != key.shape[:-2]:
            raise ShapeError(f"attention batch dims differ: query {query.shape}, key {key.shape}")
        weights = self.attention_weights(query, key)
        if self.record:
            self.last_weights = weights.data.mean(axis=-3)
        v = self._split(self.v_proj(value))
        return self.out_proj(self._merge(weights @ v))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int, activation: str = "gelu"):
        if activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.ACTIVATIONS[self.activation](self.fc1(x)))


class FFNBlock(Module):
    """layernorm -> linear -> activation -> linear; the caller adds the residual."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int, activation: str = "gelu", eps: float = 1e-5):
        self.norm = LayerNorm(d, eps)
        self.ffn = FeedForward(rng, d, hidden, activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.ffn(self.norm(x))


def ffn_block(block: FFNBlock, x: Tensor) -> Tensor:
    return block(x)


class MLP(Module):
    """Stack of linear layers with the activation between them."""

    def __init__(self, rng: np.random.Generator, dims: list[int], activation: str = "gelu"):
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        act = T.ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


# ----------------------------------------------------------------------
# position embeddings

POSITION_KINDS = ("sinusoidal-2d", "learned", "null")


class PositionEmbedding:
    """Position values to be entangled with content; the null kind is exactly zero."""

    def __init__(self, kind: str, values: Tensor | None = None):
        if kind not in POSITION_KINDS:
            raise ConfigError(f"unknown position embedding kind {kind!r}")
        if kind == "null" and values is not None:
            raise ConfigError("null position embedding carries no values")
        if kind != "null" and values is None:
            raise ConfigError(f"{kind} position embedding needs values")
        self.kind = kind
        self.values = values

    @classmethod
    def null(cls) -> "PositionEmbedding":
        return cls("null")

    @classmethod
    def sinusoidal(cls, height: int, width: int, d: int) -> "PositionEmbedding":
        return cls("sinusoidal-2d", Tensor(position_embedding_2d(height, width, d)))

    def __repr__(self) -> str:
        shape = None if self.values is None else self.values.shape
        return f"PositionEmbedding(kind={self.kind!r}, shape={shape})"


def position_embedding_2d(height: int, width: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sine/cosine grid embedding, rows in row-major (y, x) token order.

    Channel layout: [sin(y f), cos(y f), sin(x f), cos(x f)], each block d/4 wide
    with frequencies f_i = temperature^(-i / (d/4)).
    """
    if d % 4:
        raise ConfigError(f"2-d sinusoidal embedding needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ay = ys.reshape(-1, 1) * freqs
    ax = xs.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=1)


def entangle(content: Tensor, position: PositionEmbedding | None) -> Tensor:
    """Combine content and position by addition; a null position is the identity."""
    if position is None or position.kind == "null":
        return content
    values = position.values
    if content.shape[-values.ndim:] != values.shape:
        raise ShapeError(f"entangle: content {content.shape} vs position {values.shape}")
    return content + values
