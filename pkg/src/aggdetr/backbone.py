"""Small strided conv feature extractor and the two backbone alignment losses."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import MLP, Linear, Module, PositionEmbedding, param
from .tensor import Tensor


class DomainLabel(enum.IntEnum):
    SOURCE = 0
    TARGET = 1

    @classmethod
    def parse(cls, value) -> "DomainLabel":
        if isinstance(value, DomainLabel):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("source", "s"):
                return cls.SOURCE
            if key in ("target", "t"):
                return cls.TARGET
            raise ContractError(f"unknown domain {value!r}")
        return cls(int(value))


@dataclass
class FeatureMap:
    """Flattened backbone output: tokens (..., h*w, d) plus their grid and positions."""

    tokens: Tensor
    grid: tuple[int, int]
    position: PositionEmbedding

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[-2] != h * w:
            raise ShapeError(f"feature map has {self.tokens.shape[-2]} tokens for a {h}x{w} grid")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def pooled(self) -> Tensor:
        return self.tokens.mean(axis=-2)


class Backbone(Module):
    """``stages`` 3x3 stride-2 convolutions, activation between stages."""

    def __init__(
        self,
        rng: np.random.Generator,
        d: int = 64,
        stages: int = 3,
        in_channels: int = 3,
        widths: tuple[int, ...] | None = None,
        activation: str = "gelu",
    ):
        if stages < 1:
            raise ConfigError("backbone needs at least one stage")
        widths = tuple(widths) if widths else tuple(max(8, d >> (stages - 1 - i)) for i in range(stages - 1))
        chans = (in_channels,) + widths[: stages - 1] + (d,)
        if len(chans) != stages + 1:
            raise ConfigError(f"backbone widths {widths} do not fit {stages} stages")
        self.weights = []
        self.biases = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            fan_in = cin * 9
            self.weights.append(param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))))
            self.biases.append(param(np.zeros(cout)))
        self.d = d
        self.stride = 2**stages
        self.activation = activation
        self._pos_cache: dict[tuple[int, int], PositionEmbedding] = {}

    def position(self, h: int, w: int) -> PositionEmbedding:
        key = (h, w)
        pe = self._pos_cache.get(key)
        if pe is None or pe.values.dtype != T.get_default_dtype():
            pe = self._pos_cache[key] = PositionEmbedding.sinusoidal(h, w, self.d)
        return pe

    def forward(self, images) -> FeatureMap:
        x = T.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4:
            raise ShapeError(f"backbone expects (C,H,W) or (B,C,H,W) images, got {x.shape}")
        H, W = x.shape[-2:]
        if H % self.stride or W % self.stride:
            raise ConfigError(f"image extents {H}x{W} are not divisible by the backbone stride {self.stride}")
        act = T.ACTIVATIONS[self.activation]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.conv2d(x, w, b, stride=2, padding=1)
            if i < n - 1:
                x = act(x)
        B, d, h, w_ = x.shape
        tokens = x.reshape(B, d, h * w_).transpose(0, 2, 1)
        if single:
            tokens = tokens.reshape(h * w_, d)
        return FeatureMap(tokens, (h, w_), self.position(h, w_))


def extract_features(backbone: Backbone, image) -> FeatureMap:
    return backbone(image)


class ImageClassifier(Module):
    """Mean-pooled tokens -> linear -> per-class logits (the L_bc head)."""

    def __init__(self, rng: np.random.Generator, d: int, num_classes: int):
        self.linear = Linear(rng, d, num_classes)
        self.num_classes = num_classes

    def forward(self, fm: FeatureMap) -> Tensor:
        return self.linear(fm.pooled())


class DomainClassifier(Module):
    """Two-layer MLP on mean-pooled tokens predicting the target-domain logit."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int = 64, activation: str = "gelu"):
        self.mlp = MLP(rng, [d, hidden, 1], activation)

    def forward(self, fm: FeatureMap, reversal_strength: float) -> Tensor:
        pooled = T.grad_reverse(fm.pooled(), reversal_strength)
        return self.mlp(pooled)[..., 0]


def loss_bc(fm: FeatureMap, labels, head: ImageClassifier) -> Tensor:
    """Image-level multi-label BCE, averaged over classes (and images)."""
    labels = np.asarray(labels)
    if labels.shape[-1] != head.num_classes:
        raise ContractError(f"label vector length {labels.shape[-1]} != class count {head.num_classes}")
    return T.bce_with_logits(head(fm), labels)


def loss_dc(fm: FeatureMap, domain, reversal_strength: float, head: DomainClassifier) -> Tensor:
    """Adversarial domain BCE; gradients reaching the backbone are reversed and scaled."""
    if reversal_strength < 0:
        raise ContractError(f"reversal strength must be >= 0, got {reversal_strength}")
    logits = head(fm, reversal_strength)
    if np.ndim(domain) == 0:
        targets = np.full(logits.shape, float(DomainLabel.parse(domain)))
    else:
        targets = np.array([float(DomainLabel.parse(x)) for x in domain]).reshape(logits.shape)
    return T.bce_with_logits(logits, targets)
