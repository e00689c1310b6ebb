"""Transformer encoder with per-class queries.

Feature tokens update through self-attention. Class queries update through
cross-attention onto the tokens in parallel; the token update never reads the
class queries, so the token stream is the same with or without them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import FFNBlock, LayerNorm, Linear, Module, MultiHeadAttention, PositionEmbedding, entangle, param
from .tensor import Tensor


@dataclass
class EncoderState:
    tokens: Tensor
    class_queries: Tensor | None
    depth: int = 0


class EncoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int, hidden: int, activation: str = "gelu"):
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.norm_t = LayerNorm(d)
        self.ffn_t = FFNBlock(rng, d, hidden, activation)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.norm_q = LayerNorm(d)
        self.ffn_q = FFNBlock(rng, d, hidden, activation)

    def forward_tokens(self, tokens: Tensor, position: PositionEmbedding) -> Tensor:
        keyed = entangle(tokens, position)
        t = self.norm_t(tokens + self.self_attn(keyed, keyed, tokens))
        return t + self.ffn_t(t)

    def forward_queries(self, queries: Tensor, tokens: Tensor, position: PositionEmbedding) -> Tensor:
        # no position on the query side; keys carry the token positions
        keyed = entangle(tokens, position)
        q = self.norm_q(queries + self.cross_attn(queries, keyed, tokens))
        return q + self.ffn_q(q)

    def forward(self, tokens, position, queries=None):
        new_q = None if queries is None else self.forward_queries(queries, tokens, position)
        return self.forward_tokens(tokens, position), new_q


class PresenceHead(Module):
    """Diagonal class-presence classifier: logit_i = q_i . w_i."""

    def __init__(self, rng: np.random.Generator, num_classes: int, d: int):
        self.weight = param(rng.normal(0.0, 1.0 / np.sqrt(d), size=(num_classes, d)))

    def forward(self, class_queries: Tensor) -> Tensor:
        if class_queries.shape[-2:] != self.weight.shape:
            raise ShapeError(f"class queries {class_queries.shape} vs presence weights {self.weight.shape}")
        return (class_queries * self.weight).sum(axis=-1)


class AvgPoolPresence(Module):
    """Ablation alternative: mean over tokens -> full linear layer -> logits."""

    def __init__(self, rng: np.random.Generator, d: int, num_classes: int):
        self.linear = Linear(rng, d, num_classes)

    def forward(self, tokens: Tensor) -> Tensor:
        return self.linear(tokens.mean(axis=-2))


class Encoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d: int,
        heads: int,
        hidden: int,
        depth: int,
        num_classes: int,
        activation: str = "gelu",
    ):
        self.blocks = [EncoderBlock(rng, d, heads, hidden, activation) for _ in range(depth)]
        self.class_queries = param(rng.normal(0.0, 1.0, size=(num_classes, d)))
        self.presence = PresenceHead(rng, num_classes, d)
        self.avgpool = AvgPoolPresence(rng, d, num_classes)
        self.depth = depth
        self.num_classes = num_classes

    def initial_state(self, tokens: Tensor, with_class_queries: bool = True) -> EncoderState:
        queries = None
        if with_class_queries:
            queries = self.class_queries
            if tokens.ndim == 3:
                queries = T.expand(queries, tokens.shape[0])
        return EncoderState(tokens, queries, 0)

    def forward(self, tokens: Tensor, position: PositionEmbedding, with_class_queries: bool = True) -> EncoderState:
        state = self.initial_state(tokens, with_class_queries)
        for _ in range(self.depth):
            state = encoder_block(self, state, position)
        return state

    def set_record(self, flag: bool) -> None:
        for blk in self.blocks:
            blk.self_attn.record = flag
            blk.cross_attn.record = flag

    def class_query_maps(self) -> list[np.ndarray | None]:
        """Recorded class-query cross-attention weights per block, (..., C, h*w)."""
        return [blk.cross_attn.last_weights for blk in self.blocks]


def encoder_block(encoder: Encoder, state: EncoderState, position: PositionEmbedding) -> EncoderState:
    """Advance the encoder state by one block."""
    if state.depth >= encoder.depth:
        raise ContractError(f"encoder depth exhausted: state at block {state.depth} of {encoder.depth}")
    tokens, queries = encoder.blocks[state.depth](state.tokens, position, state.class_queries)
    return EncoderState(tokens, queries, state.depth + 1)


def class_presence_logits(class_queries: Tensor, head: PresenceHead) -> Tensor:
    return head(class_queries)


def class_presence(class_queries: Tensor, head: PresenceHead) -> np.ndarray:
    """Per-class presence probabilities sigmoid(q_i . w_i)."""
    return T.sigmoid(head(class_queries)).data


def presence_loss(logits: Tensor, labels) -> Tensor:
    """Standard multi-label BCE averaged over classes, evaluated on logits."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ContractError(f"labels {labels.shape} do not match presence logits {logits.shape}")
    return T.bce_with_logits(logits, labels)


loss_cq = presence_loss


def avgpool_presence(tokens: Tensor, head: AvgPoolPresence) -> np.ndarray:
    return T.sigmoid(head(tokens)).data
