"""Transformer decoder over object queries plus one foreground query.

With weight sharing (the default) the foreground query is simply one more row
in every decoder block: it joins the object queries' self-attention and uses
the same cross-attention, norms and FFN, but its position embedding is null.
Without sharing it runs through its own stack of blocks and never meets the
object queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import MLP, FFNBlock, LayerNorm, Linear, Module, MultiHeadAttention, PositionEmbedding, entangle, param
from .tensor import Tensor


@dataclass
class DecoderState:
    objects: Tensor
    foreground: Tensor | None
    depth: int = 0


@dataclass
class InstancePrediction:
    class_logits: Tensor  # (..., N, C+1); last column is no-object
    boxes: Tensor  # (..., N, 4) normalized (cx, cy, w, h)


class DecoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int, hidden: int, activation: str = "gelu"):
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FFNBlock(rng, d, hidden, activation)

    def forward(
        self,
        objects: Tensor | None,
        object_pos: PositionEmbedding | None,
        foreground: Tensor | None,
        foreground_pos: PositionEmbedding | None,
        tokens: Tensor,
        token_pos: PositionEmbedding,
    ) -> tuple[Tensor | None, Tensor | None]:
        parts = [(x, p) for x, p in ((objects, object_pos), (foreground, foreground_pos)) if x is not None]
        content = _cat([x for x, _ in parts])
        positioned = _cat([entangle(x, p) for x, p in parts])
        u = self.norm1(content + self.self_attn(positioned, positioned, content))

        split = [] if objects is None else [objects.shape[-2]]
        pieces = _split(u, split)
        query = _cat([entangle(x, p) for x, (_, p) in zip(pieces, parts)])
        keyed = entangle(tokens, token_pos)
        c = self.norm2(u + self.cross_attn(query, keyed, tokens))
        out = c + self.ffn(c)

        pieces = _split(out, split)
        if objects is None:
            return None, pieces[0]
        return pieces[0], (pieces[1] if foreground is not None else None)


def _cat(xs: list[Tensor]) -> Tensor:
    return xs[0] if len(xs) == 1 else T.concat(xs, axis=-2)


def _split(x: Tensor, at: list[int]) -> list[Tensor]:
    if not at or at[0] == x.shape[-2]:
        return [x]
    n = at[0]
    return [x[..., :n, :], x[..., n:, :]]


class Decoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d: int,
        heads: int,
        hidden: int,
        depth: int,
        num_queries: int,
        num_classes: int,
        activation: str = "gelu",
        fq_position_embedding: bool = False,
        fq_weight_sharing: bool = True,
    ):
        self.blocks = [DecoderBlock(rng, d, heads, hidden, activation) for _ in range(depth)]
        self.object_content = param(rng.normal(0.0, 1.0, size=(num_queries, d)))
        self.object_pos = param(rng.normal(0.0, 1.0, size=(num_queries, d)))
        # same initialization scheme as an object-query content row
        self.foreground = param(rng.normal(0.0, 1.0, size=(1, d)))
        self.fq_position_embedding = fq_position_embedding
        self.fq_weight_sharing = fq_weight_sharing
        # created regardless of the toggles so every variant shares one parameter layout
        self.foreground_pos = param(rng.normal(0.0, 1.0, size=(1, d)))
        self.fg_blocks = [DecoderBlock(rng, d, heads, hidden, activation) for _ in range(depth)]
        self.class_head = Linear(rng, d, num_classes + 1)
        self.box_head = MLP(rng, [d, d, d, 4], activation)
        self.fg_head = Linear(rng, d, num_classes)
        self.depth = depth
        self.num_queries = num_queries
        self.num_classes = num_classes

    def object_position(self) -> PositionEmbedding:
        return PositionEmbedding("learned", self.object_pos)

    def foreground_position(self) -> PositionEmbedding:
        if not self.fq_position_embedding:
            return PositionEmbedding.null()
        return PositionEmbedding("learned", self.foreground_pos)

    def initial_state(self, tokens: Tensor, with_foreground: bool = True) -> DecoderState:
        objects, fg = self.object_content, self.foreground if with_foreground else None
        if tokens.ndim == 3:
            objects = T.expand(objects, tokens.shape[0])
            fg = None if fg is None else T.expand(fg, tokens.shape[0])
        return DecoderState(objects, fg, 0)

    def forward(self, tokens: Tensor, token_pos: PositionEmbedding, with_foreground: bool = True) -> DecoderState:
        state = self.initial_state(tokens, with_foreground)
        for _ in range(self.depth):
            state = decoder_block(self, state, tokens, token_pos)
        return state

    def set_record(self, flag: bool) -> None:
        for blk in self.blocks + self.fg_blocks:
            blk.self_attn.record = flag
            blk.cross_attn.record = flag

    def cross_attention_maps(self) -> list[tuple[np.ndarray | None, np.ndarray | None]]:
        """Per block: (object rows (..., N, h*w), foreground row (..., 1, h*w) or None)."""
        maps = []
        n = self.num_queries
        for i, blk in enumerate(self.blocks):
            w = blk.cross_attn.last_weights
            if w is None:
                maps.append((None, None))
                continue
            objects = w[..., :n, :]
            if not self.fq_weight_sharing:
                fg = self.fg_blocks[i].cross_attn.last_weights
            else:
                fg = w[..., n:, :] if w.shape[-2] > n else None
            maps.append((objects, fg))
        return maps


def decoder_block(decoder: Decoder, state: DecoderState, tokens: Tensor, token_pos: PositionEmbedding) -> DecoderState:
    """Advance objects and foreground query by one decoder block."""
    if state.depth >= decoder.depth:
        raise ContractError(f"decoder depth exhausted: state at block {state.depth} of {decoder.depth}")
    blk = decoder.blocks[state.depth]
    opos, fpos = decoder.object_position(), decoder.foreground_position()
    if decoder.fq_weight_sharing or state.foreground is None:
        objects, fg = blk(state.objects, opos, state.foreground, fpos, tokens, token_pos)
    else:
        objects, _ = blk(state.objects, opos, None, None, tokens, token_pos)
        _, fg = decoder.fg_blocks[state.depth](None, None, state.foreground, fpos, tokens, token_pos)
    return DecoderState(objects, fg, state.depth + 1)


def instance_predict(objects: Tensor, decoder: Decoder) -> InstancePrediction:
    return InstancePrediction(decoder.class_head(objects), T.sigmoid(decoder.box_head(objects)))


def foreground_presence_logits(foreground: Tensor, decoder: Decoder) -> Tensor:
    """Image-level logits from the final foreground state, shape (..., C)."""
    return decoder.fg_head(foreground)[..., 0, :]


def foreground_presence(foreground: Tensor, decoder: Decoder) -> np.ndarray:
    return T.sigmoid(foreground_presence_logits(foreground, decoder)).data
