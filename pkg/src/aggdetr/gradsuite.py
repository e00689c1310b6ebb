"""Finite-difference gradient suite over every differentiable operation and block.

Each case builds a fresh random instance in 64-bit precision and returns a
scalar-valued closure plus the tensors to perturb. The scalar is a random
projection of the op's output so every output entry contributes. Inputs to
kinked ops (abs, max, min, relu) are kept away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Backbone, DomainClassifier, FeatureMap, ImageClassifier, loss_bc, loss_dc
from .decoder import Decoder, DecoderState, decoder_block, foreground_presence_logits, instance_predict
from .encoder import AvgPoolPresence, Encoder, EncoderState, PresenceHead, encoder_block, presence_loss
from .matching import DetectionLossWeights, detection_loss, giou_matched, hungarian, match_cost
from .nn import MLP, FFNBlock, LayerNorm, Linear, Module, MultiHeadAttention, PositionEmbedding
from .tensor import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _w(rng, shape) -> np.ndarray:
    # unit-scale projection keeps the scalar O(1), so difference noise stays far below the floor
    return rng.normal(size=shape) / np.sqrt(np.prod(shape))


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = _w(rng, out.shape)
    return lambda y: (y * w).sum()


def _unary(op) -> Case:
    def build(rng):
        x = _leaf(_away_from_zero(rng, (3, 4)))
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _binary(op, positive_b=False, separated=False) -> Case:
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        if positive_b:
            b = np.abs(b) + 0.5
        if separated:
            gap = a - b
            a = np.where(np.abs(gap) < 0.1, a + 0.2 * np.sign(gap + 1e-12), a)
        ta, tb = _leaf(a), _leaf(b)
        proj = _project(op(ta, tb), rng)
        return (lambda: proj(op(ta, tb))), [ta, tb]
    return build


def _power(rng):
    x = _leaf(np.abs(rng.normal(size=(3, 4))) + 0.3)
    e = float(rng.uniform(-2, 3))
    proj = _project(T.power(x, e), rng)
    return (lambda: proj(T.power(x, e))), [x]


def _log(rng):
    x = _leaf(np.abs(rng.normal(size=(3, 4))) + 0.3)
    proj = _project(T.log(x), rng)
    return (lambda: proj(T.log(x))), [x]


def _matmul(rng):
    a, b = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(4, 5)))
    c = _leaf(rng.normal(size=(2, 5, 3)))
    proj = _project(T.matmul(T.matmul(a, b), c), rng)
    return (lambda: proj(T.matmul(T.matmul(a, b), c))), [a, b, c]


def _reductions(rng):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 4))
    f = lambda: (T.tsum(x, axis=1) * w).sum() + (T.mean(x, axis=-1) * T.mean(x, axis=-1)).sum() + T.mean(x) ** 2
    return f, [x]


def _shapes(rng):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    y = _leaf(rng.normal(size=(2, 1, 4)))
    w = rng.normal(size=(4, 12))
    f = lambda: (T.reshape(T.transpose(T.concat([x, y], axis=1), (0, 2, 1)), (2, 16)) * w[:2, :16 // 2].repeat(2, 1)).sum()
    return f, [x, y]


def _indexing(rng):
    x = _leaf(rng.normal(size=(3, 5, 4)))
    rows = rng.integers(0, 3, size=6)
    cols = rng.integers(0, 5, size=6)
    w = rng.normal(size=(6, 4))
    v = rng.normal(size=(2, 4))
    f = lambda: (x[rows, cols] * w).sum() + (x[1, 1:3] * v).sum()
    return f, [x]


def _stack_expand(rng):
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=(2, 2, 3, 4))
    f = lambda: (T.expand(T.stack([a, b], axis=0), 2) * w).sum()
    return f, [a, b]


def _softmax(rng):
    x = _leaf(rng.normal(size=(2, 3, 5)) * 2)
    proj = _project(x, rng)
    return (lambda: proj(T.softmax(x, axis=-1)) + proj(T.log_softmax(x, axis=-1)) * 0.5), [x]


def _layer_norm(rng):
    x = _leaf(rng.normal(size=(2, 3, 6)))
    g, b = _leaf(rng.normal(size=6)), _leaf(rng.normal(size=6))
    proj = _project(x, rng)
    return (lambda: proj(T.layer_norm(x, g, b))), [x, g, b]


def _conv2d(rng):
    x = _leaf(rng.normal(size=(2, 3, 8, 8)))
    w = _leaf(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    b = _leaf(rng.normal(size=4))
    proj = _project(T.conv2d(x, w, b, stride=2, padding=1), rng)
    return (lambda: proj(T.conv2d(x, w, b, stride=2, padding=1))), [x, w, b]


def _grad_reverse(rng):
    x = _leaf(rng.normal(size=(3, 4)))
    s = float(rng.uniform(0, 2))
    w = _w(rng, (3, 4))
    # reversal makes the analytic gradient -s times the true derivative; undo it for comparison
    f = lambda: (T.grad_reverse(x, s) * w).sum()
    return f, [x], s


def _bce(rng):
    x = _leaf(rng.normal(size=(4, 5)) * 2)
    y = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
    return (lambda: T.bce_with_logits(x, y)), [x]


def _params(m: Module) -> list[Tensor]:
    return [p for _, p in m.named_parameters()]


def _linear_mlp(rng):
    lin = Linear(rng, 4, 5)
    mlp = MLP(rng, [5, 6, 3])
    x = _leaf(rng.normal(size=(2, 4)))
    proj = _project(mlp(lin(x)), rng)
    return (lambda: proj(mlp(lin(x)))), [x] + _params(lin) + _params(mlp)


def _attention(rng):
    mha = MultiHeadAttention(rng, 8, 2)
    q, k, v = (_leaf(rng.normal(size=(2, n, 8))) for n in (3, 5, 5))
    proj = _project(mha(q, k, v), rng)
    return (lambda: proj(mha(q, k, v))), [q, k, v] + _params(mha)


def _ffn(rng):
    blk, ln = FFNBlock(rng, 8, 16), LayerNorm(8)
    x = _leaf(rng.normal(size=(3, 8)))
    proj = _project(x, rng)
    return (lambda: proj(ln(x + blk(x)))), [x] + _params(blk) + _params(ln)


def _backbone(rng):
    bb = Backbone(rng, d=8, stages=2)
    img = _leaf(rng.uniform(size=(2, 3, 8, 8)))
    proj = _project(bb(img).tokens, rng)
    return (lambda: proj(bb(img).tokens)), [img] + _params(bb)


def _image_heads(rng):
    bc, dc = ImageClassifier(rng, 8, 3), DomainClassifier(rng, 8, 8)
    tokens = _leaf(rng.normal(size=(4, 5, 8)))
    frozen = Tensor(rng.normal(size=(4, 5, 8)))
    tags = (rng.uniform(size=(4, 3)) > 0.5).astype(float)
    dom = np.array([0, 0, 1, 1])
    # the domain head reads constant tokens: its reversed token gradient is covered by the grad_reverse case
    f = lambda: (loss_bc(FeatureMap(tokens, (1, 5), PositionEmbedding.null()), tags, bc)
                 + loss_dc(FeatureMap(frozen, (1, 5), PositionEmbedding.null()), dom, 0.5, dc))
    return f, [tokens] + _params(bc) + _params(dc)


def _presence(rng):
    head, pool = PresenceHead(rng, 3, 8), AvgPoolPresence(rng, 8, 3)
    q = _leaf(rng.normal(size=(2, 3, 8)))
    t = _leaf(rng.normal(size=(2, 6, 8)))
    tags = (rng.uniform(size=(2, 3)) > 0.5).astype(float)
    f = lambda: presence_loss(head(q), tags) + presence_loss(pool(t), tags)
    return f, [q, t] + _params(head) + _params(pool)


def _encoder_block(rng):
    enc = Encoder(rng, 8, 2, 16, 1, 3)
    tokens = _leaf(rng.normal(size=(2, 6, 8)))
    pos = PositionEmbedding.sinusoidal(2, 3, 8)
    w1, w2 = _w(rng, (2, 6, 8)), _w(rng, (2, 3, 8))

    def f():
        st = encoder_block(enc, enc.initial_state(tokens, True), pos)
        return (st.tokens * w1).sum() + (st.class_queries * w2).sum()

    return f, [tokens] + _params(enc.blocks[0]) + [enc.class_queries]


def _decoder_block(rng, sharing=True, fq_pe=False):
    dec = Decoder(rng, 8, 2, 16, 1, 4, 3, fq_position_embedding=fq_pe, fq_weight_sharing=sharing)
    tokens = _leaf(rng.normal(size=(2, 6, 8)))
    pos = PositionEmbedding.sinusoidal(2, 3, 8)
    w1, w2 = _w(rng, (2, 4, 8)), _w(rng, (2, 1, 8))

    def f():
        st = decoder_block(dec, dec.initial_state(tokens, True), tokens, pos)
        return (st.objects * w1).sum() + (st.foreground * w2).sum()

    blocks = dec.blocks if sharing else dec.blocks + dec.fg_blocks
    params = [tokens, dec.object_content, dec.object_pos, dec.foreground] + [p for b in blocks for p in _params(b)]
    if fq_pe:
        params.append(dec.foreground_pos)
    return f, params


def _decoder_heads(rng):
    dec = Decoder(rng, 8, 2, 16, 1, 4, 3)
    objects = _leaf(rng.normal(size=(2, 4, 8)))
    fg = _leaf(rng.normal(size=(2, 1, 8)))
    tags = (rng.uniform(size=(2, 3)) > 0.5).astype(float)
    w1, w2 = _w(rng, (2, 4, 4)), _w(rng, (2, 4, 4))

    def f():
        p = instance_predict(objects, dec)
        return (p.class_logits * w1).sum() + (p.boxes * w2).sum() + presence_loss(foreground_presence_logits(fg, dec), tags)

    return f, [objects, fg] + _params(dec.class_head) + _params(dec.box_head) + _params(dec.fg_head)


def _random_boxes(rng, n):
    c = rng.uniform(0.3, 0.7, size=(n, 2))
    wh = rng.uniform(0.1, 0.4, size=(n, 2))
    return np.concatenate([c, wh], axis=1)


def _giou(rng):
    pred = _leaf(_random_boxes(rng, 4))
    tgt = _random_boxes(rng, 4)
    tx = np.concatenate([tgt[:, :2] - tgt[:, 2:] / 2, tgt[:, :2] + tgt[:, 2:] / 2], axis=1)
    w = rng.normal(size=4)
    return (lambda: (giou_matched(pred, tx) * w).sum()), [pred]


def _detection_loss(rng):
    from .decoder import InstancePrediction

    logits = _leaf(rng.normal(size=(2, 5, 4)))
    box_logits = _leaf(rng.normal(size=(2, 5, 4)) * 0.5)
    targets = [(rng.integers(0, 3, size=2), _random_boxes(rng, 2)), (rng.integers(0, 3, size=1), _random_boxes(rng, 1))]
    pred = InstancePrediction(logits, T.sigmoid(box_logits))
    probs = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    assignments = [hungarian(match_cost(probs[b], pred.boxes.data[b], *targets[b])) for b in range(2)]

    def f():
        p = InstancePrediction(logits, T.sigmoid(box_logits))
        return detection_loss(p, targets, assignments, DetectionLossWeights())[0]

    return f, [logits, box_logits]


CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "maximum": _binary(T.maximum, separated=True),
    "minimum": _binary(T.minimum, separated=True),
    "power": _power,
    "abs": _unary(T.tabs),
    "exp": _unary(T.exp),
    "log": _log,
    "sigmoid": _unary(T.sigmoid),
    "softplus": _unary(T.softplus),
    "gelu": _unary(T.gelu),
    "relu": _unary(T.relu),
    "matmul": _matmul,
    "sum_mean": _reductions,
    "reshape_transpose_concat": _shapes,
    "getitem": _indexing,
    "stack_expand": _stack_expand,
    "softmax_log_softmax": _softmax,
    "layer_norm": _layer_norm,
    "conv2d": _conv2d,
    "grad_reverse": _grad_reverse,
    "bce_with_logits": _bce,
    "linear_mlp": _linear_mlp,
    "multi_head_attention": _attention,
    "ffn_block": _ffn,
    "backbone": _backbone,
    "image_heads": _image_heads,
    "presence_heads": _presence,
    "encoder_block": _encoder_block,
    "decoder_block_shared": _decoder_block,
    "decoder_block_separate": lambda rng: _decoder_block(rng, sharing=False),
    "decoder_block_fq_position": lambda rng: _decoder_block(rng, fq_pe=True),
    "decoder_heads": _decoder_heads,
    "giou": _giou,
    "detection_loss": _detection_loss,
}


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    failures: int
    checked: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.failures == 0


def check_case(name: str, instances: int = 20, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4,
               max_entries: int | None = 24) -> CaseResult:
    """Run ``instances`` random instances of one case at 64-bit precision."""
    build = CASES[name]
    worst, fails, checked = 0.0, 0, 0
    t0 = time.perf_counter()
    with T.precision("float64"):
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            built = build(rng)
            f, params = built[0], built[1]
            if name == "grad_reverse":
                rep = _check_reversal(f, params[0], built[2], step, tolerance)
            else:
                rep = T.grad_check(f, params, step=step, tolerance=tolerance, max_entries=max_entries, rng=rng)
            worst = max(worst, rep.max_rel_error)
            fails += len(rep.failures)
            checked += rep.checked
    return CaseResult(name, instances, worst, fails, checked, time.perf_counter() - t0)


def _check_reversal(f, x: Tensor, strength: float, step: float, tolerance: float) -> T.GradCheckReport:
    """The reversed gradient must equal -strength times the finite-difference derivative."""
    x.zero_grad()
    f().backward()
    analytic = x.grad.copy()
    x.zero_grad()
    flat = x.data.reshape(-1)
    worst, failures = 0.0, []
    for e in range(flat.size):
        orig = flat[e]
        flat[e] = orig + step
        up = float(f().data)
        flat[e] = orig - step
        down = float(f().data)
        flat[e] = orig
        numeric = -strength * (up - down) / (2 * step)
        a = float(analytic.reshape(-1)[e])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
        worst = max(worst, err)
        if err > tolerance:
            failures.append((0, e, a, numeric, err))
    return T.GradCheckReport(worst, failures, flat.size, tolerance)


def run_suite(instances: int = 20, seed: int = 0, names=None, **kw) -> list[CaseResult]:
    return [check_case(n, instances, seed, **kw) for n in (names or CASES)]
