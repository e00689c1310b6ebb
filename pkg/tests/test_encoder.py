import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdetr import tensor as T
from aggdetr.encoder import (
    AvgPoolPresence,
    Encoder,
    EncoderState,
    PresenceHead,
    avgpool_presence,
    class_presence,
    encoder_block,
    presence_loss,
)
from aggdetr.errors import ContractError
from aggdetr.nn import PositionEmbedding
from aggdetr.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def make(seed=0, d=8, C=3, depth=2, n=6):
    rng = np.random.default_rng(seed)
    enc = Encoder(rng, d, 2, 16, depth, C)
    tokens = Tensor(rng.normal(size=(n, d)))
    pos = PositionEmbedding("learned", Tensor(rng.normal(size=(n, d))))
    return enc, tokens, pos, rng


class TestNonInterference:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from(["float32", "float64"]))
    def test_tokens_identical_with_and_without_queries(self, seed, precision):
        with T.precision(precision):
            enc, tokens, pos, _ = make(seed)
            tokens = Tensor(tokens.data)
            with_q = enc(tokens, pos, with_class_queries=True).tokens.data
            without = enc(tokens, pos, with_class_queries=False).tokens.data
        assert np.array_equal(with_q, without)

    def test_zeroed_queries_leave_tokens_unchanged(self):
        enc, tokens, pos, _ = make(1)
        enc.class_queries.data[...] = 0
        plain = tokens
        for blk in enc.blocks:
            plain = blk.forward_tokens(plain, pos)
        assert np.array_equal(enc(tokens, pos).tokens.data, plain.data)

    def test_queries_move_and_tokens_do_not_depend_on_them(self):
        enc, tokens, pos, _ = make(2)
        a = enc(tokens, pos)
        enc.class_queries.data[...] += 1.0
        b = enc(tokens, pos)
        assert np.array_equal(a.tokens.data, b.tokens.data)
        assert not np.allclose(a.class_queries.data, b.class_queries.data)

    def test_depth_exhausted(self):
        enc, tokens, pos, _ = make(depth=1)
        state = encoder_block(enc, enc.initial_state(tokens), pos)
        with pytest.raises(ContractError):
            encoder_block(enc, state, pos)


def test_single_token_query_update_closed_form():
    enc, _, _, rng = make(3, d=8, depth=1, n=1)
    tok = Tensor(rng.normal(size=(1, 8)))
    pos = PositionEmbedding("learned", Tensor(rng.normal(size=(1, 8))))
    blk = enc.blocks[0]
    q0 = enc.class_queries
    projected = blk.cross_attn.out_proj(blk.cross_attn.v_proj(tok)).data  # one key: weight 1
    pre = blk.norm_q(Tensor(q0.data + projected))
    expected = (pre + blk.ffn_q(pre)).data
    out = encoder_block(enc, enc.initial_state(tok), pos).class_queries.data
    assert np.allclose(out, expected, atol=1e-12)


def test_grad_check_one_block():
    enc, tokens, pos, rng = make(4, d=8, C=3, depth=1, n=6)
    tokens = Tensor(tokens.data, requires_grad=True)
    wt, wq = rng.normal(size=(6, 8)) / 5, rng.normal(size=(3, 8)) / 5

    def f():
        s = encoder_block(enc, enc.initial_state(tokens), pos)
        return (s.tokens * wt).sum() + (s.class_queries * wq).sum()

    rep = T.grad_check(f, [tokens] + enc.parameters(), max_entries=20)
    assert rep.max_rel_error < 1e-4


class TestClassPresence:
    def head(self, w):
        h = PresenceHead(np.random.default_rng(0), *np.shape(w))
        h.weight.data[...] = w
        return h

    def test_zero_dots_half(self):
        h = self.head(np.zeros((4, 3)))
        assert np.allclose(class_presence(Tensor(np.ones((4, 3))), h), 0.5)

    def test_hand_values(self):
        h = self.head([[1.0, 0.0], [0.0, 1.0]])
        p = class_presence(Tensor([[2.0, 5.0], [7.0, -1.0]]), h)
        assert np.allclose(p, [0.8808, 0.2689], atol=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(2, 6))
    def test_perturbing_one_query_changes_only_its_probability(self, seed, C):
        rng = np.random.default_rng(seed)
        h = PresenceHead(rng, C, 4)
        q = rng.normal(size=(C, 4))
        j = int(rng.integers(C))
        q2 = q.copy()
        q2[j] += rng.normal(size=4)
        p, p2 = class_presence(Tensor(q), h), class_presence(Tensor(q2), h)
        mask = np.arange(C) != j
        assert np.array_equal(p[mask], p2[mask])

    def test_jacobian_is_diagonal(self):
        rng = np.random.default_rng(5)
        h = PresenceHead(rng, 3, 4)
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        for i in range(3):
            q.grad = None
            T.sigmoid(h(q))[i].backward()
            others = np.delete(q.grad, i, axis=0)
            assert np.all(others == 0) and np.any(q.grad[i] != 0)


class TestPresenceLoss:
    def test_hand_value(self):
        p = np.array([0.9, 0.2])
        loss = presence_loss(Tensor(np.log(p / (1 - p))), [1, 0]).item()
        assert loss == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), rel=1e-12)
        assert loss == pytest.approx(0.1643, abs=1e-4)

    def test_uncertain_is_ln2(self):
        for y in ([0, 0, 0], [1, 0, 1], [1, 1, 1]):
            assert presence_loss(Tensor(np.zeros(3)), y).item() == pytest.approx(math.log(2))

    def test_saturated_is_zero(self):
        assert presence_loss(Tensor([80.0, -80.0]), [1, 0]).item() == pytest.approx(0, abs=1e-30)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=1, max_size=6))
    def test_matches_probability_space_formula(self, pairs):
        p = np.array([a for a, _ in pairs])
        y = np.array([b for _, b in pairs], dtype=float)
        naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert presence_loss(Tensor(np.log(p / (1 - p))), y).item() == pytest.approx(naive, abs=1e-6)

    def test_dropping_a_label_term_zeroes_that_query_gradient(self):
        rng = np.random.default_rng(6)
        h = PresenceHead(rng, 3, 4)
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        logits = h(q)
        presence_loss(logits[np.array([0, 2])], [1, 0]).backward()
        assert np.all(q.grad[1] == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            presence_loss(Tensor(np.zeros(3)), [1, 0])


class TestAvgPool:
    def test_constant_tokens(self):
        h = AvgPoolPresence(np.random.default_rng(0), 4, 2)
        row = np.array([0.3, -1.0, 2.0, 0.5])
        a = avgpool_presence(Tensor(np.tile(row, (5, 1))), h)
        b = avgpool_presence(Tensor(row[None]), h)
        assert np.allclose(a, b, atol=1e-15)

    def test_identity_rows_pool_to_quarter(self):
        assert np.array_equal(Tensor(np.eye(4)).mean(axis=-2).data, [0.25] * 4)
