import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdetr import tensor as T
from aggdetr.errors import ConfigError, ShapeError
from aggdetr.nn import FFNBlock, LayerNorm, Linear, MultiHeadAttention, PositionEmbedding, entangle, position_embedding_2d
from aggdetr.tensor import Tensor
from oracles import attention_naive


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def mha_reference(mha, q, k, v):
    p = [mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj]
    args = [x for lin in p for x in (lin.weight.data, lin.bias.data)]
    return attention_naive(q, k, v, *args, heads=mha.heads)


class TestMultiHeadAttention:
    def test_single_key_forces_unit_weight(self):
        rng = np.random.default_rng(0)
        mha = MultiHeadAttention(rng, 8, 2)
        value = rng.normal(size=(1, 8))
        out = mha(Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(1, 8))), Tensor(value)).data
        expected = mha.out_proj(mha.v_proj(Tensor(value))).data
        assert np.allclose(out, np.repeat(expected, 4, axis=0), atol=1e-12)

    def test_duplicated_keys_get_equal_weight(self):
        rng = np.random.default_rng(1)
        mha = MultiHeadAttention(rng, 8, 2)
        keys = rng.normal(size=(3, 8))
        keys[2] = keys[0]
        w = mha.attention_weights(Tensor(rng.normal(size=(2, 8))), Tensor(keys)).data
        assert np.allclose(w[..., 0], w[..., 2], atol=1e-15)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        mha = MultiHeadAttention(rng, 8, 2)
        q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        ref, ref_w = mha_reference(mha, q, k, v)
        assert np.allclose(mha(Tensor(q), Tensor(k), Tensor(v)).data, ref, atol=1e-6)
        assert np.allclose(mha.attention_weights(Tensor(q), Tensor(k)).data, ref_w, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from([(4, 1), (8, 2), (12, 3), (16, 4)]), st.integers(1, 5), st.integers(1, 6))
    def test_naive_oracle_property(self, seed, dims, nq, nk):
        d, h = dims
        rng = np.random.default_rng(seed)
        mha = MultiHeadAttention(rng, d, h)
        q, k, v = rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), rng.normal(size=(nk, d))
        ref, _ = mha_reference(mha, q, k, v)
        assert np.allclose(mha(Tensor(q), Tensor(k), Tensor(v)).data, ref, atol=1e-6)

    def test_batched_equals_per_item(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention(rng, 8, 4)
        q, k = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8))
        batched = mha(Tensor(q), Tensor(k), Tensor(k)).data
        for b in range(2):
            assert np.allclose(batched[b], mha(Tensor(q[b]), Tensor(k[b]), Tensor(k[b])).data, atol=1e-12)

    def test_records_head_averaged_weights(self):
        rng = np.random.default_rng(4)
        mha = MultiHeadAttention(rng, 8, 2)
        mha.record = True
        mha(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(6, 8))))
        assert mha.last_weights.shape == (3, 6)
        assert np.allclose(mha.last_weights.sum(-1), 1.0, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(np.random.default_rng(0), 10, 3)

    def test_key_value_mismatch_rejected(self):
        mha = MultiHeadAttention(np.random.default_rng(0), 8, 2)
        with pytest.raises(ShapeError):
            mha(Tensor(np.ones((2, 8))), Tensor(np.ones((3, 8))), Tensor(np.ones((4, 8))))

    def test_wrong_feature_dim_rejected(self):
        mha = MultiHeadAttention(np.random.default_rng(0), 8, 2)
        with pytest.raises(ShapeError):
            mha(Tensor(np.ones((2, 6))), Tensor(np.ones((3, 8))), Tensor(np.ones((3, 8))))


class TestFFNBlock:
    def test_layernorm_constant_row_zero_before_affine(self):
        ln = LayerNorm(6)
        assert np.allclose(ln(Tensor(np.full((2, 6), -1.5))).data, 0.0)

    def test_layernorm_moments(self):
        x = np.random.default_rng(5).normal(-2, 3, size=(4, 32))
        out = LayerNorm(32)(Tensor(x)).data
        assert np.allclose(out.mean(-1), 0, atol=1e-5) and np.allclose(out.var(-1), 1, atol=1e-5)

    def test_grad_check_full_block(self):
        rng = np.random.default_rng(6)
        blk = FFNBlock(rng, 8, 16)
        x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        w = rng.normal(size=(3, 8)) / np.sqrt(24)
        params = [x] + blk.parameters()
        rep = T.grad_check(lambda: ((x + blk(x)) * w).sum(), params)
        assert rep.max_rel_error < 1e-4

    def test_shape_preserved(self):
        blk = FFNBlock(np.random.default_rng(0), 8, 32)
        assert blk(Tensor(np.ones((2, 5, 8)))).shape == (2, 5, 8)


class TestPositionEmbedding:
    def test_origin_sines_zero_cosines_one(self):
        pe = position_embedding_2d(4, 4, 16)[0]
        q = 4
        assert np.all(pe[0:q] == 0) and np.all(pe[2 * q : 3 * q] == 0)
        assert np.all(pe[q : 2 * q] == 1) and np.all(pe[3 * q :] == 1)

    def test_norm_identical_across_positions(self):
        norms = np.linalg.norm(position_embedding_2d(4, 4, 16), axis=1)
        assert np.allclose(norms, norms[0])

    def test_all_positions_distinct_on_8x8(self):
        pe = position_embedding_2d(8, 8, 32)
        dist = np.linalg.norm(pe[:, None] - pe[None], axis=-1)
        off = dist[~np.eye(64, dtype=bool)]
        assert off.min() > 1e-6

    def test_shape(self):
        assert position_embedding_2d(3, 5, 8).shape == (15, 8)

    def test_rejects_d_not_multiple_of_4(self):
        with pytest.raises(ConfigError):
            position_embedding_2d(2, 2, 6)


class TestEntangle:
    def test_null_is_identity_object(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert entangle(x, PositionEmbedding.null()) is x

    def test_zero_content_gives_position(self):
        p = np.random.default_rng(1).normal(size=(3, 4))
        out = entangle(Tensor(np.zeros((3, 4))), PositionEmbedding("learned", Tensor(p)))
        assert np.array_equal(out.data, p)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_difference_is_position(self, seed):
        rng = np.random.default_rng(seed)
        x, p = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 4))
        diff = entangle(Tensor(x), PositionEmbedding("learned", Tensor(p))).data - entangle(Tensor(x), PositionEmbedding.null()).data
        assert np.allclose(diff, np.broadcast_to(p, x.shape), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            entangle(Tensor(np.ones((3, 4))), PositionEmbedding("learned", Tensor(np.ones((2, 4)))))


class TestModule:
    def test_state_round_trip(self):
        rng = np.random.default_rng(0)
        a, b = Linear(rng, 3, 2), Linear(rng, 3, 2)
        b.load_state_dict(a.state_dict())
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))

    def test_load_rejects_wrong_shape(self):
        rng = np.random.default_rng(0)
        a = Linear(rng, 3, 2)
        with pytest.raises(ShapeError):
            a.load_state_dict({"weight": np.zeros((2, 2)), "bias": np.zeros(2)})
