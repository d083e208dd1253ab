import numpy as np
import pytest

from jarfuse import blocks
from jarfuse.blocks import (
    AttentionParams,
    init_attention,
    init_mlp,
    init_transformer_layer,
    mlp_forward,
    multi_head_attention,
    transformer_layer,
    zero_layer_params,
)
from jarfuse.costmodel import flops_attention
from jarfuse.tensor import (
    DimensionError,
    OpCounter,
    ParamStore,
    Tensor,
    grad_check,
    seeded_rng,
    sum_all,
)


def make_attention(width, heads, seed=0):
    store = ParamStore()
    return init_attention(store, "attn", width, heads, seeded_rng(seed)), store


def naive_single_head_attention(queries, kv, p: AttentionParams):
    """Independent dense oracle, no head splitting (heads must be 1)."""
    q = queries @ p.wq.data
    k = kv @ p.wk.data
    v = kv @ p.wv.data
    logits = q @ k.T / np.sqrt(q.shape[1])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    return (w @ v) @ p.wo.data


class TestMultiHeadAttention:
    def test_single_kv_token_ignores_queries(self):
        # Softmax over one element is 1: every query row gets the same value.
        params, _ = make_attention(8, 2)
        rng = seeded_rng(1)
        kv = Tensor(rng.normal(0, 1, (1, 8)))
        out_a = multi_head_attention(Tensor(rng.normal(0, 1, (5, 8))), kv, params)
        out_b = multi_head_attention(Tensor(rng.normal(0, 1, (3, 8))), kv, params)
        assert np.allclose(out_a.data, np.tile(out_a.data[0], (5, 1)), atol=1e-12)
        assert np.allclose(out_a.data[0], out_b.data[0], atol=1e-12)

    def test_orthogonal_queries_give_uniform_attention(self):
        # Identity projections, one head, queries orthogonal to keys: all
        # logits are zero, so the output is the mean of the value rows.
        store = ParamStore()
        eye = np.eye(4)
        params = AttentionParams(
            wq=store.add("wq", eye), wk=store.add("wk", eye),
            wv=store.add("wv", eye), wo=store.add("wo", eye), heads=1,
        )
        queries = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]))
        kv = Tensor(np.array([[0.0, 0.0, 2.0, 0.0], [0.0, 0.0, 0.0, 4.0]]))
        out = multi_head_attention(queries, kv, params)
        assert np.allclose(out.data, kv.data.mean(axis=0, keepdims=True), atol=1e-12)

    def test_matches_dense_oracle_single_head(self):
        params, _ = make_attention(4, 1, seed=3)
        rng = seeded_rng(4)
        queries = Tensor(rng.normal(0, 1, (2, 4)))
        kv = Tensor(rng.normal(0, 1, (3, 4)))
        out = multi_head_attention(queries, kv, params)
        expected = naive_single_head_attention(queries.data, kv.data, params)
        assert np.max(np.abs(out.data - expected)) < 1e-10

    @pytest.mark.parametrize("m", [1, 4, 16, 64])
    def test_output_shape_follows_queries(self, m):
        params, _ = make_attention(8, 4)
        rng = seeded_rng(5)
        out = multi_head_attention(
            Tensor(rng.normal(0, 1, (6, 8))), Tensor(rng.normal(0, 1, (m, 8))), params
        )
        assert out.shape == (6, 8)

    def test_kv_permutation_invariance(self):
        params, _ = make_attention(8, 2, seed=6)
        rng = seeded_rng(7)
        queries = Tensor(rng.normal(0, 1, (3, 8)))
        kv = rng.normal(0, 1, (10, 8))
        out = multi_head_attention(queries, Tensor(kv), params)
        perm = rng.permutation(10)
        out_p = multi_head_attention(queries, Tensor(kv[perm]), params)
        assert np.max(np.abs(out.data - out_p.data)) <= 1e-12

    def test_width_mismatch(self):
        params, _ = make_attention(8, 2)
        with pytest.raises(DimensionError):
            multi_head_attention(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 8))), params)

    @pytest.mark.parametrize("q,m,width,heads", [(1, 1, 1, 1), (2, 3, 4, 2), (5, 7, 8, 4)])
    def test_flops_match_closed_form(self, q, m, width, heads):
        params, _ = make_attention(width, heads)
        rng = seeded_rng(8)
        with OpCounter() as counter:
            multi_head_attention(
                Tensor(rng.normal(0, 1, (q, width))),
                Tensor(rng.normal(0, 1, (m, width))),
                params,
            )
        assert counter.total_flops == flops_attention(q, m, width, heads)


class TestMlp:
    def test_zero_weights_zero_output(self):
        store = ParamStore()
        params = init_mlp(store, "mlp", 4, 2, seeded_rng(0))
        for t in (params.w1, params.b1, params.w2, params.b2):
            t.data[...] = 0.0
        out = mlp_forward(Tensor(np.ones((3, 4))), params)
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_gelu_zero_fixed_point(self):
        store = ParamStore()
        params = init_mlp(store, "mlp", 1, 1, seeded_rng(0))
        params.w1.data[...] = 1.0
        params.w2.data[...] = 1.0
        out = mlp_forward(Tensor([[0.0]]), params)
        assert out.data[0, 0] == 0.0

    def test_matches_scalar_loop_oracle(self):
        store = ParamStore()
        params = init_mlp(store, "mlp", 4, 3, seeded_rng(9))
        rng = seeded_rng(10)
        x = rng.normal(0, 1, (2, 4))
        out = mlp_forward(Tensor(x), params)

        def gelu_scalar(v):
            inner = np.sqrt(2 / np.pi) * (v + 0.044715 * v**3)
            return 0.5 * v * (1 + np.tanh(inner))

        expected = np.zeros((2, 4))
        hidden = np.zeros((2, 12))
        for i in range(2):
            for j in range(12):
                acc = params.b1.data[j]
                for k in range(4):
                    acc += x[i, k] * params.w1.data[k, j]
                hidden[i, j] = gelu_scalar(acc)
            for j in range(4):
                acc = params.b2.data[j]
                for k in range(12):
                    acc += hidden[i, k] * params.w2.data[k, j]
                expected[i, j] = acc
        assert np.max(np.abs(out.data - expected)) < 1e-12


class TestTransformerLayer:
    def test_zero_weights_is_identity(self):
        store = ParamStore()
        layer = init_transformer_layer(store, "layer", 8, 2, 4, seeded_rng(0))
        zero_layer_params(layer)
        x = seeded_rng(1).normal(0, 1, (5, 8))
        out = transformer_layer(Tensor(x), layer)
        assert np.array_equal(out.data, x)

    @pytest.mark.parametrize("q", [1, 16, 64])
    def test_shape_preserved(self, q):
        store = ParamStore()
        layer = init_transformer_layer(store, "layer", 8, 2, 4, seeded_rng(0))
        out = transformer_layer(Tensor(seeded_rng(2).normal(0, 1, (q, 8))), layer)
        assert out.shape == (q, 8)

    def test_gradient_check_all_parameters(self):
        store = ParamStore()
        layer = init_transformer_layer(store, "layer", 8, 2, 2, seeded_rng(3))
        # Move weights to a generic scale so no gradient is degenerately tiny.
        rng = seeded_rng(4)
        for name, t in store.items():
            if name.endswith(".gain"):
                t.data[...] = rng.uniform(0.5, 1.5, t.shape)
            else:
                t.data[...] = rng.normal(0, 0.4, t.shape)
        x = Tensor(rng.normal(0, 1, (4, 8)))

        def f():
            out = transformer_layer(x, layer)
            return sum_all(out * out)

        report = grad_check(f, store, h=1e-5, tol=1e-4)
        assert report.passed, f"{report.worst.name}: {report.worst.max_rel_err}"

    def test_head_count_must_divide_width(self):
        with pytest.raises(DimensionError):
            init_attention(ParamStore(), "attn", 8, 3, seeded_rng(0))
