import numpy as np
import pytest

from octgen import tensor as T
from octgen.attention import AttentionParams, attention_weights, cross_attention, self_attention


def rand_params(node_width, key_width, d_k, seed, nonzero_out=False):
    params = AttentionParams(node_width, key_width, d_k, init_seed=seed)
    if nonzero_out:
        rng = np.random.default_rng(seed + 100)
        params.wo.set_data(rng.standard_normal((node_width, node_width)) * 0.3)
        params.bo.set_data(rng.standard_normal(node_width) * 0.05)
    return params


def test_single_part_broadcasts_value():
    rng = np.random.default_rng(0)
    params = rand_params(4, 6, 3, seed=1, nonzero_out=True)
    x = T.tensor(rng.standard_normal((5, 4)))
    part = T.tensor(rng.standard_normal((1, 6)))
    out = cross_attention(x, part, np.array([True]), params)
    w = attention_weights(x, part, np.array([True]), params)
    assert np.allclose(w.data, np.ones((5, 1)))
    v = part.data @ params.wv.data + params.bv.data
    update = v @ params.wo.data + params.bo.data
    assert np.allclose(out.data, x.data + update)


def test_identical_part_rows_equal_single_part():
    rng = np.random.default_rng(1)
    params = rand_params(4, 6, 3, seed=2, nonzero_out=True)
    x = T.tensor(rng.standard_normal((5, 4)))
    row = rng.standard_normal(6)
    three = T.tensor(np.tile(row, (3, 1)))
    one = T.tensor(row[None])
    out3 = cross_attention(x, three, np.ones(3, bool), params)
    out1 = cross_attention(x, one, np.ones(1, bool), params)
    assert np.allclose(out3.data, out1.data, atol=1e-12)


def test_hand_computed_two_by_two():
    # identity-like projections, d_k = 2: logits = X P^T / sqrt(2)
    params = AttentionParams(2, 2, 2, init_seed=0)
    params.wq.set_data(np.eye(2))
    params.wk.set_data(np.eye(2))
    params.wv.set_data(np.eye(2))
    params.wo.set_data(np.eye(2))
    x = T.tensor([[1.0, 0.0], [0.0, 2.0]])
    parts = T.tensor([[1.0, 0.0], [0.0, 1.0]])
    s = 1 / np.sqrt(2.0)
    logits = np.array([[1.0 * s, 0.0], [0.0, 2.0 * s]])
    expect_w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    w = attention_weights(x, parts, np.ones(2, bool), params)
    assert np.abs(w.data - expect_w).max() < 1e-12
    out = cross_attention(x, parts, np.ones(2, bool), params)
    assert np.abs(out.data - (x.data + expect_w @ parts.data)).max() < 1e-12


def test_weight_rows_sum_to_one():
    rng = np.random.default_rng(2)
    params = rand_params(8, 5, 4, seed=3)
    x = T.tensor(rng.standard_normal((20, 8)) * 10)
    parts = T.tensor(rng.standard_normal((4, 5)) * 10)
    w = attention_weights(x, parts, np.ones(4, bool), params).data
    assert (w >= 0).all()
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-9


def test_masked_column_exactly_zero():
    rng = np.random.default_rng(3)
    params = rand_params(4, 4, 4, seed=4)
    x = T.tensor(rng.standard_normal((6, 4)))
    parts = T.tensor(rng.standard_normal((3, 4)))
    mask = np.array([True, False, True])
    w = attention_weights(x, parts, mask, params).data
    assert (w[:, 1] == 0.0).all()
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-9


def test_all_masked_errors():
    params = rand_params(4, 4, 4, seed=5)
    x = T.tensor(np.zeros((2, 4)))
    parts = T.tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        cross_attention(x, parts, np.zeros(2, bool), params)


def test_query_permutation_equivariance():
    rng = np.random.default_rng(4)
    params = rand_params(5, 6, 4, seed=6, nonzero_out=True)
    x = rng.standard_normal((9, 5))
    parts = T.tensor(rng.standard_normal((3, 6)))
    mask = np.ones(3, bool)
    out = cross_attention(T.tensor(x), parts, mask, params).data
    perm = rng.permutation(9)
    out_p = cross_attention(T.tensor(x[perm]), parts, mask, params).data
    assert np.array_equal(out_p, out[perm])


def test_part_permutation_invariance():
    rng = np.random.default_rng(5)
    params = rand_params(5, 6, 4, seed=7, nonzero_out=True)
    x = T.tensor(rng.standard_normal((7, 5)))
    parts = rng.standard_normal((4, 6))
    mask = np.array([True, True, False, True])
    out = cross_attention(T.tensor(x.data), T.tensor(parts), mask, params).data
    perm = rng.permutation(4)
    out_p = cross_attention(T.tensor(x.data), T.tensor(parts[perm]), mask[perm], params).data
    assert np.array_equal(out, out_p)


def test_zero_output_projection_is_identity():
    rng = np.random.default_rng(6)
    params = rand_params(5, 6, 4, seed=8)  # wo, bo zero by construction
    x = rng.standard_normal((7, 5))
    parts = T.tensor(rng.standard_normal((3, 6)))
    out = cross_attention(T.tensor(x), parts, np.ones(3, bool), params)
    assert np.array_equal(out.data, x)


def test_self_attention_single_node():
    rng = np.random.default_rng(7)
    params = rand_params(4, 4, 4, seed=9, nonzero_out=True)
    x = rng.standard_normal((1, 4))
    out = self_attention(T.tensor(x), params).data
    v = x @ params.wv.data + params.bv.data
    assert np.allclose(out, x + (v @ params.wo.data + params.bo.data))


def test_self_attention_permutation_equivariance():
    # permuting nodes also permutes keys, so reduction order shifts; the
    # result is equivariant to floating-point roundoff
    rng = np.random.default_rng(8)
    params = rand_params(4, 4, 4, seed=10, nonzero_out=True)
    x = rng.standard_normal((6, 4))
    out = self_attention(T.tensor(x), params).data
    perm = rng.permutation(6)
    out_p = self_attention(T.tensor(x[perm]), params).data
    assert np.abs(out_p - out[perm]).max() < 1e-12


def test_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(9)
    params = rand_params(3, 3, 2, seed=11, nonzero_out=True)
    x = rng.standard_normal((4, 3))
    out = self_attention(T.tensor(x), params).data

    q = x @ params.wq.data + params.bq.data
    k = x @ params.wk.data
    v = x @ params.wv.data + params.bv.data
    expected = np.zeros_like(x)
    for i in range(4):
        logits = np.array([q[i] @ k[j] for j in range(4)]) / np.sqrt(2.0)
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        agg = sum(w[j] * v[j] for j in range(4))
        expected[i] = x[i] + agg @ params.wo.data + params.bo.data
    assert np.abs(out - expected).max() < 1e-12


def test_scaling_sharpens_but_preserves_argmax():
    rng = np.random.default_rng(10)
    params = rand_params(4, 4, 4, seed=12)
    x = rng.standard_normal((6, 4))
    parts = rng.standard_normal((3, 4))
    mask = np.ones(3, bool)

    w1 = attention_weights(T.tensor(x), T.tensor(parts), mask, params).data
    w_parts_scaled = attention_weights(T.tensor(x), T.tensor(2.0 * parts), mask, params).data
    assert not np.allclose(w1, w_parts_scaled)

    # scaling Q and K jointly by c scales logits by c^2; with the query bias
    # zeroed this is exact, and the per-row argmax is preserved for c > 1
    params.bq.set_data(np.zeros(4))
    w1 = attention_weights(T.tensor(x), T.tensor(parts), mask, params).data
    w2 = attention_weights(T.tensor(2.0 * x), T.tensor(2.0 * parts), mask, params).data
    assert np.array_equal(w1.argmax(axis=1), w2.argmax(axis=1))
    # sharpening: max weight never decreases
    assert (w2.max(axis=1) >= w1.max(axis=1) - 1e-12).all()


def test_cross_attention_grad_check():
    rng = np.random.default_rng(11)
    params = rand_params(4, 5, 3, seed=13, nonzero_out=True)
    x = T.tensor(rng.standard_normal((5, 4)))
    parts = T.tensor(rng.standard_normal((3, 5)))
    mask = np.array([True, True, False])

    def model(inp):
        out = cross_attention(inp, parts, mask, params)
        return (out * out).mean()

    err = T.grad_check(model, params.parameters(), input=x)
    assert err < 1e-4
