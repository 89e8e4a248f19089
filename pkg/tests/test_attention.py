import numpy as np
import pytest

from oracles import scalar_attention, scalar_max_pool
from votr.attention import (AttentionWeights, attend_backward, attend_one, attend_padded,
                            attend_sparse, attend_sparse_padded, backward_padded,
                            pooled_query, positional_encoding)
from votr.gradcheck import (TOLERANCE, check_instance, numerical_gradients, random_instance,
                            relative_error, run_gradcheck)


def _instance(rng, d_model=16, n_heads=4, n_att=7, scale=1.0):
    w = AttentionWeights.init(d_model, n_heads, rng)
    w = AttentionWeights(**{k: v * scale for k, v in w.tensors().items()})
    p_i = rng.uniform(-3, 3, 3)
    return (rng.normal(size=d_model), rng.normal(size=(n_att, d_model)), p_i,
            p_i + rng.uniform(-2, 2, (n_att, 3)), w)


def _oracle(q, f_att, p_i, p_att, w):
    return scalar_attention(q.tolist(), f_att.tolist(), p_i.tolist(), p_att.tolist(),
                            w.W_q.tolist(), w.W_k.tolist(), w.W_v.tolist(), w.W_pos.tolist(),
                            w.W_out.tolist())


def test_weight_shapes_and_validation(rng):
    w = AttentionWeights.init(32, 4, rng)
    assert (w.n_heads, w.d_model, w.d_head) == (4, 32, 8)
    assert w.W_pos.shape == (4, 3, 8) and w.W_out.shape == (32, 32)
    assert np.abs(w.W_q).max() <= np.sqrt(1 / 32)
    with pytest.raises(ValueError):
        AttentionWeights.init(30, 4)
    with pytest.raises(ValueError):
        AttentionWeights(w.W_q, w.W_k, w.W_v, w.W_pos[:, :2], w.W_out)


def test_positional_encoding_examples(rng):
    W = rng.normal(size=(3, 5))
    p = rng.normal(size=3)
    assert not positional_encoding(p, p, W).any()
    assert not positional_encoding(p, p + 1, np.zeros((3, 5))).any()
    q = rng.normal(size=3)
    want = [sum((p[a] - q[a]) * W[a, k] for a in range(3)) for k in range(5)]
    np.testing.assert_allclose(positional_encoding(p, q, W), want, rtol=1e-13)


def test_pooled_query_examples(rng):
    np.testing.assert_array_equal(pooled_query([[1.0, -2.0]]), [1.0, -2.0])
    np.testing.assert_array_equal(pooled_query([[1.0, -2.0], [0.0, 3.0]]), [1.0, 3.0])
    f = rng.normal(size=(48, 16))
    np.testing.assert_array_equal(pooled_query(f), scalar_max_pool(f.tolist()))
    with pytest.raises(ValueError):
        pooled_query(np.empty((0, 4)))


def test_single_attendee_returns_its_value(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, n_att=1)
    out = attend_one(f_i, f_att, p_i, p_att, w)
    assert np.allclose(out.attn_weights, 1.0)
    E = positional_encoding(p_i, p_att[0], w.W_pos)                  # (H, e)
    V = np.einsum("d,hde->he", f_att[0], w.W_v) + E
    np.testing.assert_allclose(out.value, V.reshape(-1) @ w.W_out, rtol=1e-12, atol=1e-14)
    sparse = attend_sparse(p_i, f_att, p_att, w)
    np.testing.assert_allclose(sparse.value, out.value, rtol=1e-12, atol=1e-14)


def test_identical_attendees_split_evenly(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, n_att=1)
    out = attend_one(f_i, np.repeat(f_att, 2, 0), p_i, np.repeat(p_att, 2, 0), w)
    np.testing.assert_allclose(out.attn_weights, 0.5, atol=1e-15)


def test_empty_attendees_rejected(rng):
    w = AttentionWeights.init(8, 4, rng)
    with pytest.raises(ValueError):
        attend_one(np.zeros(8), np.empty((0, 8)), np.zeros(3), np.empty((0, 3)), w)
    with pytest.raises(ValueError):
        attend_sparse(np.zeros(3), np.empty((0, 8)), np.empty((0, 3)), w)
    with pytest.raises(ValueError):
        attend_padded(np.zeros((1, 8)), np.zeros((1, 2, 8)), np.zeros((1, 2, 3)),
                      np.zeros((1, 2), dtype=bool), w)


@pytest.mark.parametrize("d_model", [16, 32, 64])
def test_attend_one_matches_scalar_loops(rng, d_model):
    for _ in range(5):
        f_i, f_att, p_i, p_att, w = _instance(rng, d_model, n_att=int(rng.integers(1, 12)))
        got = attend_one(f_i, f_att, p_i, p_att, w)
        want, weights = _oracle(f_i, f_att, p_i, p_att, w)
        assert np.abs(got.value - want).max() < 1e-10
        assert np.abs(got.attn_weights - weights).max() < 1e-12


def test_attend_sparse_matches_scalar_loops(rng):
    for _ in range(10):
        _, f_att, p_i, p_att, w = _instance(rng, 32, n_att=int(rng.integers(1, 12)))
        got = attend_sparse(p_i, f_att, p_att, w)
        want, _ = _oracle(np.array(scalar_max_pool(f_att.tolist())), f_att, p_i, p_att, w)
        assert np.abs(got.value - want).max() < 1e-10


def test_identical_attendees_sparse_equals_attend_one(rng):
    _, f_att, p_i, p_att, w = _instance(rng, 16, n_att=1)
    f = np.repeat(f_att, 5, 0)
    p = p_i + rng.uniform(-1, 1, (5, 3))
    np.testing.assert_allclose(attend_sparse(p_i, f, p, w).value,
                               attend_one(f_att[0], f, p_i, p, w).value, rtol=1e-13)


def test_softmax_rows_sum_to_one_even_with_large_logits(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 16, n_att=48, scale=30.0)
    a = attend_one(f_i, f_att, p_i, p_att, w).attn_weights
    assert np.isfinite(a).all() and (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)


def test_permutation_invariance(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 32, n_att=20)
    perm = rng.permutation(20)
    a = attend_one(f_i, f_att, p_i, p_att, w)
    b = attend_one(f_i, f_att[perm], p_i, p_att[perm], w)
    assert np.abs(a.value - b.value).max() < 1e-12
    np.testing.assert_allclose(b.attn_weights, a.attn_weights[:, perm], atol=1e-15)


def test_rigid_translation_invariance(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 32, n_att=20)
    # power-of-two shift keeps center differences exact in binary floating point
    t = np.array([8.0, -16.0, 4.0])
    a = attend_one(f_i, f_att, p_i, p_att, w).value
    b = attend_one(f_i, f_att, p_i + t, p_att + t, w).value
    assert np.abs(a - b).max() < 1e-12


def test_zero_query_key_weights_give_uniform_attention(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 16, n_att=9)
    w.W_q[:] = 0
    w.W_k[:] = 0
    for c in (1.0, 7.5, -100.0):
        a = attend_one(c * f_i, c * f_att, p_i, p_att, w).attn_weights
        assert (a == 1.0 / 9).all()


def test_padded_batch_equals_per_query(rng):
    w = AttentionWeights.init(16, 4, rng)
    n, B = 30, 10
    counts = rng.integers(1, B + 1, n)
    mask = np.arange(B)[None] < counts[:, None]
    f_att = rng.normal(size=(n, B, 16))
    rel = rng.normal(size=(n, B, 3))
    q = rng.normal(size=(n, 16))
    out, weights = attend_padded(q, f_att, rel, mask, w, chunk=7)
    sparse_out, _ = attend_sparse_padded(f_att, rel, mask, w, chunk=7)
    for i in range(n):
        k = counts[i]
        one = attend_one(q[i], f_att[i, :k], np.zeros(3), -rel[i, :k], w)
        np.testing.assert_allclose(out[i], one.value, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(weights[i, :, :k], one.attn_weights, atol=1e-15)
        assert (weights[i, :, k:] == 0).all()
        sp = attend_sparse(np.zeros(3), f_att[i, :k], -rel[i, :k], w)
        np.testing.assert_allclose(sparse_out[i], sp.value, rtol=1e-12, atol=1e-14)


def test_backward_zero_upstream_gives_zero_bundle(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng)
    gb = attend_backward(f_i, f_att, p_i, p_att, w, np.zeros(16))
    for name, g in gb.tensors().items():
        assert not g.any(), name


def test_backward_shapes_mirror_parameters(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 32, n_att=5)
    gb = attend_backward(f_i, f_att, p_i, p_att, w, rng.normal(size=32))
    for name, p in w.tensors().items():
        assert getattr(gb, name).shape == p.shape
    assert gb.f_query.shape == f_i.shape and gb.f_attendees.shape == f_att.shape


def test_w_out_gradient_single_attendee_is_outer_product(rng):
    f_i, f_att, p_i, p_att, w = _instance(rng, 16, n_att=1)
    g = rng.normal(size=16)
    E = positional_encoding(p_i, p_att[0], w.W_pos)
    head = (np.einsum("d,hde->he", f_att[0], w.W_v) + E).reshape(-1)
    gb = attend_backward(f_i, f_att, p_i, p_att, w, g)
    np.testing.assert_allclose(gb.W_out, np.outer(head, g), rtol=1e-12)
    # with one attendee the softmax is constant, so the query gets no gradient
    assert np.abs(gb.f_query).max() < 1e-14


def test_padded_backward_sums_per_query_gradients(rng):
    w = AttentionWeights.init(8, 4, rng)
    n, B = 6, 4
    counts = rng.integers(1, B + 1, n)
    mask = np.arange(B)[None] < counts[:, None]
    q = rng.normal(size=(n, 8))
    f_att = rng.normal(size=(n, B, 8))
    rel = rng.normal(size=(n, B, 3))
    g = rng.normal(size=(n, 8))
    total = backward_padded(q, f_att, rel, mask, w, g)
    acc = {k: np.zeros_like(v) for k, v in w.tensors().items()}
    for i in range(n):
        k = counts[i]
        gb = attend_backward(q[i], f_att[i, :k], np.zeros(3), -rel[i, :k], w, g[i])
        for name in acc:
            acc[name] += getattr(gb, name)
        np.testing.assert_allclose(total.f_query[i], gb.f_query, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(total.f_attendees[i, :k], gb.f_attendees,
                                   rtol=1e-10, atol=1e-13)
    for name in acc:
        np.testing.assert_allclose(getattr(total, name), acc[name], rtol=1e-10, atol=1e-13)


def test_gradcheck_small_batch():
    results = run_gradcheck(trials=10, seed=3)
    assert max(r.max_error for r in results) < TOLERANCE


def test_gradcheck_detects_a_wrong_gradient(rng):
    inst = random_instance(rng, d_model=8, n_attendees=4)
    errs = check_instance(inst)
    assert max(errs.values()) < TOLERANCE
    bad = inst.weights.copy()
    bad.W_v *= 1.01
    numeric = numerical_gradients(inst)
    analytic = attend_backward(inst.f_i, inst.f_att, inst.p_i, inst.p_att, bad,
                               inst.grad_out).W_out
    assert relative_error(analytic, numeric["W_out"]) > TOLERANCE


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.empty(0), np.empty(0)) == 0.0
