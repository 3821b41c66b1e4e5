"""Autodiff core: primitive values, gradients against finite differences, graph rules."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uniprompt.autodiff import (
    AttentionWeights,
    FeedForwardWeights,
    Parameter,
    Tensor,
    backward,
    concat,
    cross_entropy,
    embedding,
    feed_forward,
    gelu,
    insert_rows,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    multi_head_attention,
    no_grad,
    precision,
    replace_rows,
    reshape,
    softmax,
    transpose,
)
from uniprompt.autodiff.gradcheck import check_parameters, numerical_gradient, relative_error
from uniprompt.autodiff.io import decode_tensor, encode_tensor, load_tensor, save_tensor
from uniprompt.errors import ConfigurationError, ContractError, DimensionError, GraphError, IntegrityError

TOL = 1e-4


def p64(a, name=None):
    return Parameter(np.asarray(a, dtype=np.float64), trainable=True, dtype=np.float64, name=name)


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def attention_weights(rng, d, scale=0.5):
    return AttentionWeights(*(p64(rng.normal(0, scale, (d, d)) if i % 2 == 0 else rng.normal(0, 0.1, d))
                              for i in range(8)))


# -- matmul ----------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_zero():
    out = matmul(Tensor(np.zeros((3, 2))), Tensor(np.ones((2, 4))))
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients(rng):
    a, b = p64(rng.normal(size=(3, 4))), p64(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    backward((matmul(a, b) * Tensor(g)).sum())
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- layer norm ------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_values():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]])


def test_layer_norm_zero_gamma_gives_beta(rng):
    beta = rng.normal(size=5)
    out = layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(beta))
    assert np.allclose(out.data, np.broadcast_to(beta, (3, 5)))


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layer_norm_matches_scalar_loop(rng):
    x = rng.normal(size=(3, 6))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    out = layer_norm(Tensor(x), Tensor(gamma), Tensor(beta)).data
    for i in range(3):
        mu = sum(x[i]) / 6
        var = sum((v - mu) ** 2 for v in x[i]) / 6
        for j in range(6):
            assert abs(out[i, j] - ((x[i, j] - mu) / math.sqrt(var + 1e-5) * gamma[j] + beta[j])) < 1e-12


# -- softmax / cross entropy -----------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)


def test_softmax_two_values():
    assert np.allclose(softmax(Tensor([1.0, 0.0])).data, [0.73106, 0.26894], atol=1e-4)


def test_softmax_large_input_no_overflow():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, [1.0, 0.0])


def test_softmax_mask_gives_exact_zero(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = softmax(Tensor(rng.normal(size=(4, 4))), mask=mask).data
    assert np.all(out[~mask] == 0.0)
    assert np.allclose(out.sum(-1), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform():
    loss = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
    assert abs(float(loss.data) - math.log(4)) < 1e-12


def test_cross_entropy_confident_is_near_zero():
    logits = np.array([[50.0, 0.0, 0.0]])
    assert float(cross_entropy(Tensor(logits), [0]).data) < 1e-20


def test_cross_entropy_matches_brute_force(rng):
    logits = rng.normal(size=(2, 3))
    labels = [2, 0]
    expected = 0.0
    for i, y in enumerate(labels):
        z = sum(math.exp(v) for v in logits[i])
        expected -= math.log(math.exp(logits[i, y]) / z)
    assert abs(float(cross_entropy(Tensor(logits), labels).data) - expected / 2) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


# -- attention / ffn -------------------------------------------------------------

def test_attention_single_token_weights_are_one(rng):
    w = attention_weights(rng, 4)
    _, weights = multi_head_attention(Tensor(rng.normal(size=(1, 4))), *[Tensor(rng.normal(size=(1, 4)))] * 2,
                                      weights=w, heads=2, return_weights=True)
    assert np.array_equal(weights, np.ones((2, 1, 1)))


def test_attention_uniform_queries_and_keys(rng):
    w = attention_weights(rng, 4)
    x = np.tile(rng.normal(size=(1, 4)), (5, 1))
    _, weights = multi_head_attention(Tensor(x), Tensor(x), Tensor(rng.normal(size=(5, 4))), w, 2, return_weights=True)
    assert np.allclose(weights, 0.2)


def test_attention_heads_must_divide_width(rng):
    with pytest.raises(ConfigurationError):
        multi_head_attention(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))),
                             attention_weights(rng, 6), heads=4)


def attention_oracle(x, w, heads):
    """Scalar loops over heads, queries, keys."""
    s, d = x.shape
    dh = d // heads

    def proj(W, b):
        return [[sum(x[i, a] * W[a, j] for a in range(d)) + b[j] for j in range(d)] for i in range(s)]

    q, k, v = proj(w.q_w.data, w.q_b.data), proj(w.k_w.data, w.k_b.data), proj(w.v_w.data, w.v_b.data)
    concat_heads = [[0.0] * d for _ in range(s)]
    probs = np.zeros((heads, s, s))
    for h in range(heads):
        lo = h * dh
        for i in range(s):
            scores = [sum(q[i][lo + c] * k[j][lo + c] for c in range(dh)) / math.sqrt(dh) for j in range(s)]
            top = max(scores)
            e = [math.exp(sc - top) for sc in scores]
            z = sum(e)
            for j in range(s):
                probs[h, i, j] = e[j] / z
            for c in range(dh):
                concat_heads[i][lo + c] = sum(probs[h, i, j] * v[j][lo + c] for j in range(s))
    out = np.array([[sum(concat_heads[i][a] * w.out_w.data[a, j] for a in range(d)) + w.out_b.data[j]
                     for j in range(d)] for i in range(s)])
    return out, probs


@pytest.mark.parametrize("s,heads", [(2, 1), (5, 2)])
def test_attention_matches_scalar_oracle(rng, s, heads):
    d = 4
    w = attention_weights(rng, d)
    x = rng.normal(size=(s, d))
    out, weights = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), w, heads, return_weights=True)
    ref_out, ref_w = attention_oracle(x, w, heads)
    assert np.allclose(out.data, ref_out, atol=1e-12)
    assert np.allclose(weights, ref_w, atol=1e-12)


def test_feed_forward_zero_weights_gives_bias(rng):
    b2 = rng.normal(size=3)
    w = FeedForwardWeights(Tensor(np.zeros((3, 12))), Tensor(rng.normal(size=12)), Tensor(np.zeros((12, 3))), Tensor(b2))
    out = feed_forward(Tensor(rng.normal(size=(4, 3))), w)
    assert np.allclose(out.data, np.broadcast_to(b2, (4, 3)))


def test_feed_forward_scalar_case():
    w = FeedForwardWeights(Tensor([[2.0]]), Tensor([0.5]), Tensor([[3.0]]), Tensor([-1.0]))
    out = feed_forward(Tensor([[0.7]]), w)
    assert abs(float(out.data[0, 0]) - (3.0 * gelu_scalar(2.0 * 0.7 + 0.5) - 1.0)) < 1e-12


def test_feed_forward_preserves_shape(rng):
    w = FeedForwardWeights(*(Tensor(a) for a in (rng.normal(size=(6, 24)), np.zeros(24), rng.normal(size=(24, 6)), np.zeros(6))))
    assert feed_forward(Tensor(rng.normal(size=(5, 6))), w).shape == (5, 6)


def test_feed_forward_shape_mismatch(rng):
    w = FeedForwardWeights(*(Tensor(a) for a in (np.zeros((6, 8)), np.zeros(8), np.zeros((8, 5)), np.zeros(5))))
    with pytest.raises(DimensionError):
        feed_forward(Tensor(np.zeros((2, 6))), w)


# -- backward rules --------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = p64([1.0, 2.0, 3.0])
    backward(p.sum())
    assert np.array_equal(p.grad, np.ones(3))


def test_backward_square():
    p = p64([1.0, 2.0])
    backward((p * p).sum())
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_backward_independent_parameter_gets_zero():
    p, q = p64([1.0, 2.0]), p64([3.0])
    backward((q * q).sum() + (p * 0.0).sum())
    assert not p.grad.any()


def test_backward_requires_scalar():
    p = p64([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(p * 2.0)


def test_second_backward_is_rejected():
    p = p64([1.0, 2.0])
    loss = (p * p).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_frozen_parameters_receive_no_gradient():
    frozen = Parameter(np.ones(3), trainable=False, dtype=np.float64)
    p = p64([1.0, 2.0, 3.0])
    backward((frozen * p).sum())
    assert not frozen.grad.any()
    assert np.array_equal(p.grad, np.ones(3))


def test_no_grad_records_nothing():
    p = p64([1.0])
    with no_grad():
        out = p * 3.0
    assert not out.requires_grad


def test_shared_subexpression_accumulates():
    p = p64([2.0])
    y = p * p
    backward((y + y * 3.0).sum())
    assert np.allclose(p.grad, [16.0])


def test_determinism(rng):
    x = rng.normal(size=(3, 4))

    def run():
        p = p64(x)
        loss = (gelu(layer_norm(p, Tensor(np.ones(4)), Tensor(np.zeros(4)))) ** 2).sum()
        backward(loss)
        return loss.data.tobytes(), p.grad.tobytes()

    assert run() == run()


# -- finite differences ------------------------------------------------------------

def _fd_check(loss_fn, params):
    results = check_parameters(loss_fn, params, coords_per_param=params[0].size)
    return max(r.max_error for r in results)


@pytest.mark.parametrize("op", ["gelu", "layer_norm", "softmax", "log_softmax", "l2", "transpose", "concat", "rows"])
def test_composite_gradients(rng, op):
    x = p64(rng.normal(size=(3, 5)))
    gamma, beta = p64(rng.normal(size=5)), p64(rng.normal(size=5))
    rows = p64(rng.normal(size=(2, 5)))
    weights = Tensor(rng.normal(size=(3, 5)))

    def loss_fn():
        if op == "gelu":
            y = gelu(x)
        elif op == "layer_norm":
            y = layer_norm(x, gamma, beta)
        elif op == "softmax":
            y = softmax(x * 3.0)
        elif op == "log_softmax":
            y = log_softmax(x)
        elif op == "l2":
            y = l2_normalize(x)
        elif op == "transpose":
            y = transpose(reshape(x, (5, 3)), (1, 0))
        elif op == "concat":
            y = concat([x[:1], x[1:] * 2.0], axis=0)
        else:
            y = replace_rows(x, rows, 1) + insert_rows(x, rows, 1)[:3]
        return (y * weights).sum()

    params = {"layer_norm": [x, gamma, beta], "rows": [x, rows]}.get(op, [x])
    assert _fd_check(loss_fn, params) < TOL


def test_attention_and_ffn_gradients(rng):
    d = 4
    x = p64(rng.normal(size=(2, 3, d)))
    aw = attention_weights(rng, d)
    fw = FeedForwardWeights(p64(rng.normal(0, 0.5, (d, 8))), p64(rng.normal(0, 0.1, 8)), p64(rng.normal(0, 0.5, (8, d))), p64(np.zeros(d)))
    target = Tensor(rng.normal(size=(2, 3, d)))
    mask = np.tril(np.ones((3, 3), dtype=bool))

    def loss_fn():
        h = multi_head_attention(x, x, x, aw, 2, mask=mask)
        return (feed_forward(h, fw) * target).sum()

    params = [x, *aw.named().values(), *fw.named().values()]
    results = check_parameters(loss_fn, params, coords_per_param=6, rng=np.random.default_rng(3))
    assert max(r.max_error for r in results) < TOL


def test_cross_entropy_and_embedding_gradients(rng):
    table = p64(rng.normal(size=(7, 4)))
    w = p64(rng.normal(size=(4, 3)))
    ids = np.array([[1, 2], [2, 6]])

    def loss_fn():
        h = embedding(table, ids).sum(axis=1)
        return cross_entropy(matmul(h, w), [0, 2])

    results = check_parameters(loss_fn, [table, w], coords_per_param=12)
    assert max(r.max_error for r in results) < TOL


def test_numerical_gradient_of_quadratic():
    a = np.array([1.0, -2.0])
    grad = numerical_gradient(lambda: Tensor((a * a).sum()), a)
    assert np.allclose(grad, [2.0, -4.0], atol=1e-8)
    assert np.array_equal(a, [1.0, -2.0])


def test_relative_error_floor():
    assert relative_error(0.0, 1e-11) < 1e-4
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


# -- tensor files ----------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_roundtrip_bit_exact(tmp_path, rng, dtype):
    a = rng.normal(size=(3, 2, 5)).astype(dtype)
    save_tensor(tmp_path / "a.pft", a)
    b = load_tensor(tmp_path / "a.pft")
    assert b.dtype == dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_tensor_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:8] == b"PFTENSOR"
    assert np.frombuffer(buf[8:24], dtype="<u4").tolist() == [2, 2, 3, 4]
    assert len(buf) == 24 + 6 * 4


def test_truncated_tensor_is_integrity_error():
    buf = encode_tensor(np.ones(10))
    with pytest.raises(IntegrityError):
        decode_tensor(buf[:-3])
    with pytest.raises(IntegrityError):
        decode_tensor(b"NOTATENSOR" + buf[10:])
