"""Oracle tests for the tensor primitives: every forward op is compared with
an independent straight-line/naive-loop computation, and every differentiable
op passes central-difference gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mra import nn
from mra.gradcheck import grad_check
from mra.tensor import (ACTIVATIONS, NumericError, ShapeError, Tensor,
                        activation, add, concat, conv2d, cross_entropy, gelu,
                        hsigmoid, index_rows, interpolate_bilinear, layer_norm,
                        matmul, mul, reduce_mean, reduce_sum, relu, reshape,
                        sigmoid, softmax, spatial_mean, tanh, transpose)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- convolution ---------------------------------------------------------------

def naive_conv2d(x, w, stride=1, padding=0):
    h, ww, cin = x.shape
    k, _, _, cout = w.shape
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                for b in range(k):
                    for c in range(cin):
                        for o in range(cout):
                            out[i, j, o] += (x[i * stride + a, j * stride + b, c]
                                             * w[a, b, c, o])
    return out


def test_conv2d_identity_kernel():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(3, 3, 1))
    k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    assert np.array_equal(conv2d(x, k).data, x.data)


def test_conv2d_shape_arithmetic():
    x = Tensor(np.zeros((4, 4, 1), dtype=np.float32))
    k = Tensor(np.zeros((2, 2, 1, 1), dtype=np.float32))
    assert conv2d(x, k, stride=2).shape == (2, 2, 1)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_loop(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    want = naive_conv2d(x, w, stride, padding)
    assert np.max(np.abs(got - want)) <= 1e-6


def test_conv2d_channel_mismatch_is_shape_error():
    x = Tensor(np.zeros((4, 4, 2), dtype=np.float32))
    k = Tensor(np.zeros((3, 3, 3, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, k)


def test_conv2d_invalid_stride_and_oversized_kernel():
    x = Tensor(np.zeros((4, 4, 1), dtype=np.float32))
    k = Tensor(np.zeros((3, 3, 1, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, k, stride=0)
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((5, 5, 1, 1), dtype=np.float32)))


# -- matmul and attention ------------------------------------------------------

def test_matmul_matches_naive_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((6, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(6):
                want[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - want)) <= 1e-6


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def naive_attention(x, att, causal):
    """Direct per-head softmax attention with explicit loops over heads."""
    n, d = x.shape
    h, dh = att.heads, d // att.heads

    def lin(layer, v):
        return v @ layer.weight.data + layer.bias.data

    q = lin(att.wq, x).reshape(n, h, dh)
    k = lin(att.wk, x).reshape(n, h, dh)
    v = lin(att.wv, x).reshape(n, h, dh)
    out = np.zeros((n, h, dh))
    for head in range(h):
        scores = q[:, head] @ k[:, head].T / math.sqrt(dh)
        if causal:
            scores = scores + np.triu(np.full((n, n), -1e9), k=1)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        out[:, head] = p @ v[:, head]
    return lin(att.wo, out.reshape(n, d))


@pytest.mark.parametrize("causal", [True, False])
def test_attention_matches_naive_loop(causal):
    rng = np.random.default_rng(2)
    att = nn.CausalSelfAttention(8, 2, rng, causal=causal)
    x = rng.standard_normal((5, 8))
    got = att(Tensor(x)).data
    assert np.max(np.abs(got - naive_attention(x, att, causal))) <= 1e-6


def test_causal_attention_ignores_future_tokens():
    rng = np.random.default_rng(3)
    att = nn.CausalSelfAttention(8, 2, rng, causal=True)
    x = rng.standard_normal((6, 8)).astype(np.float32)
    y1 = att(Tensor(x)).data
    x2 = x.copy()
    x2[-1] += 5.0  # only the last position changes
    y2 = att(Tensor(x2)).data
    assert np.allclose(y1[:-1], y2[:-1])


# -- activations ---------------------------------------------------------------

def test_tanh_and_sigmoid_at_zero():
    z = Tensor(np.zeros(3))
    assert np.array_equal(tanh(z).data, np.zeros(3))
    assert np.array_equal(sigmoid(z).data, np.full(3, 0.5))


def test_gelu_matches_numerical_integration():
    from scipy.integrate import quad
    x = 1.0
    cdf, _ = quad(lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi),
                  -50.0, x)
    got = float(gelu(Tensor(np.array(x))).data)
    assert abs(got - x * cdf) <= 1e-9


def test_hsigmoid_piecewise_values():
    x = Tensor(np.array([-4.0, -3.0, 0.0, 3.0, 4.0]))
    assert np.allclose(hsigmoid(x).data, [0.0, 0.0, 0.5, 1.0, 1.0])


def test_relu_and_unsupported_kind():
    x = Tensor(np.array([-1.0, 2.0]))
    assert np.array_equal(relu(x).data, [0.0, 2.0])
    with pytest.raises(ValueError):
        activation(x, "swish")


# -- bilinear interpolation ----------------------------------------------------

def test_bilinear_identity_resize():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 2, 3)
    assert np.array_equal(interpolate_bilinear(x, 2, 2).data, x.data)


def test_bilinear_constant_grid():
    x = Tensor(np.full((4, 4, 2), 3.25))
    out = interpolate_bilinear(x, 7, 7)
    assert np.allclose(out.data, 3.25)


def naive_bilinear(x, th, tw):
    h, w, c = x.shape
    out = np.zeros((th, tw, c))
    for i in range(th):
        for j in range(tw):
            fy = (i + 0.5) * h / th - 0.5
            fx = (j + 0.5) * w / tw - 0.5
            y0, x0 = math.floor(fy), math.floor(fx)
            dy, dx = fy - y0, fx - x0
            for (yy, wy) in ((y0, 1 - dy), (y0 + 1, dy)):
                for (xx, wx) in ((x0, 1 - dx), (x0 + 1, dx)):
                    yc = min(max(yy, 0), h - 1)
                    xc = min(max(xx, 0), w - 1)
                    out[i, j] += wy * wx * x[yc, xc]
    return out


def test_bilinear_matches_per_pixel_formula():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
    got = interpolate_bilinear(Tensor(x), 4, 4).data
    assert np.max(np.abs(got - naive_bilinear(x, 4, 4))) <= 1e-6
    rng = np.random.default_rng(5)
    y = rng.standard_normal((3, 5, 2))
    got = interpolate_bilinear(Tensor(y), 7, 4).data
    assert np.max(np.abs(got - naive_bilinear(y, 7, 4))) <= 1e-6


# -- normalization, softmax, losses --------------------------------------------

def test_layer_norm_matches_direct_formula():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    got = layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    want = (x - mu) / np.sqrt(var + 1e-5) * gain + bias
    assert np.max(np.abs(got - want)) <= 1e-5


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    p = softmax(rand(rng, 5, 9)).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p > 0)


def test_cross_entropy_matches_manual_nll():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    got = float(cross_entropy(Tensor(logits), targets).data)
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    want = -np.log(p[np.arange(4), targets]).mean()
    assert abs(got - want) <= 1e-6


def test_cross_entropy_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3, 4))), np.array([0, 1]))


def test_cross_entropy_nonfinite_logits_raise():
    bad = np.array([[np.inf, 0.0]])
    with pytest.raises(NumericError):
        cross_entropy(Tensor(bad), np.array([0]))


def test_embedding_lookup_and_scatter_gradient():
    table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3),
                   requires_grad=True)
    idx = np.array([1, 1, 3])
    out = index_rows(table, idx)
    assert np.array_equal(out.data, table.data[idx])
    reduce_sum(out).backward()
    want = np.zeros((4, 3))
    want[1] = 2.0
    want[3] = 1.0
    assert np.array_equal(table.grad, want)


def test_spatial_mean_matches_numpy():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 5, 4))
    assert np.allclose(spatial_mean(Tensor(x)).data, x.mean((0, 1)), atol=1e-6)


# -- gradient checks over every primitive --------------------------------------

def _check(loss_fn, params, seed):
    reports = grad_check(loss_fn, params, step=1e-4, tol=1e-3, seed=seed)
    failing = [r for r in reports if not r.passed]
    assert not failing, failing


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_primitives(seed):
    rng = np.random.default_rng(seed)
    p = {
        "a": Tensor(rng.standard_normal((3, 4))),
        "b": Tensor(rng.standard_normal((4, 5))),
        "x": Tensor(rng.standard_normal((2, 3, 2))),
        "k": Tensor(rng.standard_normal((3, 3, 2, 2)) * 0.5),
        "gain": Tensor(rng.standard_normal(5)),
        "bias": Tensor(rng.standard_normal(5)),
    }

    def loss_fn(q):
        y = matmul(q["a"], q["b"])
        y = layer_norm(y, q["gain"], q["bias"])
        y = gelu(y)
        z = conv2d(q["x"], q["k"], stride=1, padding=1)
        z = interpolate_bilinear(z, 3, 5)
        w = concat([tanh(z), sigmoid(z)], axis=-1)
        s = softmax(reshape(w, (6, 10)))
        return (reduce_sum(mul(y, y)) + reduce_mean(s * s)
                + reduce_sum(spatial_mean(z)))

    _check(loss_fn, p, seed)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_cross_entropy_and_embedding(seed):
    rng = np.random.default_rng(seed)
    p = {"emb": Tensor(rng.standard_normal((6, 4))),
         "w": Tensor(rng.standard_normal((4, 5)))}
    targets = rng.integers(0, 5, size=3)
    idx = rng.integers(0, 6, size=3)

    def loss_fn(q):
        return cross_entropy(matmul(index_rows(q["emb"], idx), q["w"]),
                             targets)

    _check(loss_fn, p, seed)


@pytest.mark.parametrize("kind", ACTIVATIONS)
def test_grad_each_activation(kind):
    rng = np.random.default_rng(42)
    # keep away from the hsigmoid/relu kinks where FD is one-sided
    x = rng.uniform(0.2, 2.0, size=12) * np.sign(rng.standard_normal(12))
    p = {"x": Tensor(x)}
    _check(lambda q: reduce_sum(mul(activation(q["x"], kind),
                                    activation(q["x"], kind))), p, 0)


def test_grad_attention_block():
    rng = np.random.default_rng(3)
    block = nn.TransformerBlock(8, 2, rng, causal=True)
    params = {k: v.astype(np.float64) for k, v in block.params("blk").items()}
    for name, t in params.items():
        # rebind the float64 copies into the module so they are the graph nodes
        obj = block
        *path, leaf = name.split(".")[1:]
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, leaf, t)
    x = Tensor(rng.standard_normal((4, 8)))
    _check(lambda q: reduce_sum(mul(block(x), block(x))), params, 0)


def test_gradcheck_quadratic_analytic():
    p = {"v": Tensor(np.array([1.0, -2.0, 3.0]))}
    reports = grad_check(lambda q: reduce_sum(mul(q["v"], q["v"])), p,
                         step=1e-4, tol=1e-3)
    assert reports[0].passed
    assert np.allclose(p["v"].grad, [2.0, -4.0, 6.0], rtol=1e-8)


# -- determinism and finiteness ------------------------------------------------

def test_ops_are_deterministic():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((6, 6, 3))
    k = rng.standard_normal((3, 3, 3, 2))
    a = conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
    b = conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
    assert np.array_equal(a, b)


def test_float64_inputs_stay_float64():
    x = Tensor(np.zeros((2, 2), dtype=np.float64))
    assert gelu(x).dtype == np.float64
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32


# -- property-based checks -----------------------------------------------------

small_arrays = st.integers(1, 4).flatmap(
    lambda n: st.lists(st.floats(-10, 10, width=32), min_size=n * n,
                       max_size=n * n).map(
        lambda v: np.array(v, dtype=np.float32).reshape(n, n)))


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_softmax_normalized_property(x):
    p = softmax(Tensor(x)).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_hsigmoid_range_property(x):
    y = hsigmoid(Tensor(x)).data
    assert np.all((y >= 0.0) & (y <= 1.0))


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_add_commutes_and_broadcast_grad_shapes(x):
    a = Tensor(x, requires_grad=True)
    b = Tensor(np.float32(1.5), requires_grad=True)
    assert np.array_equal(add(a, b).data, add(b, a).data)
    reduce_sum(add(a, b)).backward()
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape
    assert float(b.grad) == x.size


@settings(max_examples=50, deadline=None)
@given(small_arrays)
def test_transpose_roundtrip_property(x):
    t = Tensor(x)
    assert np.array_equal(transpose(transpose(t, (1, 0)), (1, 0)).data, x)
