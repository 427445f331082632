import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacrange.autodiff import tensor as T
from lacrange.autodiff.checkpoint import load_weights, save_weights
from lacrange.autodiff.gradcheck import check_gradients
from lacrange.autodiff.layers import (
    LayerParams,
    apply_batchnorm,
    apply_conv2d,
    apply_mlp,
    attend_cross,
    attention_proj_params,
    batchnorm_params,
    conv_params,
    mlp_params,
    pool_global,
)
from lacrange.autodiff.tensor import Tensor
from lacrange.errors import ContractError, DimensionError, FormatError, InvalidInputError


def away_from_kinks(rng, shape, lo=0.2, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# ---------------------------------------------------------------- oracles

def mlp_oracle(w, b, x, act):
    out = []
    for row in x:
        vals = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += row[i] * w[i, j]
            if act == "leaky_relu":
                s = s if s > 0 else 0.01 * s
            elif act == "sigmoid":
                s = 1.0 / (1.0 + math.exp(-s))
            vals.append(s)
        out.append(vals)
    return np.array(out)


def conv_oracle(w, b, x):
    co, ci, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    out = np.zeros((co, h, wd))
    for o in range(co):
        for y in range(h):
            for xx in range(wd):
                s = b[o]
                for c in range(ci):
                    for i in range(k):
                        for j in range(k):
                            yy, xj = y + i - p, xx + j - p
                            if 0 <= yy < h and 0 <= xj < wd:
                                s += w[o, c, i, j] * x[c, yy, xj]
                out[o, y, xx] = s
    return out


def attention_oracle(q, k, v, w, b):
    d = q.shape[1]
    out = []
    for qi in q:
        logits = [sum(qi[t] * kj[t] for t in range(d)) / math.sqrt(d) for kj in k]
        m = max(logits)
        e = [math.exp(z - m) for z in logits]
        s = sum(e)
        wts = [x / s for x in e]
        ctx = [sum(wts[j] * v[j, c] for j in range(len(k))) for c in range(v.shape[1])]
        out.append([b[o] + sum(ctx[c] * w[c, o] for c in range(v.shape[1])) for o in range(w.shape[1])])
    return np.array(out)


# ---------------------------------------------------------------- mlp

def test_mlp_zero_weights_give_zero():
    rng = np.random.default_rng(0)
    p = mlp_params(4, 3, rng)
    for w in p.weights:
        w.data[:] = 0
    out = apply_mlp(p, rng.normal(size=(5, 4)))
    assert np.all(out.data == 0)


def test_mlp_identity():
    p = LayerParams("mlp", [Tensor(np.eye(3)), Tensor(np.zeros(3))], {"activation": "linear"})
    assert np.array_equal(apply_mlp(p, np.array([1.0, 2.0, 3.0])).data, [1, 2, 3])


@pytest.mark.parametrize("act", ["linear", "leaky_relu", "sigmoid"])
def test_mlp_matches_scalar_loop(act):
    rng = np.random.default_rng(1)
    p = mlp_params(3, 2, rng, activation=act)
    x = rng.normal(size=(6, 3))
    got = apply_mlp(p, x).data
    want = mlp_oracle(p.weights[0].data, p.weights[1].data, x, act)
    assert np.max(np.abs(got - want)) < 1e-12


def test_mlp_shape_mismatch():
    p = mlp_params(3, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        apply_mlp(p, np.ones((2, 4)))


# ---------------------------------------------------------------- conv

def test_conv1x1_identity():
    x = np.random.default_rng(2).normal(size=(3, 4, 5))
    p = LayerParams("conv1x1", [Tensor(np.eye(3).reshape(3, 3, 1, 1)), Tensor(np.zeros(3))])
    assert np.array_equal(apply_conv2d(p, x).data, x)


def test_conv3x3_padded_sum():
    p = LayerParams("conv3x3", [Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))])
    out = apply_conv2d(p, np.ones((1, 3, 3))).data[0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[2, 2] == 4 and out[0, 1] == 6


def test_conv3x3_matches_nested_loops():
    rng = np.random.default_rng(3)
    p = conv_params(3, 4, 3, rng)
    x = rng.normal(size=(3, 5, 6))
    got = apply_conv2d(p, x).data
    want = conv_oracle(p.weights[0].data, p.weights[1].data, x)
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_channel_mismatch():
    p = conv_params(3, 4, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        apply_conv2d(p, np.ones((2, 4, 4)))


def test_conv1x1_equals_per_pixel_mlp():
    rng = np.random.default_rng(4)
    conv = conv_params(5, 3, 1, rng)
    x = rng.normal(size=(5, 4, 7))
    w = conv.weights[0].data.reshape(3, 5)
    mlp = LayerParams("mlp", [Tensor(w.T.copy()), Tensor(conv.weights[1].data.copy())],
                      {"activation": "linear"})
    per_pixel = apply_mlp(mlp, x.reshape(5, -1).T).data.T.reshape(3, 4, 7)
    assert np.max(np.abs(apply_conv2d(conv, x).data - per_pixel)) < 1e-12


# ---------------------------------------------------------------- pooling / upsampling

def test_pool_constant():
    x = np.full((3, 2, 4), 7.0)
    for axis in ("space", "channel"):
        for mode in ("avg", "max"):
            assert np.all(pool_global(x, axis, mode).data == 7)


def test_pool_arithmetic_and_shapes():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert pool_global(x, "space", "avg").data[0] == 2.5
    assert pool_global(x, "space", "max").data[0] == 4
    y = np.random.default_rng(0).normal(size=(3, 2, 5))
    assert pool_global(y, "space", "avg_and_max").shape == (6,)
    assert pool_global(y, "channel", "avg_and_max").shape == (2, 2, 5)


def test_pool_matches_scalar_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 5))
    sp = pool_global(x, "space", "avg_and_max").data
    ch = pool_global(x, "channel", "avg_and_max").data
    for c in range(4):
        vals = [x[c, i, j] for i in range(3) for j in range(5)]
        assert abs(sp[c] - sum(vals) / len(vals)) < 1e-12
        assert sp[4 + c] == max(vals)
    for i in range(3):
        for j in range(5):
            vals = [x[c, i, j] for c in range(4)]
            assert abs(ch[0, i, j] - sum(vals) / 4) < 1e-12
            assert ch[1, i, j] == max(vals)


def test_upsample_cases():
    const = T.upsample_bilinear(np.full((2, 3, 4), 1.5), 6, 9).data
    assert const.shape == (2, 6, 9) and np.allclose(const, 1.5, atol=1e-14)
    one = T.upsample_bilinear(np.array([[[4.0]]]), 3, 5).data
    assert np.all(one == 4.0)
    x = np.array([[[1.0, 2.0], [3.0, 8.0]]])
    up = T.upsample_bilinear(x, 3, 3).data[0]
    assert up[1, 1] == pytest.approx(3.5, abs=1e-14)
    assert up[0, 0] == 1 and up[0, 2] == 2 and up[2, 0] == 3 and up[2, 2] == 8
    with pytest.raises(DimensionError):
        T.upsample_bilinear(x, 0, 3)


# ---------------------------------------------------------------- attention

def test_attention_single_key():
    rng = np.random.default_rng(6)
    proj = attention_proj_params(3, 2, rng)
    v = rng.normal(size=(1, 3))
    out = attend_cross(rng.normal(size=(4, 5)), rng.normal(size=(1, 5)), v, proj).data
    want = apply_mlp(proj, v).data
    assert np.allclose(out, np.repeat(want, 4, axis=0), atol=1e-14)


def test_attention_identical_keys_uniform():
    rng = np.random.default_rng(7)
    proj = attention_proj_params(3, 3, rng)
    k = np.repeat(rng.normal(size=(1, 4)), 5, axis=0)
    v = rng.normal(size=(5, 3))
    out = attend_cross(rng.normal(size=(2, 4)), k, v, proj).data
    want = apply_mlp(proj, v.mean(axis=0, keepdims=True)).data
    assert np.max(np.abs(out - want)) < 1e-12


def test_attention_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    proj = attention_proj_params(4, 3, rng)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    got = attend_cross(q, k, v, proj).data
    want = attention_oracle(q, k, v, proj.weights[0].data, proj.weights[1].data)
    assert np.max(np.abs(got - want)) < 1e-12


def test_attention_empty_keys():
    proj = attention_proj_params(2, 2, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        attend_cross(np.ones((1, 2)), np.ones((0, 2)), np.ones((0, 2)), proj)


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_inference_identity():
    p = batchnorm_params(3)
    x = np.random.default_rng(9).normal(size=(3, 4, 4))
    out = apply_batchnorm(p, x, training=False).data
    scale = 1 / math.sqrt(1 + 1e-5)
    assert np.allclose(out, x * scale, atol=1e-15)
    assert np.max(np.abs(out - x)) <= np.max(np.abs(x)) * abs(1 - scale) + 1e-15


def test_batchnorm_running_stats_shape():
    p = batchnorm_params(4)
    apply_batchnorm(p, np.random.default_rng(0).normal(size=(10, 4)), training=True)
    assert p.buffers["running_mean"].shape == (4,) and p.buffers["running_var"].shape == (4,)


# ---------------------------------------------------------------- backward

def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, [1, 1, 1])
    x.grad = None
    T.backward(0.5 * T.sum_(x * x))
    assert np.array_equal(x.grad, x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(10)
    s = T.softmax(rng.normal(scale=30, size=(50, 9)), axis=1).data
    assert np.all(s >= 0) and np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12


def test_masked_softmax_zero_rows():
    out = T.masked_softmax(np.ones((2, 3)), np.array([[True, False, True], [False] * 3])).data
    assert np.allclose(out[0], [0.5, 0, 0.5]) and np.all(out[1] == 0)


# ---------------------------------------------------------------- gradient checks

def test_gradcheck_sum_of_squares():
    x = Tensor(np.random.default_rng(11).normal(size=(4, 3)))
    assert check_gradients(lambda t: T.sum_(t * t), x) < 1e-9


def test_gradcheck_mlp_sigmoid():
    rng = np.random.default_rng(12)
    p = mlp_params(3, 4, rng)
    x = Tensor(away_from_kinks(rng, (5, 3)))
    err = check_gradients(lambda t: T.sum_(T.sigmoid(apply_mlp(p, t))), x)
    assert err < 1e-6
    err_w = check_gradients(lambda w, b: T.sum_(T.sigmoid(apply_mlp(p, x))), p.weights)
    assert err_w < 1e-6


@pytest.mark.parametrize("kind", ["conv1x1", "conv3x3"])
def test_gradcheck_conv(kind):
    rng = np.random.default_rng(13)
    p = conv_params(2, 3, int(kind[-1]), rng)
    x = Tensor(rng.normal(size=(2, 4, 5)))
    target = rng.normal(size=(3, 4, 5))
    f = lambda t: T.sum_((apply_conv2d(p, t) - target) ** 2)
    assert check_gradients(f, x) < 1e-6
    assert check_gradients(lambda w, b: f(x), p.weights) < 1e-6


def test_gradcheck_batchnorm_and_ops():
    rng = np.random.default_rng(14)
    p = batchnorm_params(3)
    x = Tensor(rng.normal(size=(3, 4, 4)))
    tgt = rng.normal(size=(3, 4, 4))
    assert check_gradients(lambda t: T.sum_((apply_batchnorm(p, t) - tgt) ** 2), x) < 1e-6
    assert check_gradients(lambda t: T.sum_(T.upsample_bilinear(t, 7, 9) * tgt[:, :1, :1]), x) < 1e-8
    assert check_gradients(lambda t: T.sum_(T.avg_pool2(t) ** 2), x) < 1e-8
    y = Tensor(rng.normal(size=(6, 5)))
    assert check_gradients(lambda t: T.sum_(T.log_softmax(t, axis=1) * tgt[0, 0, 0]), y) < 1e-8
    assert check_gradients(lambda t: T.sum_(T.norm(t, axis=1)), y) < 1e-8
    assert check_gradients(lambda t: T.sum_(T.max_(t, axis=0) * np.arange(5)), y) < 1e-8


def test_gradcheck_attention():
    rng = np.random.default_rng(15)
    proj = attention_proj_params(3, 2, rng)
    q, k, v = (Tensor(rng.normal(size=s)) for s in [(2, 4), (5, 4), (5, 3)])
    f = lambda a, b, c: T.sum_(T.sigmoid(attend_cross(a, b, c, proj)))
    assert check_gradients(f, [q, k, v]) < 1e-6


def test_gradient_accumulates_for_reused_tensor():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum_(x * x + x))
    assert x.grad[0] == pytest.approx(5.0)


# ---------------------------------------------------------------- properties

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_conv1x1_mlp_equivalence_property(cin, cout, n, seed):
    rng = np.random.default_rng(seed)
    conv = conv_params(cin, cout, 1, rng)
    x = rng.normal(size=(cin, n, 3))
    w = conv.weights[0].data.reshape(cout, cin)
    mlp = LayerParams("mlp", [Tensor(w.T.copy()), Tensor(conv.weights[1].data.copy())],
                      {"activation": "linear"})
    per_pixel = apply_mlp(mlp, x.reshape(cin, -1).T).data.T.reshape(cout, n, 3)
    assert np.max(np.abs(apply_conv2d(conv, x).data - per_pixel)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_softmax_property(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(rows, cols))
    s = T.softmax(x, axis=1).data
    assert np.all(s >= 0) and np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    tensors = {"a.w0": rng.normal(size=(3, 2)), "bé.w1": rng.normal(size=(4,)), "s": np.array(2.5)}
    path = tmp_path / "w.rfw"
    save_weights(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"RFW1"
    assert int.from_bytes(raw[4:8], "little") == 4
    back = load_weights(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        load_weights(p)


def test_check_finite():
    with pytest.raises(Exception):
        T.check_finite(Tensor(np.array([np.nan])))
