import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baris import bkt, ops
from baris.autodiff import GraphError, Var, backward, no_grad
from baris.gradcheck import grad_check
from baris.nn import DSConv

finite = st.floats(-10, 10, allow_nan=False, width=64)


def brute_conv(x, w, b=None, stride=(1, 1), padding=(0, 0), groups=1):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, oh, ow))
    per = o // groups
    for ni in range(n):
        for oi in range(o):
            g = oi // per
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, g * cg:(g + 1) * cg, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    out[ni, oi, i, j] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def pixel_unshuffle(y, r):
    n, c, h, w = y.shape
    return y.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def bilinear_oracle(x, out_h, out_w):
    """Half-pixel bilinear resize with edge clamping, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            xx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(xx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ly, lx = y - y0, xx - x0
            out[:, :, i, j] = ((1 - ly) * (1 - lx) * x[:, :, y0, x0] + (1 - ly) * lx * x[:, :, y0, x1]
                               + ly * (1 - lx) * x[:, :, y1, x0] + ly * lx * x[:, :, y1, x1])
    return out


# ---------------------------------------------------------------- conv2d

def test_conv_identity_1x1(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(ops.conv2d(Var(x), Var(w)).value, x)


def test_depthwise_all_ones_kernel():
    out = ops.conv2d(Var(np.ones((1, 1, 3, 3))), Var(np.ones((1, 1, 3, 3))), padding=1, groups=1).value
    assert out[0, 0, 1, 1] == 9.0 and out[0, 0, 0, 0] == 4.0
    assert np.array_equal(out, brute_conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=(1, 1)))


def test_asymmetric_strip_pair_keeps_shape(rng):
    x = Var(rng.normal(size=(1, 4, 5, 7)))
    v = ops.conv2d(x, Var(rng.normal(size=(4, 1, 3, 1))), padding=(1, 0), groups=4)
    hz = ops.conv2d(v, Var(rng.normal(size=(4, 1, 1, 3))), padding=(0, 1), groups=4)
    assert hz.shape == x.shape


@pytest.mark.parametrize("stride,padding,groups,kernel", [
    ((1, 1), (1, 1), 1, (3, 3)),
    ((2, 2), (1, 1), 1, (3, 3)),
    ((1, 2), (2, 0), 2, (5, 1)),
    ((2, 1), (0, 1), 4, (1, 3)),
    ((1, 1), (3, 3), 4, (7, 7)),
])
def test_conv_matches_brute_force(rng, stride, padding, groups, kernel):
    x = rng.normal(size=(2, 4, 7, 6))
    out_c = 4 if groups == 4 else 6
    w = rng.normal(size=(out_c, 4 // groups) + kernel)
    b = rng.normal(size=out_c)
    got = ops.conv2d(Var(x), Var(w), Var(b), stride=stride, padding=padding, groups=groups).value
    np.testing.assert_allclose(got, brute_conv(x, w, b, stride, padding, groups), rtol=1e-12, atol=1e-12)


@given(side=st.integers(3, 8), c=st.integers(1, 4), o=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_dsconv_matches_oracle(side, c, o, seed):
    r = np.random.default_rng(seed)
    m = DSConv(c, o, r, 3, np.float64)
    x = r.normal(size=(1, c, side, side))
    dw = brute_conv(x, m.dw.weight.value, m.dw.bias.value, padding=(1, 1), groups=c)
    ref = brute_conv(dw, m.pw.weight.value, m.pw.bias.value)
    np.testing.assert_allclose(m(Var(x)).value, ref, rtol=1e-10, atol=1e-10)


def test_conv_rejects_bad_channels(rng):
    with pytest.raises(ops.ShapeError):
        ops.conv2d(Var(rng.normal(size=(1, 3, 4, 4))), Var(rng.normal(size=(2, 2, 3, 3))))


# ---------------------------------------------------------------- pooling and resampling

def test_max_pool_basics():
    x = Var(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ops.max_pool2d(x, 2).value.item() == 4.0
    assert np.array_equal(ops.max_pool2d(x, 1).value, x.value)


@given(arrays(np.float64, (1, 2, 8, 8), elements=finite), st.sampled_from([1, 2, 4]))
def test_pool_upsample_pool_identity(x, s):
    p = ops.max_pool2d(Var(x), s)
    again = ops.max_pool2d(ops.nearest_upsample(p, s), s)
    assert np.array_equal(again.value, p.value)


def test_max_pool_tie_goes_to_first_index():
    x = Var(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(ops.sum(ops.max_pool2d(x, 2)))
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_rejects_non_divisible(rng):
    with pytest.raises(ops.ShapeError):
        ops.max_pool2d(Var(rng.normal(size=(1, 1, 6, 6))), 4)


def test_upsample_basics():
    assert np.array_equal(ops.nearest_upsample(Var(np.full((1, 1, 1, 1), 4.0)), 2).value, np.full((1, 1, 2, 2), 4.0))
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    assert np.array_equal(ops.nearest_upsample(Var(x), 1).value, x)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_upsample_adjoint_of_sum_pool(seed, f):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 3, 4))
    y = r.normal(size=(1, 2, 3 * f, 4 * f))
    lhs = np.sum(ops.nearest_upsample(Var(x), f).value * y)
    sum_pool = y.reshape(1, 2, 3, f, 4, f).sum(axis=(3, 5))
    assert lhs == pytest.approx(np.sum(x * sum_pool), rel=1e-12)


def test_pixel_shuffle_layout():
    x = np.stack([np.full((2, 2), k, float) for k in range(4)])[None]
    y = ops.pixel_shuffle(Var(x), 2).value
    assert y.shape == (1, 1, 4, 4)
    for i in (0, 2):
        for j in (0, 2):
            assert np.array_equal(y[0, 0, i:i + 2, j:j + 2], [[0, 1], [2, 3]])


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]), st.integers(1, 3))
def test_pixel_shuffle_bijection(seed, r, c):
    x = np.random.default_rng(seed).normal(size=(2, c * r * r, 3, 2))
    assert np.array_equal(pixel_unshuffle(ops.pixel_shuffle(Var(x), r).value, r), x)


def test_roi_align_constant_and_identity(rng):
    box = (0.0, 0.0, 1.0, 1.0)
    const = Var(np.full((1, 2, 5, 7), 3.25))
    assert np.allclose(ops.roi_align(const, box, 9, 4).value, 3.25, rtol=0, atol=1e-15)
    x = rng.normal(size=(2, 3, 6, 5))
    assert np.array_equal(ops.roi_align(Var(x), box, 6, 5).value, x)


@pytest.mark.parametrize("h,w,oh,ow", [(4, 4, 8, 8), (3, 5, 6, 10), (6, 6, 3, 3), (5, 4, 7, 9)])
def test_roi_align_full_box_matches_bilinear(rng, h, w, oh, ow):
    x = rng.normal(size=(1, 2, h, w))
    np.testing.assert_allclose(ops.resize_bilinear(Var(x), oh, ow).value, bilinear_oracle(x, oh, ow), atol=1e-12)


def test_roi_align_sub_box_sampling(rng):
    x = rng.normal(size=(1, 1, 8, 8))
    # box covering pixels 2..5 exactly: cell centres coincide with pixel centres
    got = ops.roi_align(Var(x), (2 / 8, 2 / 8, 6 / 8, 6 / 8), 4, 4).value
    np.testing.assert_allclose(got, x[:, :, 2:6, 2:6], atol=1e-12)


# ---------------------------------------------------------------- normalisation and activations

def test_layer_norm_cases():
    one, zero = Var(np.ones(2)), Var(np.zeros(2))
    assert np.array_equal(ops.layer_norm(Var(np.full((3, 2), 5.0)), one, zero).value, np.zeros((3, 2)))
    np.testing.assert_allclose(ops.layer_norm(Var(np.array([[1.0, 3.0]])), one, zero, eps=0.0).value, [[-1, 1]])


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50, allow_nan=False)))
def test_layer_norm_moments(x):
    if np.ptp(x, axis=1).min() < 1e-3:
        return
    g, b = np.linspace(0.5, 2, 6), np.linspace(-1, 1, 6)
    y = ops.layer_norm(Var(x), Var(np.ones(6)), Var(np.zeros(6)), eps=1e-12).value
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-6)
    affine = ops.layer_norm(Var(x), Var(g), Var(b), eps=1e-12).value
    np.testing.assert_allclose(affine, y * g + b, atol=1e-12)


def test_activation_values():
    assert ops.sigmoid(Var(np.array(0.0))).item() == 0.5
    assert ops.relu(Var(np.array(-2.0))).item() == 0.0
    assert ops.gelu(Var(np.array(0.0))).item() == 0.0
    assert ops.gelu(Var(np.array(1.0))).item() == pytest.approx(0.8413447460685429, abs=1e-15)
    np.testing.assert_allclose(ops.softmax(Var(np.full(5, 2.0))).value, np.full(5, 0.2))


@given(arrays(np.float64, (3, 4), elements=st.floats(-300, 300, allow_nan=False)), st.sampled_from([0, 1]))
def test_softmax_normalised(x, axis):
    y = ops.softmax(Var(x), axis=axis).value
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)


def test_linear_cases():
    x = Var(np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(ops.linear(x, Var(np.eye(3)), Var(np.zeros(3))).value, x.value)
    out = ops.linear(x, Var(np.ones((2, 3))), Var(np.array([0.5, -1.0]))).value
    assert np.array_equal(out, [[6.5, 5.0]])


def test_linear_weight_gradient_fd(rng):
    x = Var(rng.normal(size=(4, 3)))
    r = Var(rng.normal(size=(4, 2)))
    assert grad_check(lambda w: ops.sum(ops.mul(ops.linear(x, w), r)), rng.normal(size=(2, 3))) < 1e-4


def test_reductions_and_concat(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    assert np.allclose(ops.average([Var(x)] * 3).value, x, rtol=0, atol=1e-15)
    assert np.allclose(ops.global_avg_pool(Var(np.full((1, 2, 4, 5), 1.5))).value, 1.5, rtol=0, atol=1e-15)
    cat = ops.concat([Var(np.zeros((1, 2, 4, 4))), Var(np.zeros((1, 3, 4, 4)))], axis=1)
    assert cat.shape == (1, 5, 4, 4)


def test_broadcasting_is_an_error(rng):
    with pytest.raises(ops.ShapeError):
        ops.add(Var(rng.normal(size=(2, 3))), Var(rng.normal(size=(3,))))
    assert ops.add(Var(np.ones((2, 3))), 2.0).value.sum() == 18.0


def test_bce_cases():
    assert ops.bce_with_logits(Var(np.zeros(4)), np.full(4, 0.5)).item() == pytest.approx(np.log(2), abs=1e-15)
    big = ops.bce_with_logits(Var(np.array([40.0, -40.0])), np.array([1.0, 0.0])).item()
    assert np.isfinite(big) and big < 1e-15
    r = np.random.default_rng(7)
    x, t = r.normal(size=(2, 2)), r.uniform(size=(2, 2))
    direct = np.mean(-(t * np.log(1 / (1 + np.exp(-x))) + (1 - t) * np.log(1 - 1 / (1 + np.exp(-x)))))
    assert abs(ops.bce_with_logits(Var(x), t).item() - direct) < 1e-10


# ---------------------------------------------------------------- autodiff semantics

def test_square_sum_gradient_exact(rng):
    x = Var(rng.normal(size=(3, 4)), requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.value)


def test_sigmoid_chain_gradient(rng):
    x = Var(rng.normal(size=5), requires_grad=True)
    backward(ops.sum(ops.sigmoid(x)))
    s = 1 / (1 + np.exp(-x.value))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-14)


def test_shared_input_branches_accumulate(rng):
    x0 = rng.normal(size=(3, 3))
    f = lambda v: ops.add(ops.sum(ops.mul(v, v)), ops.sum(ops.sigmoid(v)))  # noqa: E731
    assert grad_check(f, x0) < 1e-6


def test_second_backward_is_an_error(rng):
    x = Var(rng.normal(size=3), requires_grad=True)
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_frozen_vars_get_no_gradient(rng):
    x = Var(rng.normal(size=3), requires_grad=True)
    w = Var(rng.normal(size=3), requires_grad=False)
    backward(ops.sum(ops.mul(x, w)))
    assert w.grad is None and x.grad is not None
    assert x.grad.shape == x.shape


def test_no_grad_records_nothing(rng):
    x = Var(rng.normal(size=3), requires_grad=True)
    with no_grad():
        y = ops.sum(ops.mul(x, x))
    with pytest.raises(GraphError):
        backward(y)


def test_non_scalar_loss_rejected(rng):
    x = Var(rng.normal(size=3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.mul(x, x))


def test_grad_check_linear_is_tight(rng):
    w = Var(rng.normal(size=(2, 3, 3, 3)))
    err = grad_check(lambda v: ops.sum(ops.conv2d(v, w, padding=1)), rng.normal(size=(1, 3, 5, 5)), eps=1.0)
    assert err < 1e-10


def test_conv_relu_sum_gradient():
    r = np.random.default_rng(3)
    w = Var(r.normal(size=(3, 2, 3, 3)))
    while True:
        x = r.normal(size=(1, 2, 6, 6))
        if np.abs(ops.conv2d(Var(x), w, padding=1).value).min() > 1e-3:
            break
    assert grad_check(lambda v: ops.sum(ops.relu(ops.conv2d(v, w, padding=1))), x) < 1e-4


# ---------------------------------------------------------------- BKT1

@given(st.sampled_from([np.float32, np.float64]),
       st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**32 - 1))
def test_bkt_round_trip(dtype, shape, seed):
    a = np.random.default_rng(seed).normal(size=shape).astype(dtype)
    b = bkt.decode(bkt.encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape and np.array_equal(a, b)


def test_bkt_rejects_garbage():
    with pytest.raises(bkt.FormatError):
        bkt.decode(b"NOPE\x00\x00")
    good = bkt.encode(np.zeros((2, 2), np.float32))
    with pytest.raises(bkt.FormatError):
        bkt.decode(good[:-1])


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": rng.normal(size=4)}
    bkt.save_checkpoint(tmp_path / "ck", tensors, meta={"k": 1})
    back = bkt.load_checkpoint(tmp_path / "ck")
    assert set(back) == set(tensors) and all(np.array_equal(back[k], tensors[k]) for k in tensors)
