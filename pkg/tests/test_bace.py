import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baris import bace, ops
from baris.autodiff import Var, backward
from baris.gradcheck import grad_check, numeric_grad
from baris.gradsuite import spaced

finite = st.floats(-20, 20, allow_nan=False, width=64)
# values on a 2**-30 grid: every block difference is representable, so the
# range/null split reconstructs bit for bit
dyadic = st.integers(-2**34, 2**34).map(lambda k: k * 2.0**-30)
masks = arrays(np.float64, (2, 1, 8, 8), elements=st.sampled_from([0.0, 1.0]))


def loop_range_project(x, s):
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for i in range(0, h, s):
        for j in range(0, w, s):
            out[:, :, i:i + s, j:j + s] = x[:, :, i:i + s, j:j + s].max(axis=(2, 3), keepdims=True)
    return out


def grad_of(fn, x):
    v = Var(x.copy(), requires_grad=True)
    backward(fn(v))
    return v.grad


def test_range_project_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert np.array_equal(bace.range_project(x, 2).value, np.full((1, 1, 2, 2), 4.0))
    assert np.array_equal(bace.range_project(x, 1).value, x)
    assert np.array_equal(bace.null_project(x, 1).value, np.zeros_like(x))


@given(arrays(np.float64, (1, 2, 8, 8), elements=dyadic), st.sampled_from([1, 2, 4]))
def test_range_null_reconstruction_exact(x, s):
    r, n = bace.range_project(x, s).value, bace.null_project(x, s).value
    assert np.array_equal(r + n, x)
    assert np.array_equal(r, loop_range_project(x, s))


@given(arrays(np.float64, (1, 2, 8, 8), elements=finite), st.sampled_from([1, 2, 4]))
def test_range_null_reconstruction_general_floats(x, s):
    # x - r rounds once when x is tiny next to its block max
    r, n = bace.range_project(x, s).value, bace.null_project(x, s).value
    assert np.all(np.abs(r + n - x) <= 2 * np.spacing(np.maximum(np.abs(r), np.abs(x))))


@given(arrays(np.float64, (1, 1, 8, 8), elements=finite), st.sampled_from([1, 2, 4]))
def test_range_project_idempotent_and_pseudo_inverse(x, s):
    r = bace.range_project(x, s)
    assert np.array_equal(bace.range_project(r, s).value, r.value)
    assert np.array_equal(ops.max_pool2d(r, s).value, ops.max_pool2d(Var(x), s).value)


@given(arrays(np.float64, (1, 1, 8, 8), elements=finite), st.sampled_from([2, 4]))
def test_null_project_nonpositive_with_zero_per_block(x, s):
    n = bace.null_project(x, s).value
    assert np.all(n <= 0)
    blocks = n.reshape(1, 1, 8 // s, s, 8 // s, s)
    assert np.all((blocks == 0).any(axis=(3, 5)))


@given(masks, st.sampled_from([1, 2, 4]))
def test_gamma_fixed_point(gt, s):
    assert np.array_equal(bace.refine_gamma(gt, gt, s).value, gt)


@given(arrays(np.float64, (1, 1, 4, 4), elements=finite), masks.map(lambda m: m[:1, :, :4, :4]))
def test_gamma_scale_one_ignores_pred(pred, gt):
    assert np.array_equal(bace.refine_gamma(pred, gt, 1).value, gt)


def test_gamma_all_ones_gt_hand_loop(rng):
    pred = rng.normal(size=(1, 1, 4, 4))
    gt = np.ones_like(pred)
    expected = np.empty_like(pred)
    for i in range(4):
        for j in range(4):
            bi, bj = i // 2 * 2, j // 2 * 2
            expected[0, 0, i, j] = 1 + (pred[0, 0, i, j] - pred[0, 0, bi:bi + 2, bj:bj + 2].max())
    assert np.array_equal(bace.refine_gamma(pred, gt, 2).value, expected)


def test_gamma_gradient_only_through_null_branch(rng):
    pred = Var(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
    gt = Var(rng.integers(0, 2, (1, 1, 4, 4)).astype(float), requires_grad=True)
    backward(ops.sum(bace.refine_gamma(pred, gt, 2)))
    assert gt.grad is None and pred.grad is not None


@given(arrays(np.float64, (2, 1, 4, 4), elements=finite), masks.map(lambda m: m[:, :, :4, :4]))
def test_scale_one_loss_has_zero_gradient(pred, gt):
    g = grad_of(lambda v: bace.bace_loss(v, gt, bace.BaceConfig(scale=1)), pred)
    assert np.array_equal(g, np.zeros_like(pred))
    g_total = grad_of(lambda v: bace.total_loss(v, gt, bace.BaceConfig(scale=1)), pred)
    g_ce = grad_of(lambda v: bace.ce_loss(v, gt), pred)
    assert np.array_equal(g_total, g_ce)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_sums_to_zero_per_block(seed):
    """Each block's gradient balances: the argmax coordinate carries minus the
    sum of the others, because raising every pixel of a block together leaves
    the null component unchanged."""
    r = np.random.default_rng(seed)
    pred = spaced(r, (1, 1, 4, 4), -3, 3)
    gt = r.integers(0, 2, pred.shape).astype(float)
    f = lambda v: bace.bace_loss(v, gt, bace.BaceConfig(scale=2))  # noqa: E731
    g = grad_of(f, pred)
    blocks = g.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    np.testing.assert_allclose(blocks.sum(axis=1), 0, atol=1e-15)
    num = numeric_grad(lambda a: f(Var(a)).item(), pred)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)
    pb = pred.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    arg = pb.argmax(axis=1)
    for k in range(4):
        others = np.delete(blocks[k], arg[k])
        assert blocks[k, arg[k]] == pytest.approx(-others.sum(), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_bace_gradcheck_small(seed):
    r = np.random.default_rng(seed)
    pred = spaced(r, (1, 1, 4, 4), -3, 3)
    gt = r.integers(0, 2, pred.shape).astype(float)
    assert grad_check(lambda v: bace.bace_loss(v, gt, bace.BaceConfig(scale=2)), pred) < 1e-4
    assert grad_check(lambda v: bace.total_loss(v, gt, bace.BaceConfig(scale=2)), pred) < 1e-4


def test_total_loss_lambda(rng):
    pred = rng.normal(size=(3, 1, 8, 8))
    gt = rng.integers(0, 2, pred.shape).astype(float)
    ce = bace.ce_loss(pred, gt).item()
    assert bace.total_loss(pred, gt, bace.BaceConfig(lam=0.0)).item() == ce
    t1 = bace.total_loss(pred, gt, bace.BaceConfig(lam=1.0)).item()
    t2 = bace.total_loss(pred, gt, bace.BaceConfig(lam=2.0)).item()
    assert bace.bace_loss(pred, gt).item() > 0 and t2 > t1 > ce
    assert bace.BaceConfig().lam == 1.0 and bace.BaceConfig().scale == 4


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_bace_permutation_equivariant(seed, n):
    r = np.random.default_rng(seed)
    pred = r.normal(size=(n, 1, 8, 8))
    gt = r.integers(0, 2, pred.shape).astype(float)
    perm = r.permutation(n)
    a = bace.bace_loss(pred, gt).item()
    b = bace.bace_loss(pred[perm], gt[perm]).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_instance_mean(rng):
    pred = rng.normal(size=(3, 1, 8, 8))
    gt = rng.integers(0, 2, pred.shape).astype(float)
    per = [bace.bace_loss(pred[i:i + 1], gt[i:i + 1]).item() for i in range(3)]
    assert bace.bace_loss(pred, gt).item() == pytest.approx(np.mean(per), rel=1e-14)


def test_class_weight_applies(rng):
    pred = rng.normal(size=(1, 1, 4, 4))
    gt = rng.integers(0, 2, pred.shape).astype(float)
    w = np.full(pred.shape, 2.0)
    cfg = bace.BaceConfig(scale=2, class_weight=w)
    assert bace.bace_loss(pred, gt, cfg).item() == pytest.approx(2 * bace.bace_loss(pred, gt, bace.BaceConfig(scale=2)).item())


def test_avg_pool_variant_is_linear_projection(rng):
    x = rng.normal(size=(1, 1, 8, 8))
    r = bace.range_project(x, 2, "avg")
    assert np.allclose(bace.range_project(r, 2, "avg").value, r.value, rtol=0, atol=1e-14)
    np.testing.assert_allclose(ops.avg_pool2d(bace.null_project(x, 2, "avg"), 2).value, 0, atol=1e-14)


def test_validation_errors(rng):
    with pytest.raises(ValueError):
        bace.BaceConfig(scale=0)
    with pytest.raises(ValueError):
        bace.BaceConfig(lam=-1)
    with pytest.raises(ops.ShapeError):
        bace.bace_loss(rng.normal(size=(1, 1, 6, 6)), np.zeros((1, 1, 6, 6)))
    with pytest.raises(ops.ShapeError):
        bace.bace_loss(rng.normal(size=(1, 1, 4, 4)), np.zeros((1, 1, 4, 8)))
    with pytest.raises(ValueError):
        bace.bace_loss(rng.normal(size=(1, 1, 4, 4)), np.full((1, 1, 4, 4), 0.5))
