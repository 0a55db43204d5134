"""Differentiable primitives.

Arrays are NCHW unless stated otherwise. Shapes must match exactly; the only
implicit broadcast is a scalar against a tensor. Anything else goes through
:func:`expand`, so a shape slip fails loudly instead of broadcasting.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .autodiff import Var, as_var, make_output


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _is_scalar(v: Var) -> bool:
    return v.value.ndim == 0


def _coerce(a, b) -> tuple[Var, Var]:
    # python scalars take the dtype of the tensor operand
    if not isinstance(a, Var) and isinstance(b, Var) and np.ndim(a) == 0:
        a = Var(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Var) and isinstance(a, Var) and np.ndim(b) == 0:
        b = Var(np.asarray(b, dtype=a.dtype))
    return as_var(a), as_var(b)


def _check_same(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        an = a.name or "lhs"
        bn = b.name or "rhs"
        raise ShapeError(f"{op}: operand {an} has shape {a.shape} but {bn} has shape {b.shape}")


def _unscalar(g: np.ndarray, v: Var):
    if _is_scalar(v) and g.ndim:
        return np.asarray(g.sum(), dtype=v.dtype)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_same(a, b, "add")
    return make_output(a.value + b.value, (a, b),
                       lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_same(a, b, "sub")
    return make_output(a.value - b.value, (a, b),
                       lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Var:
    """Hadamard product (or scalar scaling)."""
    a, b = _coerce(a, b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return make_output(av * bv, (a, b),
                       lambda g: (_unscalar(g * bv, a), _unscalar(g * av, b)))


hadamard = mul


def relu(x: Var) -> Var:
    xv = x.value
    mask = xv > 0
    return make_output(np.where(mask, xv, 0).astype(xv.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Var) -> Var:
    s = special.expit(x.value)
    return make_output(s, (x,), lambda g: (g * s * (1 - s),))


def gelu(x: Var) -> Var:
    """Exact GELU, x * Phi(x)."""
    xv = x.value
    cdf = 0.5 * (1.0 + special.erf(xv / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xv * xv) / math.sqrt(2.0 * math.pi)
    out = (xv * cdf).astype(xv.dtype)
    return make_output(out, (x,), lambda g: ((g * (cdf + xv * pdf)).astype(xv.dtype),))


def softmax(x: Var, axis: int = -1) -> Var:
    xv = x.value
    if not -xv.ndim <= axis < xv.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {xv.shape}")
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return make_output(s, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Var) -> Var:  # noqa: A001
    shape = x.shape
    return make_output(np.asarray(x.value.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x: Var) -> Var:
    n = x.value.size
    shape = x.shape
    return make_output(np.asarray(x.value.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Var, shape: Sequence[int]) -> Var:
    old = x.shape
    return make_output(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def expand(x: Var, shape: Sequence[int]) -> Var:
    """Explicit broadcast of size-1 axes to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(x.value, shape).copy()
    return make_output(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def take(x: Var, indices: Sequence[int], axis: int = 0) -> Var:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (gx,)
    return make_output(np.take(x.value, idx, axis=axis), (x,), bw)


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    xs = [as_var(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for k, x in enumerate(xs[1:], start=1):
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, x.shape)) if i != ax):
            raise ShapeError(f"concat: operand 0 has shape {ref} but operand {k} has shape {x.shape} (axis {axis})")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return make_output(np.concatenate([x.value for x in xs], axis=ax), tuple(xs),
                       lambda g: tuple(np.split(g, splits, axis=ax)))


def average(xs: Sequence[Var]) -> Var:
    xs = [as_var(x) for x in xs]
    for k, x in enumerate(xs[1:], start=1):
        if x.shape != xs[0].shape:
            raise ShapeError(f"average: operand 0 has shape {xs[0].shape} but operand {k} has shape {x.shape}")
    k = len(xs)
    total = xs[0].value.copy()
    for x in xs[1:]:
        total = total + x.value
    return make_output(total / k, tuple(xs), lambda g: tuple(g / k for _ in xs))


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    return make_output(x.value.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- linear maps

def linear(x: Var, weight: Var, bias: Var | None = None, axis: int = -1) -> Var:
    """Affine map over one axis: y[..., o, ...] = sum_i W[o, i] x[..., i, ...] + b[o]."""
    x, weight = as_var(x), as_var(weight)
    ax = axis % x.ndim
    cout, cin = weight.shape
    if x.shape[ax] != cin:
        raise ShapeError(f"linear: input axis {axis} has size {x.shape[ax]} but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match output width {cout}")
    xm = np.moveaxis(x.value, ax, -1)
    y = xm @ weight.value.T
    if bias is not None:
        y = y + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = np.moveaxis(g, ax, -1)
        gx = np.moveaxis(gm @ weight.value, -1, ax)
        gw = gm.reshape(-1, cout).T @ xm.reshape(-1, cin)
        if bias is None:
            return gx, gw
        return gx, gw, gm.reshape(-1, cout).sum(axis=0)
    return make_output(np.moveaxis(y, -1, ax), parents, bw)


def conv2d(x: Var, weight: Var, bias: Var | None = None, stride=1, padding=0, groups: int = 1) -> Var:
    """2-D cross-correlation. Output size uses floor division, as usual."""
    x, weight = as_var(x), as_var(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups:
        raise ShapeError(f"conv2d: input channels {c} not divisible by groups {groups}")
    if o % groups:
        raise ShapeError(f"conv2d: output channels {o} not divisible by groups {groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight in-channel dim is {cg}, expected C/groups = {c // groups}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out channels {o}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1:
        raise ShapeError(f"conv2d: height {h} too small for kernel {kh} with padding {ph}")
    if wo < 1:
        raise ShapeError(f"conv2d: width {w} too small for kernel {kw} with padding {pw}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.value
    wv = weight.value
    depthwise = groups == c and o == c

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))

    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[window(i, j)] * wv[:, 0, i, j][None, :, None, None]
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        og = o // groups
        out = np.empty((n, o, ho, wo), dtype=x.dtype)
        for gi in range(groups):
            cols = win[:, gi * cg:(gi + 1) * cg]
            res = np.tensordot(cols, wv[gi * og:(gi + 1) * og], axes=([1, 4, 5], [1, 2, 3]))
            out[:, gi * og:(gi + 1) * og] = res.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.value[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    sl = window(i, j)
                    gxp[sl] += g * wv[:, 0, i, j][None, :, None, None]
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        else:
            og = o // groups
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
            for gi in range(groups):
                gg = g[:, gi * og:(gi + 1) * og]
                cols = win[:, gi * cg:(gi + 1) * cg]
                gw[gi * og:(gi + 1) * og] = np.tensordot(gg, cols, axes=([0, 2, 3], [0, 2, 3]))
                # d cols: (n, ho, wo, cg, kh, kw)
                dcols = np.tensordot(gg, wv[gi * og:(gi + 1) * og], axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                for i in range(kh):
                    for j in range(kw):
                        sl = window(i, j)
                        gxp[:, gi * cg:(gi + 1) * cg, sl[2], sl[3]] += dcols[..., i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return make_output(out, parents, bw)


# ---------------------------------------------------------------- pooling / resampling

def _blocks(v: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = v.shape
    return v.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)


def _unblocks(b: np.ndarray, s: int) -> np.ndarray:
    n, c, hh, ww, _ = b.shape
    return b.reshape(n, c, hh, ww, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * s, ww * s)


def _check_divisible(x: Var, s: int, op: str) -> None:
    if s < 1:
        raise ShapeError(f"{op}: scale must be >= 1, got {s}")
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got shape {x.shape}")
    _, _, h, w = x.shape
    if h % s:
        raise ShapeError(f"{op}: height {h} not divisible by scale {s}")
    if w % s:
        raise ShapeError(f"{op}: width {w} not divisible by scale {s}")


def max_pool2d(x: Var, scale: int) -> Var:
    """Non-overlapping max pooling with kernel = stride = scale.

    Gradient goes to the first maximum in row-major order within each block.
    """
    _check_divisible(x, scale, "max_pool2d")
    if scale == 1:
        return make_output(x.value.copy(), (x,), lambda g: (g,))
    blocks = _blocks(x.value, scale)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        return (_unblocks(gb, scale),)
    return make_output(out, (x,), bw)


def avg_pool2d(x: Var, scale: int) -> Var:
    _check_divisible(x, scale, "avg_pool2d")
    n, c, h, w = x.shape
    s = scale
    out = x.value.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s),)
    return make_output(out, (x,), bw)


def max_pool2d_same(x: Var, kernel: int = 3) -> Var:
    """Stride-1 max pooling with ``kernel // 2`` padding (shape preserving)."""
    if kernel % 2 == 0:
        raise ShapeError(f"max_pool2d_same: kernel must be odd, got {kernel}")
    p = kernel // 2
    n, c, h, w = x.shape
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3)).reshape(n, c, h, w, kernel * kernel)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h, w, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gw = gw.reshape(n, c, h, w, kernel, kernel)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i:i + h, j:j + w] += gw[..., i, j]
        return (gxp[:, :, p:p + h, p:p + w],)
    return make_output(out, (x,), bw)


def nearest_upsample(x: Var, factor: int) -> Var:
    if factor < 1:
        raise ShapeError(f"nearest_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return make_output(x.value.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    f = factor
    out = np.repeat(np.repeat(x.value, f, axis=2), f, axis=3)
    return make_output(out, (x,), lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


def pixel_shuffle(x: Var, r: int) -> Var:
    """out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {crr} not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    out = x.value.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, crr, h, w),)
    return make_output(out, (x,), bw)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5, axis: int = -1) -> Var:
    """Normalise over ``axis`` then apply a per-channel affine map."""
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = c
    gv = gamma.value.reshape(bshape)
    xv = x.value
    mu = xv.mean(axis=ax, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gv + beta.value.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        dxhat = g * gv
        gx = rstd * (dxhat - dxhat.mean(axis=ax, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return make_output(out.astype(xv.dtype), (x, gamma, beta), bw)


def _interp_matrix(start: float, extent: float, size: int, out: int, dtype) -> np.ndarray:
    """Rows of bilinear weights for ``out`` samples at cell centres of [start, start + extent)."""
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        y = start + (i + 0.5) * extent / out - 0.5
        if y < -1.0 or y > size:
            continue
        y = max(y, 0.0)
        lo = int(math.floor(y))
        if lo >= size - 1:
            m[i, size - 1] += 1.0
            continue
        frac = y - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    return m


def roi_align(x: Var, box: Sequence[float], out_h: int, out_w: int) -> Var:
    """Bilinear crop-and-resize of a normalised box, one sample per output cell.

    ``box`` is (x0, y0, x1, y1) in [0, 1] image coordinates. Pixel centres sit
    at half-integer positions and sample coordinates are never rounded.
    """
    x0, y0, x1, y1 = (float(b) for b in box)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ShapeError(f"roi_align: degenerate or out-of-range box {tuple(box)}")
    n, c, h, w = x.shape
    ry = _interp_matrix(y0 * h, (y1 - y0) * h, h, out_h, x.dtype)
    rx = _interp_matrix(x0 * w, (x1 - x0) * w, w, out_w, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.value, rx, optimize=True)
    return make_output(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx, optimize=True),))


def resize_bilinear(x: Var, out_h: int, out_w: int) -> Var:
    return roi_align(x, (0.0, 0.0, 1.0, 1.0), out_h, out_w)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Var, target, weight=None) -> Var:
    """Mean of weight * (softplus(x) - t*x) in the overflow-safe form."""
    t = np.asarray(target.value if isinstance(target, Var) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits shape {logits.shape} but target shape {t.shape}")
    wv = None
    if weight is not None:
        wv = np.asarray(weight.value if isinstance(weight, Var) else weight, dtype=logits.dtype)
        if wv.shape != logits.shape:
            raise ShapeError(f"bce_with_logits: weight shape {wv.shape} does not match logits {logits.shape}")
    xv = logits.value
    per = np.maximum(xv, 0) - xv * t + np.log1p(np.exp(-np.abs(xv)))
    if wv is not None:
        per = per * wv
    n = xv.size

    def bw(g):
        d = special.expit(xv) - t
        if wv is not None:
            d = d * wv
        return ((g / n) * d,)
    return make_output(np.asarray(per.mean(), dtype=xv.dtype), (logits,), bw)
