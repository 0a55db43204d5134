"""Finite-difference audit of every differentiable operation.

Each check draws fresh float64 inputs per seed, projects the op's output
onto a random readout and compares tape gradients with central
differences. Linear maps are checked with a unit step, where central
differences carry no truncation error, against a 1e-10 bound; everything
else uses the ``1e-5 * (1 + |x|)`` step against 1e-4. Inputs to max
pooling and ReLU are drawn with a guaranteed gap to the nearest kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bace, ops
from .autodiff import Var
from .decoder import DSU, MSGRN, BarisDecoder, DecoderConfig, FeaturePyramid
from .era import EraAdapter, EraConfig, env_adapt
from .gradcheck import grad_check, grad_check_batched, grad_check_directional, grad_check_params_sampled
from .rng import stream

LINEAR_TOL = 1e-10
SMOOTH_TOL = 1e-4
MODULES = ("tensor", "decoder", "era", "bace")
KINK_GAP = 1e-4


@dataclass
class Check:
    module: str
    name: str
    tol: float
    run: Callable[[np.random.Generator], float]


@dataclass
class CheckResult:
    module: str
    name: str
    error: float
    tol: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


REGISTRY: list[Check] = []


def check(module: str, name: str, tol: float = SMOOTH_TOL):
    def deco(fn):
        REGISTRY.append(Check(module, name, tol, fn))
        return fn
    return deco


def spaced(rng: np.random.Generator, shape, lo=-2.0, hi=2.0) -> np.ndarray:
    """Distinct values on an even grid, shuffled; none equals zero."""
    n = int(np.prod(shape))
    return (lo + (rng.permutation(n) + 0.5) * (hi - lo) / n).reshape(shape)


def _grid(a):
    # 2**-8 grid: products and sums of a few hundred terms stay exact in float64
    return np.round(np.asarray(a) * 256) / 256


def _readout_err(fn, x, rng, eps=1e-5, quantize=False) -> float:
    r = rng.normal(size=fn(Var(x)).shape)
    r = Var(_grid(r) if quantize else r)
    return grad_check(lambda v: ops.sum(ops.mul(fn(v), r)), x, eps)


def _lin(fn, x, rng) -> float:
    # linear maps on grid data: the central difference is exact up to one division
    return _readout_err(fn, _grid(x), rng, eps=1.0, quantize=True)


def _const(rng, *shape) -> Var:
    return Var(rng.normal(size=shape))


def _qconst(rng, *shape) -> Var:
    return Var(_grid(rng.normal(size=shape)))


# ---------------------------------------------------------------- tensor, linear maps

@check("tensor", "conv2d.input", LINEAR_TOL)
def _(rng):
    w, b = _qconst(rng, 4, 3, 3, 3), _qconst(rng, 4)
    return _lin(lambda v: ops.conv2d(v, w, b, padding=1), rng.normal(size=(2, 3, 6, 6)), rng)


@check("tensor", "conv2d.weight", LINEAR_TOL)
def _(rng):
    x, b = _qconst(rng, 2, 3, 6, 6), _qconst(rng, 4)
    return _lin(lambda v: ops.conv2d(x, v, b, stride=2, padding=1), rng.normal(size=(4, 3, 3, 3)), rng)


@check("tensor", "conv2d.bias", LINEAR_TOL)
def _(rng):
    x, w = _qconst(rng, 2, 3, 5, 5), _qconst(rng, 4, 3, 3, 3)
    return _lin(lambda v: ops.conv2d(x, w, v), rng.normal(size=4), rng)


@check("tensor", "conv2d.depthwise_strided", LINEAR_TOL)
def _(rng):
    w = _qconst(rng, 4, 1, 5, 3)
    x = _qconst(rng, 1, 4, 7, 7)
    e1 = _lin(lambda v: ops.conv2d(v, w, None, stride=2, padding=(2, 1), groups=4), rng.normal(size=(1, 4, 7, 7)), rng)
    e2 = _lin(lambda v: ops.conv2d(x, v, None, stride=2, padding=(2, 1), groups=4), rng.normal(size=(4, 1, 5, 3)), rng)
    return max(e1, e2)


@check("tensor", "conv2d.grouped", LINEAR_TOL)
def _(rng):
    w = _qconst(rng, 6, 2, 3, 3)
    x = _qconst(rng, 1, 4, 6, 6)
    e1 = _lin(lambda v: ops.conv2d(v, w, None, stride=(1, 2), padding=1, groups=2), rng.normal(size=(1, 4, 6, 6)), rng)
    e2 = _lin(lambda v: ops.conv2d(x, v, None, stride=(1, 2), padding=1, groups=2), rng.normal(size=(6, 2, 3, 3)), rng)
    return max(e1, e2)


@check("tensor", "linear", LINEAR_TOL)
def _(rng):
    x, w, b = _qconst(rng, 2, 3, 4, 5), _qconst(rng, 6, 3), _qconst(rng, 6)
    return max(_lin(lambda v: ops.linear(v, w, b, axis=1), x.value, rng),
               _lin(lambda v: ops.linear(x, v, b, axis=1), w.value, rng),
               _lin(lambda v: ops.linear(x, w, v, axis=1), b.value, rng),
               _lin(lambda v: ops.linear(v, w, b), rng.normal(size=(2, 5, 3)), rng))


@check("tensor", "nearest_upsample", LINEAR_TOL)
def _(rng):
    return max(_lin(lambda v: ops.nearest_upsample(v, f), rng.normal(size=(1, 2, 3, 4)), rng) for f in (1, 2, 3))


@check("tensor", "pixel_shuffle", LINEAR_TOL)
def _(rng):
    return _lin(lambda v: ops.pixel_shuffle(v, 2), rng.normal(size=(2, 8, 3, 3)), rng)


@check("tensor", "roi_align", LINEAR_TOL)
def _(rng):
    # box corners on a 1/16 grid and power-of-two outputs keep every bilinear weight dyadic
    x0, x1 = np.sort(rng.choice(17, 2, replace=False)) / 16
    y0, y1 = np.sort(rng.choice(17, 2, replace=False)) / 16
    return max(_lin(lambda v: ops.roi_align(v, (x0, y0, x1, y1), 4, 8), rng.normal(size=(1, 2, 6, 8)), rng),
               _lin(lambda v: ops.resize_bilinear(v, 12, 16), rng.normal(size=(1, 2, 6, 8)), rng))


@check("tensor", "global_avg_pool", LINEAR_TOL)
def _(rng):
    return _lin(ops.global_avg_pool, rng.normal(size=(2, 3, 4, 5)), rng)


@check("tensor", "avg_pool2d", LINEAR_TOL)
def _(rng):
    return _lin(lambda v: ops.avg_pool2d(v, 2), rng.normal(size=(1, 2, 4, 6)), rng)


@check("tensor", "average_concat_add", LINEAR_TOL)
def _(rng):
    c = _qconst(rng, 1, 2, 3, 3)

    def fn(v):
        avg = ops.average([v, ops.mul(v, 2.0), c])
        return ops.concat([avg, ops.sub(v, c), ops.add(v, 1.5)], axis=1)
    return _lin(fn, rng.normal(size=(1, 2, 3, 3)), rng)


@check("tensor", "reshape_permute_expand_take", LINEAR_TOL)
def _(rng):
    def fn(v):
        t = ops.permute(ops.reshape(v, (2, 3, 2)), (2, 0, 1))
        t = ops.take(t, [0, 1, 1], axis=0)
        return ops.expand(ops.reshape(t, (1, 3, 2, 3)), (4, 3, 2, 3))
    return _lin(fn, rng.normal(size=(3, 4)), rng)


# ---------------------------------------------------------------- tensor, nonlinear

@check("tensor", "hadamard")
def _(rng):
    c = _const(rng, 2, 3, 4)
    return _readout_err(lambda v: ops.mul(ops.mul(v, v), c), rng.normal(size=(2, 3, 4)), rng)


@check("tensor", "max_pool2d")
def _(rng):
    return max(_readout_err(lambda v: ops.max_pool2d(v, s), spaced(rng, (1, 2, 8, 8)), rng) for s in (1, 2, 4))


@check("tensor", "max_pool2d_same")
def _(rng):
    return _readout_err(lambda v: ops.max_pool2d_same(v, 3), spaced(rng, (1, 2, 5, 6)), rng)


@check("tensor", "layer_norm")
def _(rng):
    x, g, b = rng.normal(size=(2, 4, 3, 3)), _const(rng, 4), _const(rng, 4)
    xv = Var(x)
    return max(_readout_err(lambda v: ops.layer_norm(v, g, b, axis=1), x, rng),
               _readout_err(lambda v: ops.layer_norm(xv, v, b, axis=1), g.value, rng),
               _readout_err(lambda v: ops.layer_norm(xv, g, v, axis=1), b.value, rng),
               _readout_err(lambda v: ops.layer_norm(v, g, b), rng.normal(size=(3, 4)), rng))


@check("tensor", "activations")
def _(rng):
    x = rng.normal(size=(2, 3, 4))
    return max(_readout_err(ops.gelu, x, rng),
               _readout_err(ops.sigmoid, x, rng),
               _readout_err(ops.relu, spaced(rng, (2, 3, 4)), rng),
               _readout_err(lambda v: ops.softmax(v, axis=1), x, rng),
               _readout_err(lambda v: ops.softmax(v, axis=-1), x, rng))


@check("tensor", "bce_with_logits")
def _(rng):
    t = rng.uniform(0, 1, (2, 1, 4, 4))
    w = rng.uniform(0.5, 2, (2, 1, 4, 4))
    x = 3 * rng.normal(size=(2, 1, 4, 4))
    return max(grad_check(lambda v: ops.bce_with_logits(v, t), x),
               grad_check(lambda v: ops.bce_with_logits(v, t, w), x))


@check("tensor", "conv_relu_sum")
def _(rng):
    w = _const(rng, 3, 2, 3, 3)
    for _ in range(100):
        x = rng.normal(size=(1, 2, 6, 6))
        pre = ops.conv2d(Var(x), w, padding=1).value
        if np.abs(pre).min() > 1e-3:
            break
    return grad_check(lambda v: ops.sum(ops.relu(ops.conv2d(v, w, padding=1))), x)


@check("tensor", "shared_input_branches")
def _(rng):
    r = _const(rng, 3, 4)
    return grad_check(lambda v: ops.add(ops.sum(ops.mul(ops.sigmoid(v), v)), ops.sum(ops.mul(ops.gelu(v), r))),
                      rng.normal(size=(3, 4)))


# ---------------------------------------------------------------- decoder

def tiny_pyramid(rng, c=4, side=8, n=1):
    return [rng.normal(size=(n, c, side >> k, side >> k)) for k in range(4)]


def _pyr(levels) -> FeaturePyramid:
    return FeaturePyramid(*[lv if isinstance(lv, Var) else Var(lv) for lv in levels])


@check("decoder", "msgrn_forward")
def _(rng):
    m = MSGRN(4, rng, dtype=np.float64)
    levels = tiny_pyramid(rng)
    f4i = rng.normal(size=(1, 4, 2, 2))
    r = rng.normal(size=(1, 4, 2, 2))
    e_state = grad_check_batched(lambda v: m(_pyr([np.repeat(lv, v.shape[0], 0) for lv in levels]), v), r, f4i)
    e_f1 = grad_check_batched(
        lambda v: m(_pyr([v] + [np.repeat(lv, v.shape[0], 0) for lv in levels[1:]]),
                    Var(np.repeat(f4i, v.shape[0], 0))), r, levels[0])
    return max(e_state, e_f1)


@check("decoder", "dsu_forward")
def _(rng):
    d = DSU(4, rng, dtype=np.float64)
    return grad_check_batched(d, rng.normal(size=(1, 4, 6, 6)), rng.normal(size=(1, 4, 3, 3)))


@check("decoder", "decoder_forward.pyramid")
def _(rng):
    dec = BarisDecoder(DecoderConfig(channels=4, num_refine_blocks=3), rng, dtype=np.float64)
    levels = tiny_pyramid(rng)
    r = rng.normal(size=(1, 1, 8, 8))
    errs = []
    for k in range(4):
        def fwd(v, k=k):
            lv = [Var(np.repeat(x, v.shape[0], 0)) for x in levels]
            lv[k] = v
            return dec(_pyr(lv))
        errs.append(grad_check_batched(fwd, r, levels[k]))
    return max(errs)


@check("decoder", "decoder_forward.params")
def _(rng):
    dec = BarisDecoder(DecoderConfig(channels=4, num_refine_blocks=2), rng, dtype=np.float64)
    for p in dec.parameters():
        p.value = p.value + 0.1 * rng.normal(size=p.shape)
    pyr = _pyr(tiny_pyramid(rng))
    r = Var(rng.normal(size=(1, 1, 4, 4)))
    params = dict(dec.named_parameters())
    names = sorted(params)
    picked = [[names[i]] for i in rng.choice(len(names), size=12, replace=False)]
    return grad_check_directional(lambda: ops.sum(ops.mul(dec(pyr), r)), params, rng, picked + [names])


# ---------------------------------------------------------------- era

def _window_gap(x: np.ndarray, k: int = 3) -> float:
    from numpy.lib.stride_tricks import sliding_window_view
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = np.sort(sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(*x.shape, k * k), axis=-1)
    return float((win[..., -1] - win[..., -2]).min())


def era_kink_margin(a: EraAdapter, x: np.ndarray) -> float:
    """Distance of the adapter's internal max-pool and ReLU inputs from a kink."""
    from .nn import channel_scale
    f = Var(x)
    f_p = a.down(ops.add(channel_scale(a.ln(f), a.s1), channel_scale(f, a.s2)))
    f_s = a.msfe(f_p)
    pre = a.ca.squeeze(ops.global_avg_pool(f_s)).value
    return min(_window_gap(f_p.value), float(np.abs(pre).min()))


def live_adapter(rng, c=8, gamma=2, num_envs=4) -> EraAdapter:
    """An adapter with a non-zero up-projection, so every branch is exercised."""
    a = EraAdapter(EraConfig(channels=c, gamma=gamma, num_envs=num_envs, ca_reduction=2), rng, dtype=np.float64)
    a.up.weight.value = rng.normal(size=a.up.weight.shape) * 0.5
    a.up.bias.value = rng.normal(size=a.up.bias.shape) * 0.1
    a.s2.value = rng.uniform(0.5, 1.5, size=a.s2.shape)
    return a


def _era_case(rng):
    for _ in range(200):
        a = live_adapter(rng)
        x = rng.normal(size=(1, 8, 4, 4))
        if era_kink_margin(a, x) > KINK_GAP:
            return a, x
    raise RuntimeError("could not draw an input away from pooling/ReLU ties")


@check("era", "era_forward.input")
def _(rng):
    a, x = _era_case(rng)
    return grad_check_batched(a, rng.normal(size=x.shape), x)


@check("era", "era_forward.params")
def _(rng):
    a, x = _era_case(rng)
    xv = Var(x)
    r = Var(rng.normal(size=x.shape))
    rep = grad_check_params_sampled(lambda: ops.sum(ops.mul(a(xv), r)), dict(a.named_parameters()), rng,
                                    max_coords=4)
    return max(rep.values())


@check("era", "msfe_forward")
def _(rng):
    a = live_adapter(rng)
    x = spaced(rng, (1, 4, 4, 5))
    return grad_check_batched(a.msfe, rng.normal(size=x.shape), x)


@check("era", "channel_attention")
def _(rng):
    a = live_adapter(rng)
    for _ in range(200):
        x = rng.normal(size=(1, 4, 3, 3))
        if np.abs(a.ca.squeeze(ops.global_avg_pool(Var(x))).value).min() > KINK_GAP:
            break
    return grad_check_batched(a.ca, rng.normal(size=x.shape), x)


@check("era", "env_adapt")
def _(rng):
    a = live_adapter(rng)
    x = rng.normal(size=(1, 4, 3, 3))
    return grad_check_batched(lambda v: env_adapt(v, a.env), rng.normal(size=x.shape), x)


# ---------------------------------------------------------------- bace

def _mask_case(rng, n=2, side=8):
    pred = spaced(rng, (n, 1, side, side), -4, 4)
    gt = (rng.uniform(size=pred.shape) < 0.5).astype(np.float64)
    return pred, gt


@check("bace", "bace_loss")
def _(rng):
    pred, gt = _mask_case(rng)
    errs = [grad_check(lambda v, s=s: bace.bace_loss(v, gt, bace.BaceConfig(scale=s)), pred) for s in (2, 4)]
    errs.append(grad_check(lambda v: bace.bace_loss(v, gt, bace.BaceConfig(scale=2, pool="avg")), pred))
    w = rng.uniform(0.5, 2.0, pred.shape)
    errs.append(grad_check(lambda v: bace.bace_loss(v, gt, bace.BaceConfig(scale=4, class_weight=w)), pred))
    return max(errs)


@check("bace", "total_loss")
def _(rng):
    pred, gt = _mask_case(rng)
    return max(grad_check(lambda v: bace.total_loss(v, gt, bace.BaceConfig(scale=s, lam=lam)), pred)
               for s, lam in ((4, 1.0), (2, 0.5)))


@check("bace", "refine_gamma")
def _(rng):
    pred, gt = _mask_case(rng, n=1)
    return _readout_err(lambda v: bace.refine_gamma(v, gt, 2), pred, rng)


@check("bace", "range_null_project")
def _(rng):
    pred, _ = _mask_case(rng, n=1)
    return max(_readout_err(lambda v: bace.range_project(v, 2), pred, rng),
               _readout_err(lambda v: bace.null_project(v, 4), pred, rng))


def run_suite(module: str = "all", seed: int = 0, n_seeds: int = 20) -> list[CheckResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; expected 'all' or one of {MODULES}")
    results = []
    for c in REGISTRY:
        if module != "all" and c.module != module:
            continue
        errs = [c.run(stream(seed, f"gradcheck/{c.module}/{c.name}/{k}")) for k in range(n_seeds)]
        results.append(CheckResult(c.module, c.name, float(max(errs)), c.tol, n_seeds))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}\t{r.module}\t{r.name}\tmax_rel_err={r.error:.3e}\ttol={r.tol:.0e}\tseeds={r.seeds}")
    return "\n".join(lines)
