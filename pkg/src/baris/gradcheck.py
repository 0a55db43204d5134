"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autodiff import Var, backward


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-coordinate central difference with step ``eps * (1 + |x_i|)``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * (1.0 + abs(orig))
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f: Callable[[Var], Var], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``f`` maps a Var to a scalar Var and must be deterministic. ``x`` is
    promoted to float64.
    """
    x = np.array(x, dtype=np.float64)
    v = Var(x.copy(), requires_grad=True)
    out = f(v)
    backward(out)
    analytic = v.grad if v.grad is not None else np.zeros_like(x)
    numeric = numeric_grad(lambda arr: f(Var(arr)).item(), x, eps)
    return relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Var], params: dict[str, Var], eps: float = 1e-5) -> dict[str, float]:
    """Check gradients of ``loss_fn()`` with respect to several leaf Vars in place.

    Each Var's ``value`` is perturbed and restored; params must be float64.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        base = p.value

        def f(arr, p=p):
            p.value = arr
            return loss_fn().item()
        numeric = numeric_grad(f, base.copy(), eps)
        p.value = base
        report[name] = relative_error(analytic, numeric)
    return report


def grad_check_batched(fwd: Callable[[Var], Var], readout: np.ndarray, x: np.ndarray,
                       eps: float = 1e-5) -> float:
    """Like :func:`grad_check` for batch-independent maps, evaluating every
    perturbed copy of ``x`` in a single forward pass.

    ``x`` has a leading batch axis of 1; the scalar is ``sum(readout * fwd(x))``.
    """
    x = np.array(x, dtype=np.float64)
    if x.shape[0] != 1:
        raise ValueError("grad_check_batched needs a leading batch axis of size 1")
    r = np.asarray(readout, dtype=np.float64)
    v = Var(x.copy(), requires_grad=True)
    backward(ops.sum(ops.mul(fwd(v), Var(r))))
    analytic = v.grad if v.grad is not None else np.zeros_like(x)

    n = x.size
    flat = x.reshape(-1)
    steps = eps * (1.0 + np.abs(flat))
    batch = np.repeat(x, 2 * n, axis=0).reshape(2 * n, n)
    batch[np.arange(n), np.arange(n)] += steps
    batch[n + np.arange(n), np.arange(n)] -= steps
    out = fwd(Var(batch.reshape((2 * n,) + x.shape[1:]))).value
    vals = (out * r).reshape(2 * n, -1).sum(axis=1)
    numeric = ((vals[:n] - vals[n:]) / (2.0 * steps)).reshape(x.shape)
    return relative_error(analytic, numeric)


def grad_check_params_sampled(loss_fn: Callable[[], Var], params: dict[str, Var], rng: np.random.Generator,
                              max_coords: int = 8, eps: float = 1e-5) -> dict[str, float]:
    """Spot-check up to ``max_coords`` random coordinates of each parameter."""
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat_idx = rng.choice(p.value.size, size=min(max_coords, p.value.size), replace=False)
        base = p.value
        work = base.copy()
        wf = work.reshape(-1)
        num = np.empty(len(flat_idx))
        for k, i in enumerate(flat_idx):
            orig = wf[i]
            h = eps * (1.0 + abs(orig))
            wf[i] = orig + h
            p.value = work
            fp = loss_fn().item()
            wf[i] = orig - h
            fm = loss_fn().item()
            wf[i] = orig
            num[k] = (fp - fm) / (2.0 * h)
        p.value = base
        report[name] = relative_error(analytic.reshape(-1)[flat_idx], num)
    return report


def grad_check_directional(loss_fn: Callable[[], Var], params: dict[str, Var], rng: np.random.Generator,
                           groups: list[list[str]], eps: float = 1e-5) -> float:
    """Compare ``<grad, d>`` with a central difference along a random unit ``d``.

    One direction is drawn per entry of ``groups``, moving every named
    parameter in that group at once; costs two forward passes per group.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for names in groups:
        dirs = {n: rng.normal(size=params[n].shape) for n in names}
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs.values()))
        dirs = {n: d / norm for n, d in dirs.items()}
        base = {n: params[n].value for n in names}
        analytic = sum(float(np.sum((params[n].grad if params[n].grad is not None else 0.0) * dirs[n]))
                       for n in names)
        vals = []
        for sign in (1.0, -1.0):
            for n in names:
                params[n].value = base[n] + sign * eps * dirs[n]
            vals.append(loss_fn().item())
        for n in names:
            params[n].value = base[n]
        worst = max(worst, relative_error(np.array([analytic]), np.array([(vals[0] - vals[1]) / (2 * eps)])))
    return worst
