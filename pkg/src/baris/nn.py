"""Parameter containers built on :class:`~baris.autodiff.Var`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Var


class Module:
    """Anything holding parameters.

    Parameters are discovered by walking attributes: a ``Var`` attribute is
    a parameter, a ``Module`` (or list of them) is a child.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Var]]:
        for key, val in vars(self).items():
            if not key.startswith("_"):
                yield from _walk(f"{prefix}{key}", val)

    def parameters(self) -> list[Var]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.value.size for p in self.parameters()], dtype=np.int64))

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.value = arr.astype(p.dtype, copy=True)


def _walk(name: str, val) -> Iterator[tuple[str, Var]]:
    if isinstance(val, Var):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param(value, dtype, name=None) -> Var:
    return Var(np.asarray(value, dtype=dtype), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, *, stride=1,
                 padding=None, groups: int = 1, bias: bool = True, dtype=np.float32):
        kh, kw = ops._pair(kernel)
        self._stride = stride
        self._padding = (kh // 2, kw // 2) if padding is None else padding
        self._groups = groups
        fan_in = (cin // groups) * kh * kw
        self.weight = param(kaiming_uniform(rng, (cout, cin // groups, kh, kw), fan_in, dtype), dtype)
        self.bias = param(np.zeros(cout), dtype) if bias else None

    def __call__(self, x: Var) -> Var:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride,
                          padding=self._padding, groups=self._groups)


class Linear(Module):
    """Per-position channel map; ``axis`` names the channel axis of the input."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, *, axis: int = -1,
                 bias: bool = True, dtype=np.float32):
        self._axis = axis
        self.weight = param(kaiming_uniform(rng, (cout, cin), cin, dtype), dtype)
        self.bias = param(np.zeros(cout), dtype) if bias else None

    def __call__(self, x: Var) -> Var:
        return ops.linear(x, self.weight, self.bias, axis=self._axis)


class LayerNorm(Module):
    def __init__(self, channels: int, *, axis: int = 1, eps: float = 1e-5, dtype=np.float32):
        self._axis = axis
        self._eps = eps
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)

    def __call__(self, x: Var) -> Var:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self._eps, axis=self._axis)


class DSConv(Module):
    """Depthwise k x k convolution followed by a pointwise 1 x 1."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, dtype=np.float32):
        self.dw = Conv2d(cin, cin, kernel, rng, groups=cin, dtype=dtype)
        self.pw = Conv2d(cin, cout, 1, rng, dtype=dtype)

    def __call__(self, x: Var) -> Var:
        return self.pw(self.dw(x))


def channel_scale(x: Var, s: Var) -> Var:
    """Multiply an NCHW tensor by a per-channel vector of length C."""
    n, c, h, w = x.shape
    return ops.mul(x, ops.expand(ops.reshape(s, (1, c, 1, 1)), x.shape))
