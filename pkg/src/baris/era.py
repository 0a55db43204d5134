"""Environmental Robust Adapter and trainable-parameter accounting.

Pipeline per stage output F (NCHW, C channels)::

    F_p = down(s1 * LN(F) + s2 * F)                  C -> C' = C / gamma
    F_s = mean(maxpool branch, 3 strip-conv branches) + F_p
    F_c = F_s * sigmoid(MLP(GAP(F_s)))               channel attention
    E_a = softmax(env_linear(F_c)) @ E               per pixel, E is [N_env, C']
    F_e = gelu(F_c * sigmoid(E_a))
    out = F + up(F_e)                                up starts at exactly zero
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from . import ops
from .autodiff import Var
from .nn import Conv2d, LayerNorm, Linear, Module, channel_scale, param


@dataclass
class EraConfig:
    channels: int
    gamma: int = 2
    num_envs: int = 16
    msfe_kernels: tuple = (3, 5, 7)
    ca_reduction: int = 4
    s2_init: float = 1e-6

    def __post_init__(self):
        if self.channels % self.gamma:
            raise ValueError(f"channels {self.channels} not divisible by gamma {self.gamma}")
        if self.channels // self.gamma < 1:
            raise ValueError("compressed width C/gamma must be >= 1")
        if self.num_envs < 1:
            raise ValueError("num_envs must be >= 1")

    @property
    def inner(self) -> int:
        return self.channels // self.gamma

    @property
    def ca_hidden(self) -> int:
        return max(1, self.inner // self.ca_reduction)


class EnvEmbeddings(Module):
    def __init__(self, cfg: EraConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.inner
        self.E = param(rng.normal(0.0, 1.0, size=(cfg.num_envs, c)), dtype)
        self.env_linear = Linear(c, cfg.num_envs, rng, axis=1, dtype=dtype)


class MSFE(Module):
    def __init__(self, cfg: EraConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.inner
        self.pool_proj = Conv2d(c, c, 1, rng, dtype=dtype)
        # (j x 1 then 1 x j) depthwise pairs
        self.strips = [[Conv2d(c, c, (j, 1), rng, groups=c, dtype=dtype),
                        Conv2d(c, c, (1, j), rng, groups=c, dtype=dtype)] for j in cfg.msfe_kernels]

    def __call__(self, f_p: Var) -> Var:
        branches = [self.pool_proj(ops.max_pool2d_same(f_p, 3))]
        for vert, horiz in self.strips:
            branches.append(horiz(vert(f_p)))
        return ops.add(ops.average(branches), f_p)


class ChannelAttention(Module):
    def __init__(self, cfg: EraConfig, rng: np.random.Generator, dtype=np.float32):
        self.squeeze = Conv2d(cfg.inner, cfg.ca_hidden, 1, rng, dtype=dtype)
        self.excite = Conv2d(cfg.ca_hidden, cfg.inner, 1, rng, dtype=dtype)

    def weights(self, f_s: Var) -> Var:
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(ops.global_avg_pool(f_s)))))

    def __call__(self, f_s: Var) -> Var:
        return ops.mul(f_s, ops.expand(self.weights(f_s), f_s.shape))


class EraAdapter(Module):
    def __init__(self, cfg: EraConfig, rng: np.random.Generator, dtype=np.float32):
        self._cfg = cfg
        c, ci = cfg.channels, cfg.inner
        self.ln = LayerNorm(c, axis=1, dtype=dtype)
        self.s1 = param(np.ones(c), dtype)
        self.s2 = param(np.full(c, cfg.s2_init), dtype)
        self.down = Linear(c, ci, rng, axis=1, dtype=dtype)
        self.msfe = MSFE(cfg, rng, dtype)
        self.ca = ChannelAttention(cfg, rng, dtype)
        self.env = EnvEmbeddings(cfg, rng, dtype)
        self.up = Linear(ci, c, rng, axis=1, dtype=dtype)
        self.up.weight.value[...] = 0
        self.up.bias.value[...] = 0

    @property
    def config(self) -> EraConfig:
        return self._cfg

    def __call__(self, f: Var) -> Var:
        if f.ndim != 4 or f.shape[1] != self._cfg.channels:
            raise ops.ShapeError(f"ERA expects {self._cfg.channels} channels, got input shape {f.shape}")
        mixed = ops.add(channel_scale(self.ln(f), self.s1), channel_scale(f, self.s2))
        f_p = self.down(mixed)
        f_c = self.ca(self.msfe(f_p))
        e_adapted = env_adapt(f_c, self.env)
        f_e = ops.gelu(ops.mul(f_c, ops.sigmoid(e_adapted)))
        return ops.add(f, self.up(f_e))


def env_weights(f_c: Var, env: EnvEmbeddings) -> Var:
    """Per-pixel softmax over environments, shape [N, N_env, H, W]."""
    return ops.softmax(env.env_linear(f_c), axis=1)


def env_adapt(f_c: Var, env: EnvEmbeddings) -> Var:
    """Per-pixel convex combination of embedding rows, shape [N, C', H, W]."""
    w = env_weights(f_c, env)
    return ops.linear(w, ops.permute(env.E, (1, 0)), axis=1)


def era_forward(f: Var, adapter: EraAdapter) -> Var:
    return adapter(f)


def msfe_forward(f_p: Var, adapter: EraAdapter) -> Var:
    return adapter.msfe(f_p)


def channel_attention(f_s: Var, adapter: EraAdapter) -> Var:
    return adapter.ca(f_s)


# ---------------------------------------------------------------- accounting

TAGS = ("weight", "bias", "norm")
SCHEMES = ("full", "era", "bitfit", "norm_only")


class ParamSpec(NamedTuple):
    name: str
    shape: tuple
    tag: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamCount(NamedTuple):
    scheme: str
    trainable: int
    total: int

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def era_param_count(cfg: EraConfig) -> int:
    """Closed-form count of one adapter's parameters."""
    c, ci, n, h = cfg.channels, cfg.inner, cfg.num_envs, cfg.ca_hidden
    total = 2 * c + 2 * c                     # LN gamma/beta, s1, s2
    total += ci * c + ci                      # down
    total += ci * ci + ci                     # pooled-branch 1x1
    total += sum(2 * (j * ci + ci) for j in cfg.msfe_kernels)
    total += ci * h + h + h * ci + ci         # channel attention
    total += n * ci + ci * n + n              # E and env_linear
    total += c * ci + c                       # up
    return total


def count_params(scheme: str, backbone: Iterable[ParamSpec], era_cfgs: Iterable[EraConfig] = ()) -> ParamCount:
    """Trainable vs total over backbone plus adapters.

    Adapters only join the universe under the ``era`` scheme; the other
    schemes tune a subset of the bare backbone.
    """
    specs = list(backbone)
    for s in specs:
        if s.tag not in TAGS:
            raise ValueError(f"unknown parameter tag {s.tag!r} on {s.name}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    base = sum(s.size for s in specs)
    if scheme == "full":
        return ParamCount(scheme, base, base)
    if scheme == "bitfit":
        return ParamCount(scheme, sum(s.size for s in specs if s.tag == "bias"), base)
    if scheme == "norm_only":
        return ParamCount(scheme, sum(s.size for s in specs if s.tag == "norm"), base)
    adapters = sum(era_param_count(c) for c in era_cfgs)
    return ParamCount(scheme, adapters, base + adapters)


# Published Swin-B totals per tuning scheme (parameters, not millions).
SWIN_B_REFERENCE = {
    "full": ParamCount("full", 86_750_000, 86_750_000),
    "era": ParamCount("era", 4_250_000, 86_750_000 + 4_250_000),
    "bitfit": ParamCount("bitfit", 200_000, 86_750_000),
    "norm_only": ParamCount("norm_only", 60_000, 86_750_000),
}
