"""Multi-stage gated refinement decoder.

Each refine block runs a gated fusion of all four pyramid levels around the
current coarse map (MSGRN) and then doubles its resolution with multi-kernel
depthwise convolutions and a pixel shuffle (DSU). A 1x1 head turns the last
map into mask logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .autodiff import Var
from .nn import Conv2d, DSConv, LayerNorm, Linear, Module

FULL_BOX = (0.0, 0.0, 1.0, 1.0)


class FeaturePyramid(NamedTuple):
    f1: Var
    f2: Var
    f3: Var
    f4: Var

    def validate(self) -> None:
        c = self.f1.shape[1]
        for k, f in enumerate(self, start=1):
            if f.ndim != 4:
                raise ops.ShapeError(f"pyramid level f{k} must be NCHW, got {f.shape}")
            if f.shape[1] != c:
                raise ops.ShapeError(f"pyramid level f{k} has {f.shape[1]} channels, f1 has {c}")
            if f.shape[0] != self.f1.shape[0]:
                raise ops.ShapeError(f"pyramid level f{k} batch {f.shape[0]} != f1 batch {self.f1.shape[0]}")
        for k in range(3):
            a, b = self[k], self[k + 1]
            if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
                raise ops.ShapeError(f"f{k + 2} spatial {b.shape[2:]} is not half of f{k + 1} {a.shape[2:]}")


@dataclass
class DecoderConfig:
    channels: int = 32
    num_refine_blocks: int = 3
    num_classes: int = 1
    ffn_ratio: int = 2
    dsu_kernels: tuple = (3, 5, 7)
    shuffle_factor: int = 2

    def __post_init__(self):
        if self.num_refine_blocks < 1:
            raise ValueError("num_refine_blocks must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


class MSGRN(Module):
    """Gated fusion of the pyramid around the current coarse map.

    The gate is computed from the finest level, so fine structure decides
    where the fused coarse features pass through.
    """

    def __init__(self, c: int, rng: np.random.Generator, ffn_ratio: int = 2, dtype=np.float32):
        self.stage_dsconv = [DSConv(c, c, rng, 3, dtype) for _ in range(4)]
        self.fuse = Conv2d(4 * c, c, 1, rng, dtype=dtype)
        self.attn_conv = Conv2d(c, c, 3, rng, dtype=dtype)
        self.attn_ln = LayerNorm(c, axis=1, dtype=dtype)
        self.value = Linear(c, c, rng, axis=1, dtype=dtype)
        self.gate = DSConv(c, c, rng, 3, dtype)
        self.ffn_ln = LayerNorm(c, axis=1, dtype=dtype)
        self.ffn_in = Linear(c, ffn_ratio * c, rng, axis=1, dtype=dtype)
        self.ffn_out = Linear(ffn_ratio * c, c, rng, axis=1, dtype=dtype)

    def __call__(self, pyr: FeaturePyramid, f4_i: Var) -> Var:
        n, c, h, w = f4_i.shape
        if c != pyr.f1.shape[1]:
            raise ops.ShapeError(f"refined map has {c} channels, pyramid has {pyr.f1.shape[1]}")
        x4 = self.stage_dsconv[3](f4_i)
        resampled = [ops.roi_align(self.stage_dsconv[k](lvl), FULL_BOX, h, w)
                     for k, lvl in enumerate((pyr.f1, pyr.f2, pyr.f3))]
        x = ops.concat([x4] + resampled, axis=1)
        x_hat = self.fuse(x)
        y = self.attn_ln(self.attn_conv(x_hat))
        v = self.value(x_hat)
        gate = ops.sigmoid(self.gate(resampled[0]))
        z_hat = ops.mul(gate, ops.mul(y, v))
        z = ops.add(self.ffn_out(ops.gelu(self.ffn_in(self.ffn_ln(z_hat)))), z_hat)
        return ops.add(z, x4)


class DSU(Module):
    def __init__(self, c: int, rng: np.random.Generator, kernels=(3, 5, 7), r: int = 2, dtype=np.float32):
        self._r = r
        self.dwconvs = [Conv2d(c, c, k, rng, groups=c, dtype=dtype) for k in kernels]
        self.expand = Conv2d(c, c * r * r, 1, rng, dtype=dtype)

    def __call__(self, f_hat: Var) -> Var:
        avg = ops.average([dw(f_hat) for dw in self.dwconvs])
        return ops.pixel_shuffle(self.expand(avg), self._r)


class RefineBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.msgrn = MSGRN(cfg.channels, rng, cfg.ffn_ratio, dtype)
        self.dsu = DSU(cfg.channels, rng, cfg.dsu_kernels, cfg.shuffle_factor, dtype)


class BarisDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self._cfg = cfg
        self.blocks = [RefineBlock(cfg, rng, dtype) for _ in range(cfg.num_refine_blocks)]
        self.head = Conv2d(cfg.channels, cfg.num_classes, 1, rng, dtype=dtype)

    @property
    def config(self) -> DecoderConfig:
        return self._cfg

    def __call__(self, pyr: FeaturePyramid) -> Var:
        pyr.validate()
        if pyr.f1.shape[1] != self._cfg.channels:
            raise ops.ShapeError(f"pyramid has {pyr.f1.shape[1]} channels, decoder expects {self._cfg.channels}")
        feat = pyr.f4
        f1_side = pyr.f1.shape[2:]
        for block in self.blocks:
            if feat.shape[2] > f1_side[0] or feat.shape[3] > f1_side[1]:
                warnings.warn(f"refine target {feat.shape[2:]} exceeds f1 resolution {f1_side}; "
                              "pyramid levels will be interpolated upward", stacklevel=2)
            feat = block.dsu(block.msgrn(pyr, feat))
        return self.head(feat)


def msgrn_forward(pyr: FeaturePyramid, f4_i: Var, params: MSGRN) -> Var:
    return params(pyr, f4_i)


def dsu_forward(f_hat: Var, params: DSU) -> Var:
    return params(f_hat)


def decoder_forward(pyr: FeaturePyramid, decoder: BarisDecoder) -> Var:
    return decoder(pyr)
