"""A small four-stage convolutional backbone with optional ERA insertion.

Stage strides are 4/8/16/32. Each stage is a strided 3x3 down-sampling conv,
``depth`` residual 3x3 conv blocks and a channel LayerNorm; when adapters
are enabled an ERA sits at the end of the stage and its output feeds the
next stage. Lateral 1x1 convs (the neck, not part of the backbone) bring
every level to the decoder width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ops
from ..autodiff import Var
from ..decoder import FeaturePyramid
from ..era import EraAdapter, EraConfig, ParamSpec
from ..nn import Conv2d, LayerNorm, Module


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 64)
    depth: int = 1
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError(f"need four stage widths, got {self.widths}")


@dataclass
class EraSettings:
    """Adapter options shared by every stage; the width comes from the stage."""
    enabled: bool = False
    gamma: int = 2
    num_envs: int = 16
    ca_reduction: int = 4

    def for_width(self, channels: int) -> EraConfig:
        return EraConfig(channels=channels, gamma=self.gamma, num_envs=self.num_envs,
                         ca_reduction=self.ca_reduction)


# the reference toy used for parameter accounting
AUDIT_BACKBONE = BackboneConfig(widths=(32, 64, 128, 256), depth=2)


class Stage(Module):
    def __init__(self, cin: int, cout: int, depth: int, rng: np.random.Generator, first: bool, dtype):
        # stage 1 reaches stride 4 with two stride-2 convs
        self.stem = Conv2d(cin, cout, 3, rng, stride=2, dtype=dtype) if first else None
        self.down = Conv2d(cout if first else cin, cout, 3, rng, stride=2, dtype=dtype)
        self.blocks = [Conv2d(cout, cout, 3, rng, dtype=dtype) for _ in range(depth)]
        self.norm = LayerNorm(cout, axis=1, dtype=dtype)

    def __call__(self, x: Var) -> Var:
        if self.stem is not None:
            x = ops.gelu(self.stem(x))
        x = ops.gelu(self.down(x))
        for conv in self.blocks:
            x = ops.add(x, ops.gelu(conv(x)))
        return self.norm(x)


class ToyBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self._cfg = cfg
        cins = (cfg.in_channels,) + tuple(cfg.widths[:3])
        self.stages = [Stage(ci, co, cfg.depth, rng, k == 0, dtype)
                       for k, (ci, co) in enumerate(zip(cins, cfg.widths))]

    def __call__(self, x: Var, adapters=None) -> list[Var]:
        feats = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            if adapters is not None:
                x = adapters[k](x)
            feats.append(x)
        return feats

    def describe(self) -> list[ParamSpec]:
        """Every backbone parameter with its shape and tuning tag."""
        specs = []
        for name, p in self.named_parameters():
            if ".norm." in name:
                tag = "norm"
            elif name.endswith(".bias"):
                tag = "bias"
            else:
                tag = "weight"
            specs.append(ParamSpec(name, p.shape, tag))
        return specs


class StageAdapters(Module):
    def __init__(self, widths, settings: EraSettings, rng: np.random.Generator, dtype=np.float32):
        self.adapters = [EraAdapter(settings.for_width(w), rng, dtype) for w in widths]

    def __getitem__(self, k: int) -> EraAdapter:
        return self.adapters[k]

    def configs(self) -> list[EraConfig]:
        return [a.config for a in self.adapters]


class Neck(Module):
    def __init__(self, widths, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.lateral = [Conv2d(w, channels, 1, rng, dtype=dtype) for w in widths]

    def __call__(self, feats: list[Var]) -> FeaturePyramid:
        return FeaturePyramid(*[lat(f) for lat, f in zip(self.lateral, feats)])


def describe_backbone(cfg: BackboneConfig) -> list[ParamSpec]:
    """Shapes only; no weights are drawn that matter."""
    return ToyBackbone(cfg, np.random.default_rng(0)).describe()
