"""Backbone -> neck -> decoder -> per-instance mask logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ops
from ..autodiff import Var
from ..decoder import BarisDecoder, DecoderConfig
from ..nn import Module
from ..rng import stream
from .backbone import BackboneConfig, EraSettings, Neck, StageAdapters, ToyBackbone

# logit assigned outside an instance's box
OUTSIDE_LOGIT = -10.0


class SegModel(Module):
    """Each part draws its initial weights from its own named stream, so
    switching adapters on or off leaves every other weight unchanged."""

    def __init__(self, backbone_cfg: BackboneConfig, decoder_cfg: DecoderConfig, era: EraSettings,
                 seed: int, dtype=np.float32):
        self.backbone = ToyBackbone(backbone_cfg, stream(seed, "init/backbone"), dtype)
        self.adapters = (StageAdapters(backbone_cfg.widths, era, stream(seed, "init/era"), dtype)
                         if era.enabled else None)
        self.neck = Neck(backbone_cfg.widths, decoder_cfg.channels, stream(seed, "init/neck"), dtype)
        self.decoder = BarisDecoder(decoder_cfg, stream(seed, "init/decoder"), dtype)

    def freeze_backbone(self) -> None:
        """Adapter tuning: backbone frozen, adapters/neck/decoder trainable."""
        if self.adapters is None:
            raise ValueError("freeze mode 'era' needs adapters enabled")
        self.requires_grad_(True)
        self.backbone.requires_grad_(False)

    def frozen_parameters(self) -> list[tuple[str, Var]]:
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    def trainable_parameters(self) -> list[tuple[str, Var]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def decode(self, images: Var) -> Var:
        """Decoder logits at decoder resolution, [B, classes, h, w]."""
        feats = self.backbone(images, self.adapters)
        return self.decoder(self.neck(feats))

    def __call__(self, images: Var) -> Var:
        """Mask logits bilinearly resized to the image size."""
        logits = self.decode(images)
        h, w = images.shape[2:]
        return ops.resize_bilinear(logits, h, w)


def resize_factor(decoder_side: int, image_side: int) -> float:
    return image_side / decoder_side


@dataclass
class InstanceTargets:
    scene_index: np.ndarray      # [N_inst]
    gt: np.ndarray               # [N_inst, 1, H, W] in {0, 1}
    inside: np.ndarray           # [N_inst, 1, H, W] box indicator


def assemble_instances(masks_per_scene: list[list[np.ndarray]], margin: int = 2, dtype=np.float32) -> InstanceTargets:
    """Pair every ground-truth mask with its scene's logit map, restricted to
    the mask's bounding box grown by ``margin`` pixels."""
    idx, gts, boxes = [], [], []
    for b, masks in enumerate(masks_per_scene):
        for m in masks:
            m2 = m.reshape(m.shape[-2:])
            h, w = m2.shape
            ys, xs = np.nonzero(m2)
            y0, y1 = max(0, ys.min() - margin), min(h, ys.max() + 1 + margin)
            x0, x1 = max(0, xs.min() - margin), min(w, xs.max() + 1 + margin)
            box = np.zeros((1, h, w), dtype=dtype)
            box[:, y0:y1, x0:x1] = 1
            idx.append(b)
            gts.append(m2[None].astype(dtype))
            boxes.append(box)
    if not idx:
        raise ValueError("batch has no instances")
    return InstanceTargets(np.asarray(idx), np.stack(gts), np.stack(boxes))


def instance_logits(logits: Var, targets: InstanceTargets) -> Var:
    """Per-instance logits: the class map inside the box, a constant outside."""
    picked = ops.take(logits, targets.scene_index, axis=0)
    inside = Var(targets.inside.astype(logits.dtype))
    outside = Var((1.0 - targets.inside).astype(logits.dtype) * OUTSIDE_LOGIT)
    return ops.add(ops.mul(picked, inside), outside)
