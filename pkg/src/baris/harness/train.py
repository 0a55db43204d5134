"""Training and evaluation loop for the synthetic benchmark."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import bace, bkt
from ..autodiff import Var, backward, no_grad
from ..rng import stream
from . import metrics
from .data import SyntheticScene, dataset_seeds, read_scene, split_seeds
from .optim import SGD, AdamW
from .pipeline import SegModel, assemble_instances, instance_logits

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class FreezeViolation(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    mask_iou: float
    boundary_f: float
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        # wall time is kept out so identical runs give identical bytes
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss,
                           "mask_iou": self.mask_iou, "boundary_f": self.boundary_f}, sort_keys=True)


def checksum(named_params) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def build_model(cfg) -> SegModel:
    dtype = np.dtype(cfg.train.dtype)
    model = SegModel(cfg.backbone, cfg.decoder, cfg.era, cfg.train.seed, dtype)
    if cfg.train.freeze == "era":
        model.freeze_backbone()
    return model


def load_split(cfg) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    root = Path(cfg.data.path)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest under {root}")
    train_seeds, val_seeds = split_seeds(dataset_seeds(root), cfg.data.val_fraction)
    return [read_scene(root, s) for s in train_seeds], [read_scene(root, s) for s in val_seeds]


def images_of(scenes, dtype) -> Var:
    return Var(np.stack([s.image for s in scenes]).astype(dtype))


def lr_at(tc, step: int, total: int) -> float:
    """Linear warmup, then step decay at fixed fractions of the run."""
    warm = max(1, math.ceil(tc.warmup_fraction * total))
    lr = tc.learning_rate * min(1.0, (step + 1) / warm)
    for frac in tc.decay_fractions:
        if step >= math.ceil(frac * total):
            lr *= tc.decay_factor
    return lr


def compute_loss(cfg, pred: Var, gt: np.ndarray) -> Var:
    if cfg.train.loss == "ce_only":
        return bace.ce_loss(pred, gt)
    bcfg = bace.BaceConfig(scale=cfg.bace.scale, lam=cfg.bace.lam, pool=cfg.bace.pool)
    return bace.total_loss(pred, gt, bcfg)


def predict_instances(model: SegModel, scenes, cfg, batch_size: int | None = None):
    """Instance logits and targets for ``scenes`` without recording a graph."""
    dtype = np.dtype(cfg.train.dtype)
    bs = batch_size or cfg.train.eval_batch_size
    preds, gts = [], []
    with no_grad():
        for i in range(0, len(scenes), bs):
            chunk = scenes[i:i + bs]
            targets = assemble_instances([s.instance_masks for s in chunk], cfg.train.box_margin, dtype)
            logits = model(images_of(chunk, dtype))
            preds.append(instance_logits(logits, targets).value)
            gts.append(targets.gt)
    return np.concatenate(preds), np.concatenate(gts)


def evaluate_model(model: SegModel, scenes, cfg) -> dict:
    if not scenes:
        return {"mask_iou": 1.0, "boundary_f": 1.0}
    pred, gt = predict_instances(model, scenes, cfg)
    return metrics.evaluate(pred, gt)


def train(cfg, train_scenes: list[SyntheticScene], val_scenes: list[SyntheticScene],
          out_dir=None, on_step: Optional[Callable] = None, model: SegModel | None = None) -> list[MetricsRecord]:
    """Run ``cfg.train.epochs`` epochs; returns one record per epoch.

    ``on_step(step, model, loss)`` runs after backward and before the
    parameter update, so gradients are visible to it.
    """
    cfg.validate()
    if not train_scenes:
        raise ValueError("training set is empty")
    tc = cfg.train
    dtype = np.dtype(tc.dtype)
    model = model or build_model(cfg)
    params = [p for _, p in model.trainable_parameters()]
    if tc.optimizer == "adamw":
        opt = AdamW(params, tc.learning_rate, (tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
    else:
        opt = SGD(params, tc.learning_rate)

    frozen = model.frozen_parameters()
    frozen_sum = checksum(frozen) if tc.freeze == "era" else None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.json").write_text(cfg.to_json())
        for name in ("metrics.jsonl", "timing.jsonl"):
            (out / name).write_text("")

    n = len(train_scenes)
    per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * per_epoch
    if tc.max_steps:
        total = min(total, tc.max_steps)

    records: list[MetricsRecord] = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(tc.epochs):
        if step >= total:
            break
        order = stream(tc.seed, f"shuffle/epoch{epoch}").permutation(n)
        losses = []
        for b in range(per_epoch):
            if step >= total:
                break
            chunk = [train_scenes[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]]
            targets = assemble_instances([s.instance_masks for s in chunk], tc.box_margin, dtype)
            pred = instance_logits(model(images_of(chunk, dtype)), targets)
            loss = compute_loss(cfg, pred, targets.gt)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            backward(loss)
            if on_step is not None:
                on_step(step, model, value)
            opt.step(lr_at(tc, step, total))
            opt.zero_grad()
            model.zero_grad()
            if frozen_sum is not None and checksum(frozen) != frozen_sum:
                raise FreezeViolation(f"frozen backbone parameters changed at step {step}")
            losses.append(value)
            step += 1
        scores = evaluate_model(model, val_scenes, cfg)
        rec = MetricsRecord(epoch=epoch, train_loss=float(np.mean(losses)), mask_iou=scores["mask_iou"],
                            boundary_f=scores["boundary_f"], wall_seconds=time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d loss %.4f iou %.4f bf %.4f (%.1fs)", epoch, rec.train_loss, rec.mask_iou,
                 rec.boundary_f, rec.wall_seconds)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
            with open(out / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_seconds": rec.wall_seconds}) + "\n")
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_model(model, out / "checkpoints" / f"epoch_{epoch:03d}", cfg)
    if out is not None:
        save_model(model, out / "checkpoints" / "final", cfg)
    return records


def save_model(model: SegModel, directory, cfg) -> Path:
    return bkt.save_checkpoint(directory, model.state_dict(), meta={"config": cfg.to_dict()})


def load_model(directory, cfg) -> SegModel:
    model = build_model(cfg)
    model.load_state_dict(bkt.load_checkpoint(directory))
    return model
