"""CE-only vs CE+BACE on the synthetic benchmark over several seeds."""

from __future__ import annotations

import copy
import time

import numpy as np

from ..config import RunConfig
from . import metrics
from .data import generate_scene, split_seeds
from .pipeline import assemble_instances
from .train import train

LOSSES = ("ce_only", "ce_plus_bace")


def box_baseline(scenes, margin: int) -> dict:
    """Scores of predicting each instance's whole (grown) box."""
    t = assemble_instances([s.instance_masks for s in scenes], margin)
    return metrics.evaluate(np.where(t.inside > 0, 1.0, -1.0), t.gt)


def desk_comparison(n_scenes: int = 500, seeds=(0, 1, 2), epochs: int = 10, base: RunConfig | None = None,
                    data_seed: int = 1000, out=None, report=print) -> dict:
    """Train both losses on the same in-memory split; returns per-run and mean scores."""
    from pathlib import Path
    scenes = {s: generate_scene(s) for s in range(data_seed, data_seed + n_scenes)}
    tr, va = split_seeds(list(scenes))
    train_scenes = [scenes[s] for s in tr]
    val_scenes = [scenes[s] for s in va]
    base = copy.deepcopy(base) if base is not None else RunConfig()
    base.train.epochs = epochs
    runs = {loss: [] for loss in LOSSES}
    seconds = {}
    for loss in LOSSES:
        t0 = time.perf_counter()
        for seed in seeds:
            cfg = copy.deepcopy(base)
            cfg.train.loss = loss
            cfg.train.seed = seed
            run_dir = Path(out) / f"{loss}_seed{seed}" if out else None
            rec = train(cfg, train_scenes, val_scenes, out_dir=run_dir)[-1]
            runs[loss].append({"seed": seed, "mask_iou": rec.mask_iou, "boundary_f": rec.boundary_f})
            if report:
                report(f"{loss:13s} seed {seed}: iou {rec.mask_iou:.4f}  bf {rec.boundary_f:.4f}")
        seconds[loss] = time.perf_counter() - t0
    return {
        "n_train": len(train_scenes), "n_val": len(val_scenes),
        "batch_size": base.train.batch_size, "epochs": epochs,
        "box_baseline": box_baseline(val_scenes, base.train.box_margin),
        "runs": runs, "seconds": seconds,
        "mean": {k: {m: float(np.mean([r[m] for r in v])) for m in ("mask_iou", "boundary_f")}
                 for k, v in runs.items()},
    }
