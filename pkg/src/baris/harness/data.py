"""Synthetic underwater-like instance scenes.

A scene is rendered clean (gradient background plus a few anti-aliased
shapes), its masks are recorded from pixel centres, and only then is the
image degraded: per-channel attenuation, Gaussian scatter blur, a convex
blend toward a uniform veil, and additive Gaussian noise.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..rng import stream
from . import imageio

MIN_MASK_PIXELS = 16
SUPERSAMPLE = 4


@dataclass
class DegradationParams:
    attenuation: tuple = (1.0, 1.0, 1.0)
    scatter_blur_sigma: float = 0.0
    haze_strength: float = 0.0
    noise_sigma: float = 0.0
    veil: tuple = (0.1, 0.5, 0.6)

    def __post_init__(self):
        if len(self.attenuation) != 3 or not all(0.0 <= a <= 1.0 for a in self.attenuation):
            raise ValueError(f"attenuation must be three values in [0, 1], got {self.attenuation}")
        if self.scatter_blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be >= 0")
        if not 0.0 <= self.haze_strength <= 1.0:
            raise ValueError(f"haze_strength must lie in [0, 1], got {self.haze_strength}")


@dataclass
class SceneConfig:
    size: int = 64
    max_objects: int = 5
    atten_r: tuple = (0.2, 0.5)
    atten_g: tuple = (0.5, 0.8)
    atten_b: tuple = (0.7, 1.0)
    blur_sigma: tuple = (0.0, 1.2)
    haze: tuple = (0.0, 0.4)
    noise_sigma: tuple = (0.0, 0.04)

    def sample_degradation(self, rng: np.random.Generator) -> DegradationParams:
        return DegradationParams(
            attenuation=(float(rng.uniform(*self.atten_r)), float(rng.uniform(*self.atten_g)),
                         float(rng.uniform(*self.atten_b))),
            scatter_blur_sigma=float(rng.uniform(*self.blur_sigma)),
            haze_strength=float(rng.uniform(*self.haze)),
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            veil=(float(rng.uniform(0.0, 0.3)), float(rng.uniform(0.4, 0.7)), float(rng.uniform(0.5, 0.8))),
        )


@dataclass
class SyntheticScene:
    image: np.ndarray            # [3, H, W] float in [0, 1]
    instance_masks: list         # each [1, H, W] uint8 in {0, 1}
    seed: int
    degradation: DegradationParams
    clean: np.ndarray | None = field(default=None, repr=False)

    def boxes(self) -> list[tuple[int, int, int, int]]:
        return [mask_box(m[0]) for m in self.instance_masks]


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive-exclusive pixel box (x0, y0, x1, y1) of a 2-D mask."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _inside(kind: str, shape: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "ellipse":
        cx, cy, a, b, th = shape["cx"], shape["cy"], shape["a"], shape["b"], shape["theta"]
        dx, dy = x - cx, y - cy
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    verts = shape["verts"]
    inside = np.ones(x.shape, dtype=bool)
    # convex polygon, counter-clockwise vertices
    for (x0, y0), (x1, y1) in zip(verts, np.roll(verts, -1, axis=0)):
        inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
    return inside


def _random_shape(rng: np.random.Generator, size: int) -> tuple[str, dict]:
    margin = size * 0.12
    cx, cy = rng.uniform(margin, size - margin, 2)
    if rng.random() < 0.5:
        return "ellipse", {"cx": cx, "cy": cy, "a": rng.uniform(0.08, 0.22) * size,
                           "b": rng.uniform(0.08, 0.22) * size, "theta": rng.uniform(0, np.pi)}
    k = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, k))
    radius = rng.uniform(0.12, 0.25) * size
    verts = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
    return "polygon", {"verts": verts}


def render_clean(rng: np.random.Generator, size: int, max_objects: int):
    """Clean image [3, H, W] and binary masks, masks sampled at pixel centres."""
    c0, c1 = rng.uniform(0.1, 0.6, 3), rng.uniform(0.1, 0.6, 3)
    ang = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    t = ((xx * np.cos(ang) + yy * np.sin(ang)) / size + 1.0) / 2.0
    t = np.clip(t, 0, 1)
    img = (1 - t)[None] * c0[:, None, None] + t[None] * c1[:, None, None]

    sub = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    sy, sx = np.meshgrid(sub, sub, indexing="ij")

    n_obj = int(rng.integers(1, max_objects + 1))
    masks = []
    occupied = np.zeros((size, size), dtype=bool)
    attempts = 0
    while len(masks) < n_obj and attempts < 50 * n_obj:
        attempts += 1
        kind, shape = _random_shape(rng, size)
        mask = _inside(kind, shape, xx, yy)
        if mask.sum() < MIN_MASK_PIXELS:
            continue
        if (mask & occupied).sum() > 0.1 * mask.sum():
            continue
        cover = _inside(kind, shape, sx, sy).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
        color = rng.uniform(0.45, 1.0, 3)
        img = img * (1 - cover)[None] + cover[None] * color[:, None, None]
        occupied |= mask
        masks.append(mask.astype(np.uint8)[None])
    return np.clip(img, 0, 1), masks


def degrade(img: np.ndarray, p: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    out = img * np.asarray(p.attenuation)[:, None, None]
    if p.scatter_blur_sigma > 0:
        out = np.stack([ndimage.gaussian_filter(ch, p.scatter_blur_sigma, mode="nearest") for ch in out])
    if p.haze_strength > 0:
        out = (1 - p.haze_strength) * out + p.haze_strength * np.asarray(p.veil)[:, None, None]
    if p.noise_sigma > 0:
        out = out + rng.normal(0.0, p.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(seed: int, cfg: SceneConfig | None = None,
                   degradation: DegradationParams | None = None) -> SyntheticScene:
    cfg = cfg or SceneConfig()
    clean, masks = render_clean(stream(seed, "scene/geometry"), cfg.size, cfg.max_objects)
    deg_rng = stream(seed, "scene/degradation")
    params = degradation if degradation is not None else cfg.sample_degradation(deg_rng)
    image = degrade(clean, params, stream(seed, "scene/noise"))
    return SyntheticScene(image=image, instance_masks=masks, seed=seed, degradation=params, clean=clean)


# ---------------------------------------------------------------- on-disk layout

def write_scene(root: Path, scene: SyntheticScene) -> None:
    d = Path(root) / "scenes" / str(scene.seed)
    d.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(d / "image.ppm", scene.image)
    for k, m in enumerate(scene.instance_masks):
        imageio.write_pgm(d / f"mask_{k}.pgm", m[0])
    meta = {"seed": scene.seed, "num_instances": len(scene.instance_masks),
            "degradation": asdict(scene.degradation)}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_scene(root: Path, seed: int) -> SyntheticScene:
    d = Path(root) / "scenes" / str(seed)
    meta = json.loads((d / "meta.json").read_text())
    image = imageio.read_ppm(d / "image.ppm")
    masks = [(imageio.read_pgm(d / f"mask_{k}.pgm") > 127).astype(np.uint8)[None]
             for k in range(meta["num_instances"])]
    deg = meta["degradation"]
    params = DegradationParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in deg.items()})
    return SyntheticScene(image=image, instance_masks=masks, seed=seed, degradation=params)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BARIS_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(out, count: int, seed: int, cfg: SceneConfig | None = None,
                     threads: int | None = None) -> Path:
    """Write scenes ``seed .. seed+count-1`` plus a root manifest.

    Each scene is a pure function of its own seed, so the bytes written do
    not depend on the number of worker threads.
    """
    cfg = cfg or SceneConfig()
    root = Path(out)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    seeds = list(range(seed, seed + count))

    def job(s):
        write_scene(root, generate_scene(s, cfg))

    threads = threads or worker_count()
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(job, seeds))
    else:
        for s in seeds:
            job(s)
    manifest = {"count": count, "first_seed": seed, "seeds": seeds, "scene_config": asdict(cfg)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def dataset_seeds(root) -> list[int]:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return list(manifest["seeds"])


def split_seeds(seeds, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Deterministic train/val split: the lowest-hashing seeds go to validation."""
    ranked = sorted(seeds, key=lambda s: hashlib.sha256(str(s).encode()).hexdigest())
    n_val = int(round(val_fraction * len(ranked)))
    val = set(ranked[:n_val])
    return [s for s in seeds if s not in val], [s for s in seeds if s in val]
