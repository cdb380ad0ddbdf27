"""Seeded synthetic two-domain benchmark.

Scenes are jittered-grid Voronoi mosaics of land-cover regions. Source
pixels carry per-class 6-band signatures (plus an additive sensor offset and
noise); target pixels get a per-band gain/bias transform, optional box blur,
and noise, with regions scaled up by the resolution ratio. Labels are exact
by construction and use NALCMS codes so the recoding stage is exercised.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import U16_HALF, Raster, raster_write

# NALCMS codes whose general classes are Forest, Grassland, Barren, Water
DEFAULT_CLASS_CODES = (1, 6, 11, 13)

DEFAULT_GAIN = (0.7, 1.3, 0.8, 1.25, 0.75, 1.2)
DEFAULT_BIAS = (0.05, -0.05, 0.08, -0.04, 0.06, -0.06)


@dataclass
class SynthSpec:
    seed: int = 17
    tiles_per_domain: int = 200
    tile_size: int = 64
    class_codes: tuple = DEFAULT_CLASS_CODES
    class_weights: tuple = None  # default: uniform
    signatures: np.ndarray = None  # (K, 6) in u16 space, derived from seed
    source_offset: int = 5000
    gain: tuple = DEFAULT_GAIN
    bias: tuple = DEFAULT_BIAS
    blur_radius: int = 1
    noise_std: float = 0.02  # in [-1, 1] units
    resolution_ratio: float = 1.5  # source pixel size / target pixel size
    region_step: int = 56  # source-domain Voronoi grid step in pixels

    def __post_init__(self):
        k = len(self.class_codes)
        if k > 8:
            raise ValueError("at most 8 classes")
        if self.class_weights is None:
            self.class_weights = tuple(1.0 / k for _ in range(k))
        if len(self.class_weights) != k:
            raise ValueError("one weight per class")
        if any(g <= 0 for g in self.gain):
            raise ValueError("gains must be positive")
        if self.noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        if self.signatures is None:
            rng = np.random.default_rng(self.seed + 1000)
            # well-separated band signatures per class
            base = rng.uniform(8000, 36000, (k, 6))
            self.signatures = base
        self.signatures = np.asarray(self.signatures, np.float64)
        if self.signatures.shape != (k, 6):
            raise ValueError("signatures must be (K, 6)")


def _scene_shape(spec):
    n = spec.tiles_per_domain
    cols = 10 if n % 10 == 0 else n
    rows = n // cols
    return rows * spec.tile_size, cols * spec.tile_size


def _box_blur(img, radius):
    if radius <= 0:
        return img
    k = 2 * radius + 1
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    csum = pad.cumsum(axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    vert = (csum[:, k:] - csum[:, :-k]) / k
    csum = vert.cumsum(axis=2)
    csum = np.concatenate([np.zeros_like(csum[:, :, :1]), csum], axis=2)
    return (csum[:, :, k:] - csum[:, :, :-k]) / k


def _region_classes(rng, spec, n_points):
    """Exact-proportion class assignment, shuffled deterministically."""
    counts = np.floor(np.asarray(spec.class_weights) * n_points).astype(int)
    while counts.sum() < n_points:
        counts[int(np.argmax(np.asarray(spec.class_weights) * n_points - counts))] += 1
    classes = np.repeat(np.arange(len(counts)), counts)
    rng.shuffle(classes)
    return classes


def _label_field(rng, spec, h, w, step):
    """Class-index map from a jittered-grid Voronoi mosaic."""
    gy = max(1, round(h / step))
    gx = max(1, round(w / step))
    ys = (np.arange(gy) + 0.5) * (h / gy)
    xs = (np.arange(gx) + 0.5) * (w / gx)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    py = py + rng.uniform(-0.35, 0.35, py.shape) * (h / gy)
    px = px + rng.uniform(-0.35, 0.35, px.shape) * (w / gx)
    points = np.stack([py.ravel(), px.ravel()], axis=1)
    classes = _region_classes(rng, spec, len(points))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    # nearest region point per pixel, chunked to bound memory
    out = np.empty(h * w, np.int64)
    chunk = 16384
    for start in range(0, len(coords), chunk):
        d = ((coords[start:start + chunk, None] - points[None]) ** 2).sum(axis=2)
        out[start:start + chunk] = d.argmin(axis=1)
    return classes[out].reshape(h, w)


def synth_benchmark(spec):
    """Generate ((source_image, source_labels), (target_image, target_labels)).

    Images are U16 rasters, labels are U8 NALCMS-coded rasters; everything is
    a deterministic function of the spec.
    """
    h, w = _scene_shape(spec)
    sigs_unit = spec.signatures / U16_HALF - 1.0
    out = []
    for domain in ("source", "target"):
        rng = np.random.default_rng((spec.seed, domain == "target"))
        step = spec.region_step * (spec.resolution_ratio if domain == "target" else 1.0)
        field_idx = _label_field(rng, spec, h, w, step)
        unit = sigs_unit[field_idx].transpose(2, 0, 1)  # (6, h, w)
        if domain == "target":
            gain = np.asarray(spec.gain)[:, None, None]
            bias = np.asarray(spec.bias)[:, None, None]
            unit = gain * unit + bias
            unit = _box_blur(unit, spec.blur_radius)
        if spec.noise_std > 0:
            unit = unit + rng.normal(0.0, spec.noise_std, unit.shape)
        u16 = np.rint((unit + 1.0) * U16_HALF)
        if domain == "source" and spec.source_offset:
            u16 = u16 + spec.source_offset
        np.clip(u16, 0, 65535, out=u16)
        image = Raster(u16.astype("<u2"), np.ones((h, w), bool))
        codes = np.asarray(spec.class_codes, np.uint8)[field_idx]
        labels = Raster(codes[None].astype("<u1"), np.ones((h, w), bool))
        out.append((image, labels))
    return tuple(out)


def default_pipeline_config(out_dir, style_mode="stats", seg_steps=2000,
                            style_steps=2000, seed=17):
    """Pipeline config dict wired to the files write_benchmark emits."""
    out_dir = str(out_dir)
    return {
        "version": 1,
        "paths": {
            "source_image": f"{out_dir}/source_image.mbt",
            "source_labels": f"{out_dir}/source_labels.mbt",
            "target_image": f"{out_dir}/target_image.mbt",
            "target_labels": f"{out_dir}/target_labels.mbt",
            "out": f"{out_dir}/run_{style_mode}",
        },
        "preprocess": {
            "source_offsets": None,  # estimate from the histogram
            "target_offsets": [0, 0, 0, 0, 0, 0],
            "percentile": 0.005,
            "tile_size": 64,
            "stride": 64,
            "min_valid_fraction": 0.5,
        },
        "labels": {"scheme": "NALCMS"},
        "style": {
            "mode": style_mode,
            "train": {"steps": style_steps, "batch": 4, "lr_g": 2e-4,
                      "lr_d": 2e-4, "beta1": 0.5, "seed": seed,
                      "checkpoint_interval": 500},
        },
        "segmentation": {"total_steps": seg_steps, "batch": 8, "base_lr": 1e-4,
                         "weight_decay": 5e-4, "power": 0.9, "augment": True,
                         "seed": seed},
        "evaluation": {"seed": seed, "points": 100},
    }


def write_benchmark(spec, out_dir, style_mode="stats", seg_steps=2000,
                    style_steps=2000):
    """Write benchmark rasters plus a ready-to-run pipeline config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (source, target) = synth_benchmark(spec)
    raster_write(source[0], out_dir / "source_image.mbt")
    raster_write(source[1], out_dir / "source_labels.mbt")
    raster_write(target[0], out_dir / "target_image.mbt")
    raster_write(target[1], out_dir / "target_labels.mbt")
    config = default_pipeline_config(out_dir, style_mode, seg_steps,
                                     style_steps, spec.seed)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
        f.write("\n")
    return config
