"""Segmenter training recipe and tile inference.

Training follows the recipe: rescale tiles to [-1, 1], subtract joint band
means, random rotation/flip augmentation, Adam with polynomial learning-rate
decay, nodata pixels excluded from the loss.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backward, softmax_xent
from .networks import NUM_CLASSES, init_segmenter, segmenter_forward
from .optim import AdamState, PolySchedule, adam_step, poly_lr, save_checkpoint
from .raster import LABEL_NODATA, Raster, raster_read, rescale_unit
from .style import TrainingDiverged


@dataclass
class BandMeans:
    values: np.ndarray  # one mean per band, [-1, 1] space

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("band means must be finite")


@dataclass
class SegTrainConfig:
    batch: int = 8
    total_steps: int = 2000
    base_lr: float = 1e-4
    weight_decay: float = 5e-4
    power: float = 0.9
    augment: bool = True
    seed: int = 0
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.batch < 1 or self.total_steps < 1:
            raise ValueError("batch and total_steps must be >= 1")


def compute_band_means(*tile_sets):
    """Mean per band over all valid pixels of every listed tile set."""
    total = None
    count = 0
    for tiles in tile_sets:
        for t in tiles:
            vals = t.samples[:, t.valid].astype(np.float64)
            if total is None:
                total = vals.sum(axis=1)
            else:
                total += vals.sum(axis=1)
            count += vals.shape[1]
    if count == 0:
        raise ValueError("no valid pixels in any tile set")
    return BandMeans(total / count)


def normalize(tile, means):
    """Subtract per-band means; validity untouched."""
    if tile.bands != len(means.values):
        raise ValueError("band count mismatch")
    out = tile.samples.astype(np.float64) - means.values[:, None, None]
    return Raster(out.astype("<f4"), tile.valid.copy(), tile.geotransform)


def augment(image, label, rng):
    """Apply one of rot{0,90,180,270} x {no-flip, h-flip} to both arrays.

    image: (C, H, W), label: (H, W); the same transform is applied to both.
    """
    if image.shape[-2:] != label.shape:
        raise ValueError("image/label tiles misaligned")
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    if flip:
        image = image[..., ::-1]
        label = label[..., ::-1]
    if k:
        image = np.rot90(image, k, axes=(-2, -1))
        label = np.rot90(label, k, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def load_training_arrays(manifest_rows, means):
    """Load manifest tiles into normalized image and target arrays.

    Labels are expected as class indices in [0, K) with nodata 255; image
    pixels that are invalid are also forced to nodata in the targets.
    """
    images, targets = [], []
    for row in manifest_rows:
        img = raster_read(row["image_path"])
        lab = raster_read(row["label_path"])
        unit = normalize(rescale_unit(img), means)
        t = lab.samples[0].astype(np.int64)
        t = np.where(lab.valid & img.valid, t, LABEL_NODATA)
        images.append(unit.samples)
        targets.append(t)
    return np.stack(images), np.stack(targets)


def train_seg(manifest_rows, config, means, out_path=None, images=None,
              targets=None):
    """Train the segmenter; returns (params, log rows).

    Pass preloaded (images, targets) to skip manifest IO. Deterministic for a
    fixed seed; aborts with a diagnostic checkpoint on non-finite loss.
    """
    if images is None:
        if not manifest_rows:
            raise ValueError("empty training manifest")
        images, targets = load_training_arrays(manifest_rows, means)
    sched = PolySchedule(config.base_lr, config.total_steps, config.power)
    params = init_segmenter(config.seed, config.num_classes)
    state = AdamState(lr=config.base_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(images)
    log = []
    for step in range(config.total_steps):
        idx = rng.integers(0, n, config.batch)
        xb = images[idx]
        yb = targets[idx]
        if config.augment:
            pairs = [augment(x, y, rng) for x, y in zip(xb, yb)]
            xb = np.stack([p[0] for p in pairs])
            yb = np.stack([p[1] for p in pairs])
        lr = poly_lr(sched, step)
        with Tape() as tp:
            logits = segmenter_forward(params, Tensor(xb), config.num_classes)
            loss = softmax_xent(logits, yb, LABEL_NODATA)
            backward(tp, loss, params=params.values())
        if not np.isfinite(loss.data):
            if out_path is not None:
                save_checkpoint(params, str(out_path) + ".diverged")
            raise TrainingDiverged(f"non-finite segmentation loss at step {step}")
        grads = {name: p.grad for name, p in params.items()}
        adam_step(params, grads, state, lr=lr)
        log.append({"step": step, "lr": lr, "loss": float(loss.data)})
    if out_path is not None:
        save_checkpoint(params, out_path)
    return params, log


def infer(params, tiles, means, num_classes=NUM_CLASSES):
    """Argmax label tiles for U16 image tiles; invalid pixels become nodata.

    Tiles are processed one at a time so the result is independent of any
    batch partitioning of the input list.
    """
    bands = len(means.values)
    out = []
    for t in tiles:
        if t.bands != bands:
            raise ValueError("tile band count does not match means")
        x = normalize(rescale_unit(t), means).samples[None]
        logits = segmenter_forward(params, Tensor(x), num_classes)
        pred = logits.data[0].argmax(axis=0).astype("<u1")
        pred = np.where(t.valid, pred, LABEL_NODATA).astype("<u1")
        out.append(Raster(pred[None], t.valid.copy(), t.geotransform))
    return out


def pixel_accuracy(params, images, targets, num_classes=NUM_CLASSES):
    """Training-style accuracy over preloaded normalized arrays."""
    correct = 0
    total = 0
    for x, y in zip(images, targets):
        logits = segmenter_forward(params, Tensor(x[None]), num_classes)
        pred = logits.data[0].argmax(axis=0)
        keep = y != LABEL_NODATA
        correct += int((pred[keep] == y[keep]).sum())
        total += int(keep.sum())
    return correct / total if total else 0.0
