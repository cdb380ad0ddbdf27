"""Source-to-target style transfer and mixed-dataset construction.

Two modes. "stats" applies a deterministic per-band affine map that matches
the target domain's global band moments. "gan" trains two adversarial
generator/discriminator pairs (one per transfer direction) whose generator
re-styles tiles through an AdaIN bottleneck.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, gan_terms
from .networks import (discriminator_forward, generator_forward,
                       init_discriminator, init_generator)
from .optim import AdamState, adam_step, save_checkpoint
from .raster import Raster, rescale_back, rescale_unit

STATS_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DomainStyle:
    """Per-band mean and population std in [-1, 1] space."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float64)
        self.sigma = np.asarray(self.sigma, np.float64)
        if (self.sigma < 0).any():
            raise ValueError("std must be nonnegative")


@dataclass
class StyleTrainConfig:
    steps: int = 2000
    batch: int = 4
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")


def extract_domain_style(tiles):
    """Band moments over the valid pixels of a set of [-1, 1] tiles."""
    if not tiles:
        raise ValueError("empty tile set")
    total = None
    total_sq = None
    count = 0
    bands = tiles[0].bands
    for t in tiles:
        vals = t.samples[:, t.valid].astype(np.float64)
        if vals.shape[0] != bands:
            raise ValueError("tiles disagree on band count")
        if total is None:
            total = vals.sum(axis=1)
            total_sq = (vals * vals).sum(axis=1)
        else:
            total += vals.sum(axis=1)
            total_sq += (vals * vals).sum(axis=1)
        count += vals.shape[1]
    if count == 0:
        raise ValueError("no valid pixels")
    mu = total / count
    var = np.maximum(total_sq / count - mu * mu, 0.0)
    return DomainStyle(mu, np.sqrt(var))


def stylize_stats_mode(tile, source_style, target_style):
    """Per-band affine re-styling of a [-1, 1] tile, clamped to [-1, 1]."""
    if tile.bands != len(source_style.mu):
        raise ValueError("band count mismatch")
    s_mu = source_style.mu[:, None, None]
    s_sd = source_style.sigma[:, None, None]
    t_mu = target_style.mu[:, None, None]
    t_sd = target_style.sigma[:, None, None]
    out = t_sd * (tile.samples.astype(np.float64) - s_mu) / (s_sd + STATS_EPS) + t_mu
    np.clip(out, -1.0, 1.0, out=out)
    return Raster(out.astype("<f4"), tile.valid.copy(), tile.geotransform)


def _tile_array(tiles):
    return np.stack([t.samples.astype(np.float32) for t in tiles])


def _disc_accuracy(d_real, d_fake):
    return 0.5 * (float((d_real > 0.5).mean()) + float((d_fake < 0.5).mean()))


def _gan_value(d_real, d_fake):
    # raw adversarial objective: mean log D(real) + mean log(1 - D(fake))
    return float(np.log(d_real).mean() + np.log1p(-d_fake).mean())


def train_style(source_tiles, target_tiles, config, out_dir=None):
    """Adversarial training of both transfer directions.

    Each iteration performs, for each direction, a discriminator update on
    (real, generated) batches followed by a non-saturating generator update.
    Returns ({"g_st", "d_t", "g_ts", "d_s"}, log rows). Fully deterministic
    for a fixed config.
    """
    if not source_tiles or not target_tiles:
        raise ValueError("empty tile set")
    xs = _tile_array(source_tiles)
    xt = _tile_array(target_tiles)
    style_s = extract_domain_style(source_tiles)
    style_t = extract_domain_style(target_tiles)

    nets = {
        "g_st": init_generator(config.seed * 4 + 1),
        "d_t": init_discriminator(config.seed * 4 + 2),
        "g_ts": init_generator(config.seed * 4 + 3),
        "d_s": init_discriminator(config.seed * 4 + 4),
    }
    opt = {name: AdamState(lr=config.lr_g if name.startswith("g") else config.lr_d,
                           beta1=config.beta1)
           for name in nets}
    rng = np.random.default_rng(config.seed)
    log = []

    def direction_step(gen, disc, x_src, x_real, style):
        # discriminator update on a detached fake batch
        fake = generator_forward(nets[gen], Tensor(x_src), style.mu, style.sigma)
        with Tape() as tp:
            d_real = discriminator_forward(nets[disc], Tensor(x_real))
            d_fake = discriminator_forward(nets[disc], Tensor(fake.data))
            loss_d, _ = gan_terms(d_real, d_fake)
            backward(tp, loss_d, params=nets[disc].values())
        grads = {n: p.grad for n, p in nets[disc].items()}
        adam_step(nets[disc], grads, opt[disc])
        stats = (_gan_value(d_real.data, d_fake.data),
                 _disc_accuracy(d_real.data, d_fake.data))
        # generator update
        with Tape() as tp:
            fake = generator_forward(nets[gen], Tensor(x_src), style.mu, style.sigma)
            d_fake = discriminator_forward(nets[disc], fake)
            loss_g = ad.neg(ad.mean(ad.log(d_fake)))
            backward(tp, loss_g, params=nets[gen].values())
        grads = {n: p.grad for n, p in nets[gen].items()}
        adam_step(nets[gen], grads, opt[gen])
        return stats + (float(loss_d.data), float(loss_g.data))

    for step in range(config.steps):
        bs = rng.integers(0, len(xs), config.batch)
        bt = rng.integers(0, len(xt), config.batch)
        st = direction_step("g_st", "d_t", xs[bs], xt[bt], style_t)
        ts = direction_step("g_ts", "d_s", xt[bt], xs[bs], style_s)
        row = {"step": step,
               "gan_value_st": st[0], "disc_acc_st": st[1],
               "loss_d_st": st[2], "loss_g_st": st[3],
               "gan_value_ts": ts[0], "disc_acc_ts": ts[1],
               "loss_d_ts": ts[2], "loss_g_ts": ts[3]}
        log.append(row)
        if not all(np.isfinite(v) for k, v in row.items() if k != "step"):
            if out_dir is not None:
                for name, p in nets.items():
                    save_checkpoint(p, f"{out_dir}/diverged_{name}.ckpt")
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if out_dir is not None and (step + 1) % config.checkpoint_interval == 0:
            for name, p in nets.items():
                save_checkpoint(p, f"{out_dir}/{name}.ckpt")
    if out_dir is not None:
        for name, p in nets.items():
            save_checkpoint(p, f"{out_dir}/{name}.ckpt")
    return nets, log


def stylize_dataset(tiles, mode, generator=None, source_style=None,
                    target_style=None, batch=8):
    """Re-style U16 tiles into U16 tiles (one output per input, masks kept)."""
    if mode not in ("stats", "gan"):
        raise ValueError(f"unknown style mode {mode!r}")
    if mode == "gan" and generator is None:
        raise ValueError("gan mode requires a generator checkpoint")
    if mode == "stats" and (source_style is None or target_style is None):
        raise ValueError("stats mode requires both domain styles")
    out = []
    if mode == "stats":
        for t in tiles:
            unit = rescale_unit(t)
            styled = stylize_stats_mode(unit, source_style, target_style)
            out.append(rescale_back(styled))
        return out
    for start in range(0, len(tiles), batch):
        chunk = tiles[start:start + batch]
        x = np.stack([rescale_unit(t).samples for t in chunk])
        y = generator_forward(generator, Tensor(x),
                              target_style.mu, target_style.sigma)
        for t, arr in zip(chunk, y.data):
            styled = Raster(arr.astype("<f4"), t.valid.copy(), t.geotransform)
            out.append(rescale_back(styled))
    return out


def build_mixed_dataset(originals, stylized_paths):
    """Manifest rows for original plus stylized samples sharing labels.

    originals: list of (image_path, label_path); stylized_paths aligns with
    originals index-for-index.
    """
    if len(originals) != len(stylized_paths):
        raise ValueError(
            f"{len(stylized_paths)} stylized tiles for {len(originals)} originals")
    rows = []
    for (img, lab) in originals:
        rows.append({"image_path": str(img), "label_path": str(lab),
                     "origin": "original"})
    for (_, lab), styled in zip(originals, stylized_paths):
        rows.append({"image_path": str(styled), "label_path": str(lab),
                     "origin": "stylized"})
    return rows


def write_manifest(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_manifest(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def validate_manifest(rows):
    """Every stylized row must share its label with an original row."""
    original_labels = {r["label_path"] for r in rows if r["origin"] == "original"}
    for r in rows:
        if r["origin"] == "stylized" and r["label_path"] not in original_labels:
            raise ValueError(f"stylized entry {r['image_path']} has no original partner")
    return True
