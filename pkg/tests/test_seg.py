import numpy as np
import pytest

from crossda.optim import (AdamState, PolySchedule, adam_step, init_param,
                           load_checkpoint, poly_lr, save_checkpoint)
from crossda.autodiff import Tensor
from crossda.networks import init_segmenter
from crossda.raster import LABEL_NODATA, Raster
from crossda.seg import (BandMeans, SegTrainConfig, augment,
                         compute_band_means, infer, normalize, pixel_accuracy,
                         train_seg)

RNG = np.random.default_rng(33)


def unit_tile(samples, valid=None):
    samples = np.asarray(samples, "<f4")
    if valid is None:
        valid = np.ones(samples.shape[1:], bool)
    return Raster(samples, np.asarray(valid, bool))


# -- optimizer ---------------------------------------------------------------

def test_adam_first_step_hand_value():
    # with zero weight decay the first Adam step moves by -lr * sign(g)
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([0.3, -0.5])}, state)
    assert p["w"].data == pytest.approx([0.9, -1.9], abs=1e-7)


def test_adam_weight_decay_pulls_to_zero():
    p = {"w": Tensor(np.array([5.0]))}
    state = AdamState(lr=0.01, weight_decay=0.1)
    for _ in range(200):
        adam_step(p, {"w": np.zeros(1)}, state)
    assert abs(p["w"].data[0]) < 5.0


def test_adam_lr_override():
    p = {"w": Tensor(np.array([1.0]))}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0])}, state, lr=0.0)
    assert p["w"].data[0] == 1.0


def test_poly_schedule():
    sched = PolySchedule(1e-2, 100, 0.9)
    assert poly_lr(sched, 0) == pytest.approx(1e-2)
    assert poly_lr(sched, 100) == 0.0
    assert poly_lr(sched, 50) == pytest.approx(1e-2 * 0.5 ** 0.9)
    with pytest.raises(ValueError):
        poly_lr(sched, 101)


def test_poly_monotone_decreasing():
    sched = PolySchedule(1e-3, 50, 0.9)
    lrs = [poly_lr(sched, s) for s in range(51)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_init_param_scale_and_determinism():
    rng1, rng2 = np.random.default_rng(0), np.random.default_rng(0)
    a = init_param(rng1, (16, 8, 3, 3), 8 * 9)
    b = init_param(rng2, (16, 8, 3, 3), 8 * 9)
    assert np.array_equal(a.data, b.data)
    assert np.abs(a.data).max() <= 1 / np.sqrt(8 * 9)


def test_checkpoint_roundtrip(tmp_path):
    params = init_segmenter(7)
    p = tmp_path / "m.ckpt"
    save_checkpoint(params, p)
    back = load_checkpoint(p)
    assert set(back) == set(params)
    for name in params:
        assert np.array_equal(back[name].data, params[name].data)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"JUNKxxxx")
    with pytest.raises(ValueError):
        load_checkpoint(p)


# -- normalization -----------------------------------------------------------

def test_band_means_closed_form():
    t = unit_tile(np.stack([np.full((2, 2), 0.25), np.full((2, 2), -0.5)]))
    m = compute_band_means([t])
    assert m.values == pytest.approx([0.25, -0.5])


def test_band_means_joint_over_sets():
    a = unit_tile(np.full((1, 2, 2), 1.0))
    b = unit_tile(np.full((1, 2, 2), 0.0))
    m = compute_band_means([a], [b])
    assert m.values[0] == pytest.approx(0.5)


def test_band_means_empty():
    with pytest.raises(ValueError):
        compute_band_means([])


def test_normalize_zero_mean_result():
    t = unit_tile(RNG.uniform(-1, 1, (3, 8, 8)))
    out = normalize(t, compute_band_means([t]))
    assert np.abs(out.samples.mean(axis=(1, 2))) == pytest.approx(0.0, abs=1e-6)


def test_normalize_band_mismatch():
    with pytest.raises(ValueError):
        normalize(unit_tile(np.zeros((2, 2, 2))), BandMeans(np.zeros(6)))


# -- augmentation ------------------------------------------------------------

def test_augment_joint_transform():
    img = RNG.normal(size=(3, 8, 8)).astype(np.float32)
    lab = RNG.integers(0, 4, (8, 8))
    for seed in range(16):
        ai, al = augment(img, lab, np.random.default_rng(seed))
        assert ai.shape == img.shape and al.shape == lab.shape
        # pixel multisets survive any rotation/flip
        assert sorted(ai.ravel()) == sorted(img.ravel())
        # image and label move together: pair up one marked pixel
        marked = np.unravel_index(lab.argmax(), lab.shape)
        val = img[0][marked]
        where = np.argwhere(al == lab[marked])
        assert any(ai[0][tuple(ix)] == val for ix in where)


def test_augment_covers_all_eight():
    img = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    lab = np.arange(4).reshape(2, 2)
    seen = {tuple(augment(img, lab, np.random.default_rng(s))[1].ravel())
            for s in range(200)}
    assert len(seen) == 8


def test_augment_shape_mismatch():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 4, 4)), np.zeros((5, 5)), RNG)


# -- training ----------------------------------------------------------------

def _separable_data(n=16, size=16, k=4, seed=0):
    """Single-class tiles whose class is trivially readable from the bands."""
    rng = np.random.default_rng(seed)
    sigs = rng.uniform(-0.8, 0.8, (k, 6))
    images, targets = [], []
    for i in range(n):
        cls = i % k
        img = (sigs[cls][:, None, None]
               + rng.normal(0, 0.02, (6, size, size)))
        images.append(img.astype(np.float32))
        targets.append(np.full((size, size), cls))
    return np.stack(images), np.stack(targets)


def test_train_loss_decreases():
    images, targets = _separable_data()
    cfg = SegTrainConfig(batch=4, total_steps=30, base_lr=1e-3, seed=1,
                         num_classes=4)
    _, log = train_seg(None, cfg, None, images=images, targets=targets)
    assert len(log) == 30
    first = np.mean([r["loss"] for r in log[:5]])
    last = np.mean([r["loss"] for r in log[-5:]])
    assert last < first


def test_train_learns_separable_classes():
    images, targets = _separable_data(n=24)
    cfg = SegTrainConfig(batch=8, total_steps=500, base_lr=3e-4, seed=2,
                         num_classes=4)
    params, _ = train_seg(None, cfg, None, images=images, targets=targets)
    assert pixel_accuracy(params, images, targets, 4) >= 0.95


def test_train_deterministic():
    images, targets = _separable_data(n=8)
    cfg = SegTrainConfig(batch=4, total_steps=6, seed=5, num_classes=4)
    p1, log1 = train_seg(None, cfg, None, images=images, targets=targets)
    p2, log2 = train_seg(None, cfg, None, images=images, targets=targets)
    assert log1 == log2
    for name in p1:
        assert np.array_equal(p1[name].data, p2[name].data)


def test_train_ignores_nodata_pixels():
    images, targets = _separable_data(n=8)
    targets = targets.copy()
    targets[:, ::2, :] = LABEL_NODATA
    cfg = SegTrainConfig(batch=4, total_steps=5, seed=3, num_classes=4)
    _, log = train_seg(None, cfg, None, images=images, targets=targets)
    assert all(np.isfinite(r["loss"]) for r in log)


def test_train_empty_manifest():
    with pytest.raises(ValueError):
        train_seg([], SegTrainConfig(), BandMeans(np.zeros(6)))


# -- inference ---------------------------------------------------------------

def _u16_tiles(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [Raster(rng.integers(0, 65536, (6, size, size)).astype("<u2"),
                   rng.random((size, size)) > 0.1) for _ in range(n)]


def test_infer_shapes_and_nodata():
    params = init_segmenter(0)
    tiles = _u16_tiles(3)
    means = BandMeans(np.zeros(6))
    preds = infer(params, tiles, means)
    assert len(preds) == 3
    for t, p in zip(tiles, preds):
        assert p.samples.shape == (1, 16, 16)
        assert (p.samples[0][~t.valid] == LABEL_NODATA).all()
        valid_vals = p.samples[0][t.valid]
        assert (valid_vals < 8).all()


def test_infer_batch_invariant():
    params = init_segmenter(1)
    tiles = _u16_tiles(5, seed=4)
    means = BandMeans(np.full(6, 0.1))
    whole = infer(params, tiles, means)
    split = infer(params, tiles[:2], means) + infer(params, tiles[2:], means)
    for a, b in zip(whole, split):
        assert np.array_equal(a.samples, b.samples)


def test_infer_band_mismatch():
    params = init_segmenter(0)
    bad = Raster(np.zeros((2, 8, 8), "<u2"), np.ones((8, 8), bool))
    with pytest.raises(ValueError):
        infer(params, [bad], BandMeans(np.zeros(6)))
