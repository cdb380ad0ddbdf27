"""Confusion matrices, per-class IoU / mIoU, random-point validation, and
report emission.

mIoU is the unweighted mean over all K classes; classes with an empty union
score 0 and are flagged absent. Percentages are reported to two decimals.
"""

import json
from dataclasses import dataclass

import numpy as np

from .raster import LABEL_NODATA


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows = reference, cols = prediction
    ignored: int

    @property
    def k(self):
        return self.counts.shape[0]

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts,
                               self.ignored + other.ignored)


@dataclass
class IoUReport:
    per_class: list  # IoU percent per class
    miou: float  # percent
    pixel_accuracy: float
    present: list  # union > 0 per class


@dataclass
class PointSample:
    seed: int
    points: list  # (x, y, reference code, predicted code)
    agreement: float


def confusion(reference, prediction, k):
    """Counts over pixels valid (and non-nodata) in both rasters."""
    ref = reference.samples[0]
    pred = prediction.samples[0]
    if ref.shape != pred.shape:
        raise ValueError("reference/prediction size mismatch")
    joint = (reference.valid & prediction.valid
             & (ref != LABEL_NODATA) & (pred != LABEL_NODATA))
    rv = ref[joint].astype(np.int64)
    pv = pred[joint].astype(np.int64)
    if rv.size and (rv.max() >= k or pv.max() >= k):
        raise ValueError(f"label code >= K={k}")
    counts = np.bincount(rv * k + pv, minlength=k * k).reshape(k, k)
    ignored = int(ref.size - joint.sum())
    return ConfusionMatrix(counts, ignored)


def iou_from_confusion(m):
    """Per-class IoU (percent), mean over all K classes, pixel accuracy."""
    diag = np.diag(m.counts).astype(np.float64)
    rows = m.counts.sum(axis=1).astype(np.float64)
    cols = m.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    present = union > 0
    iou = np.zeros(m.k)
    iou[present] = diag[present] / union[present]
    total = m.counts.sum()
    acc = float(diag.sum() / total) if total else 0.0
    return IoUReport([float(v) * 100.0 for v in iou],
                     float(iou.mean()) * 100.0, acc, present.tolist())


def miou_of(per_class_percent):
    """Mean of already-computed per-class IoU percentages (zeros included)."""
    return float(np.mean(per_class_percent))


def random_point_validation(reference, prediction, n=100, seed=0):
    """Sample n distinct jointly-valid pixels and score agreement."""
    ref = reference.samples[0]
    pred = prediction.samples[0]
    if ref.shape != pred.shape:
        raise ValueError("reference/prediction size mismatch")
    joint = (reference.valid & prediction.valid
             & (ref != LABEL_NODATA) & (pred != LABEL_NODATA))
    flat = np.flatnonzero(joint.ravel())
    if flat.size < n:
        raise ValueError(f"only {flat.size} jointly-valid pixels, need {n}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat, size=n, replace=False)
    w = ref.shape[1]
    points = []
    hits = 0
    for idx in chosen:
        y, x = divmod(int(idx), w)
        r, p = int(ref[y, x]), int(pred[y, x])
        points.append((x, y, r, p))
        hits += r == p
    return PointSample(seed, points, hits / n)


def render_labelmap(labels, scheme, path):
    """Write a binary PPM (P6) of a label raster using the scheme palette."""
    codes = labels.samples[0]
    h, w = codes.shape
    palette = np.zeros((256, 3), np.uint8)
    for code, _, rgb in scheme.entries:
        palette[code] = rgb
    unknown = set(np.unique(codes[labels.valid])) - set(scheme.codes) - {LABEL_NODATA}
    if unknown:
        raise ValueError(f"codes {sorted(unknown)} not in scheme {scheme.scheme_id}")
    img = palette[codes]
    img[~labels.valid] = 0
    img[codes == LABEL_NODATA] = 0
    with open(path, "wb") as f:
        f.write(f"P6 {w} {h} 255\n".encode("ascii"))
        f.write(img.tobytes())


def _report_side(report, class_names):
    return {
        "per_class": {name: round(v, 2)
                      for name, v in zip(class_names, report.per_class)},
        "miou": round(report.miou, 2),
        "acc": round(report.pixel_accuracy, 4),
    }


def build_report(baseline, adapted, class_names, distributions=None,
                 crosswalk_matrix=None, points=None):
    """Comparative report document (JSON-serializable)."""
    doc = {
        "baseline": _report_side(baseline, class_names),
        "adapted": _report_side(adapted, class_names),
        "per_class_delta": {
            name: round(a - b, 2)
            for name, b, a in zip(class_names, baseline.per_class, adapted.per_class)
        },
    }
    if baseline.miou > 0:
        doc["relative_gain"] = round(adapted.miou / baseline.miou - 1.0, 4)
    else:
        doc["relative_gain"] = "undefined"
    if distributions is not None:
        doc["distributions"] = distributions
    if crosswalk_matrix is not None:
        doc["crosswalk"] = {
            "scheme_a": crosswalk_matrix.scheme_a,
            "scheme_b": crosswalk_matrix.scheme_b,
            "codes_a": crosswalk_matrix.codes_a,
            "codes_b": crosswalk_matrix.codes_b,
            "counts": crosswalk_matrix.counts.tolist(),
        }
    if points is not None:
        doc["points"] = {"seed": points.seed, "n": len(points.points),
                         "agreement": points.agreement}
    return doc


def write_report(doc, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
