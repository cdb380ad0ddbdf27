"""Multiband raster container, MBT binary format, and preprocessing ops.

Rasters hold band-sequential samples plus a per-pixel validity mask. The
on-disk MBT container is little-endian: magic "MBT1", u32 width, u32 height,
u16 bands, u16 dtype code (0=U8, 1=U16, 2=F32), u16 flags (bit 0: validmask
present), u16 reserved, 6 x f64 geotransform, band-sequential payload, then
width*height mask bytes when the flag is set.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MBT1"
HEADER = struct.Struct("<4sIIHHHH6d")

DTYPE_CODES = {"U8": 0, "U16": 1, "F32": 2}
DTYPE_NP = {"U8": np.dtype("<u1"), "U16": np.dtype("<u2"), "F32": np.dtype("<f4")}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

LABEL_NODATA = 255

# full physical 16-bit range used for [-1, 1] rescaling
U16_HALF = 32767.5


class RasterError(ValueError):
    """Base class for raster format/content errors."""


class FormatError(RasterError):
    """File does not start with the MBT magic."""


class CorruptError(RasterError):
    """Payload shorter than the header promises."""


class UnsupportedDtypeError(RasterError):
    """Dtype code not one of U8/U16/F32."""


@dataclass
class Raster:
    """In-memory raster: samples shaped (bands, height, width) plus validity.

    geotransform is (origin_x, origin_y, pixel_size_x, pixel_size_y) and is
    informational only.
    """

    samples: np.ndarray
    valid: np.ndarray
    geotransform: tuple = (0.0, 0.0, 1.0, 1.0)
    # whether the source file carried a validmask section; preserved so that
    # write(read(f)) stays byte-identical. Not part of equality.
    mask_flag: bool = True

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.samples.ndim == 2:
            self.samples = self.samples[None]
        if self.samples.ndim != 3:
            raise RasterError("samples must be (bands, height, width)")
        if self.valid.shape != self.samples.shape[1:]:
            raise RasterError("validmask shape does not match raster size")
        if self.dtype not in DTYPE_CODES:
            raise UnsupportedDtypeError(f"unsupported dtype {self.samples.dtype}")
        if self.geotransform[2] == 0 or self.geotransform[3] == 0:
            raise RasterError("pixel sizes must be nonzero")

    @property
    def bands(self):
        return self.samples.shape[0]

    @property
    def height(self):
        return self.samples.shape[1]

    @property
    def width(self):
        return self.samples.shape[2]

    @property
    def dtype(self):
        for name, dt in DTYPE_NP.items():
            if self.samples.dtype == dt:
                return name
        return str(self.samples.dtype)

    def copy(self):
        return Raster(self.samples.copy(), self.valid.copy(), self.geotransform,
                      self.mask_flag)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.samples.dtype == other.samples.dtype
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.valid, other.valid)
            and self.geotransform == other.geotransform
        )


@dataclass
class BandStats:
    """Per-band summary statistics over valid pixels.

    Histograms use uniform bins covering [min, max] per band.
    """

    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray  # population std
    hist_edge: np.ndarray  # lower edge per band
    hist_width: np.ndarray  # bin width per band
    hist_counts: np.ndarray  # (bands, bins)

    @property
    def bands(self):
        return len(self.mean)


@dataclass
class TileSpec:
    tile_size: int = 512
    stride: int = 0  # 0 means tile_size (non-overlapping)
    min_valid_fraction: float = 0.5

    def __post_init__(self):
        if self.stride == 0:
            self.stride = self.tile_size
        if self.tile_size <= 0:
            raise RasterError("tile_size must be positive")
        if not 0 < self.stride <= self.tile_size:
            raise RasterError("stride must be in (0, tile_size]")
        if not 0.0 <= self.min_valid_fraction <= 1.0:
            raise RasterError("min_valid_fraction must be in [0, 1]")


@dataclass
class TileRecord:
    x_off: int
    y_off: int
    valid_fraction: float


def raster_write(r, path):
    """Write a Raster to an MBT file (always with a validmask)."""
    gt = r.geotransform
    flags = 1 if r.mask_flag else 0
    header = HEADER.pack(
        MAGIC, r.width, r.height, r.bands, DTYPE_CODES[r.dtype], flags, 0,
        gt[0], gt[1], gt[2], gt[3], 0.0, 0.0,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(r.samples, dtype=DTYPE_NP[r.dtype]).tobytes())
        if flags:
            f.write(r.valid.astype("<u1").tobytes())


def raster_read(path):
    """Read an MBT file into a Raster."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER.size or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an MBT file")
    (_, width, height, bands, code, flags, _reserved,
     ox, oy, px, py, _z0, _z1) = HEADER.unpack_from(data)
    if code not in CODE_DTYPES:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_NP[CODE_DTYPES[code]]
    n = width * height
    payload = n * bands * dtype.itemsize
    need = HEADER.size + payload + (n if flags & 1 else 0)
    if len(data) < need:
        raise CorruptError(f"{path}: truncated payload ({len(data)} < {need} bytes)")
    samples = np.frombuffer(data, dtype=dtype, count=n * bands, offset=HEADER.size)
    samples = samples.reshape(bands, height, width)
    if flags & 1:
        mask = np.frombuffer(data, dtype="<u1", count=n, offset=HEADER.size + payload)
        valid = mask.reshape(height, width).astype(bool)
    else:
        valid = np.ones((height, width), bool)
    return Raster(samples.copy(), valid.copy(), (ox, oy, px, py),
                  mask_flag=bool(flags & 1))


def composite_bands(inputs):
    """Stack single-band rasters into one multiband raster (mask = AND)."""
    if not inputs:
        raise RasterError("no input bands")
    first = inputs[0]
    for r in inputs:
        if r.bands != 1:
            raise RasterError("composite inputs must be single-band")
        if (r.height, r.width) != (first.height, first.width):
            raise RasterError("input band dimensions differ")
        if r.dtype != first.dtype:
            raise RasterError("input band dtypes differ")
    samples = np.concatenate([r.samples for r in inputs], axis=0)
    valid = np.logical_and.reduce([r.valid for r in inputs])
    return Raster(samples, valid, first.geotransform)


def band_stats(r, bins=256):
    """Per-band min/max/mean/population-std/histogram over valid pixels."""
    if not r.valid.any():
        raise RasterError("all pixels invalid")
    vals = r.samples[:, r.valid].astype(np.float64)  # (bands, n_valid)
    mn = vals.min(axis=1)
    mx = vals.max(axis=1)
    mean = vals.mean(axis=1)
    std = vals.std(axis=1)
    width = (mx - mn) / bins
    counts = np.empty((r.bands, bins), np.int64)
    for b in range(r.bands):
        hi = mx[b] if mx[b] > mn[b] else mn[b] + 1.0
        counts[b] = np.histogram(vals[b], bins=bins, range=(mn[b], hi))[0]
    return BandStats(mn, mx, mean, std, mn.copy(), width, counts)


def shift_values(r, offsets):
    """Subtract a per-band offset from valid U16 samples, clamping at 0."""
    if r.dtype != "U16":
        raise RasterError("shift_values requires a U16 raster")
    offsets = np.asarray(offsets, np.int64)
    if offsets.shape != (r.bands,):
        raise RasterError("need one offset per band")
    shifted = r.samples.astype(np.int64) - offsets[:, None, None]
    np.clip(shifted, 0, 65535, out=shifted)
    out = np.where(r.valid[None], shifted, r.samples.astype(np.int64))
    return Raster(out.astype("<u2"), r.valid.copy(), r.geotransform)


def estimate_shift_offsets(stats, percentile=0.005):
    """Per-band offset = histogram value at the given lower percentile, floored."""
    if not 0.0 <= percentile <= 1.0:
        raise RasterError("percentile must be in [0, 1]")
    offsets = []
    for b in range(stats.bands):
        counts = stats.hist_counts[b]
        total = counts.sum()
        target = percentile * total
        cum = 0
        value = stats.min[b]
        for i, c in enumerate(counts):
            if cum + c >= target and c > 0:
                frac = (target - cum) / c if c else 0.0
                frac = min(max(frac, 0.0), 1.0)
                value = stats.hist_edge[b] + stats.hist_width[b] * (i + frac)
                break
            cum += c
        offsets.append(int(np.floor(value)))
    return offsets


def set_nodata_mask(r, mask):
    """AND NOT the given nodata mask into the raster's validity."""
    mask = np.asarray(mask, bool)
    if mask.shape != (r.height, r.width):
        raise RasterError("mask shape does not match raster")
    return Raster(r.samples.copy(), r.valid & ~mask, r.geotransform)


def tile_dataset(image, labels, spec=None):
    """Cut aligned (image, label) tiles; drop windows below min_valid_fraction.

    Validity is judged on the joint mask (image AND labels). Windows are
    emitted row-major by offset, fully inside the raster bounds.
    """
    spec = spec or TileSpec()
    if (image.height, image.width) != (labels.height, labels.width):
        raise RasterError("image/labels dimension mismatch")
    if labels.bands != 1:
        raise RasterError("labels must be single-band")
    t, s = spec.tile_size, spec.stride
    joint = image.valid & labels.valid
    out = []
    for y in range(0, image.height - t + 1, s):
        for x in range(0, image.width - t + 1, s):
            window = joint[y:y + t, x:x + t]
            frac = window.mean()
            if frac >= spec.min_valid_fraction:
                img = Raster(image.samples[:, y:y + t, x:x + t].copy(),
                             image.valid[y:y + t, x:x + t].copy(),
                             image.geotransform)
                lab = Raster(labels.samples[:, y:y + t, x:x + t].copy(),
                             labels.valid[y:y + t, x:x + t].copy(),
                             labels.geotransform)
                out.append((img, lab, TileRecord(x, y, float(frac))))
    return out


def rescale_unit(r):
    """Map U16 samples over the fixed range [0, 65535] onto [-1, 1] (F32)."""
    if r.dtype != "U16":
        raise RasterError("rescale_unit requires a U16 raster")
    vals = (r.samples.astype(np.float64) / U16_HALF - 1.0).astype("<f4")
    return Raster(vals, r.valid.copy(), r.geotransform)


def rescale_back(r, eps=1e-6):
    """Inverse of rescale_unit: [-1, 1] floats back to U16, rounded."""
    if r.dtype != "F32":
        raise RasterError("rescale_back requires an F32 raster")
    vals = r.samples.astype(np.float64)
    finite = vals[np.isfinite(vals)]
    if finite.size and (finite.min() < -1.0 - eps or finite.max() > 1.0 + eps):
        raise RasterError("values outside [-1, 1]")
    u = np.rint((vals + 1.0) * U16_HALF)
    np.clip(u, 0, 65535, out=u)
    return Raster(u.astype("<u2"), r.valid.copy(), r.geotransform)
