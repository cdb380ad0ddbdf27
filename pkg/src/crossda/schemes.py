"""Land-cover class registries and recoding between schemes.

Three built-in schemes: the NALCMS classes present in the British Columbia
area, the CORINE classes present in the Norway area, and the shared 8-class
general scheme. Codes are stable small integers assigned in registry order
(NALCMS 1..14, CORINE 1..31, GENERAL 1..8). "Beaches dunes sands" is listed
under both Barren and Settlement in the published crosswalk; it is assigned
to Barren here and the conflict is noted in the emitted manifest.
"""

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .raster import LABEL_NODATA, Raster


class UnknownPolicy(Enum):
    ERROR = "error"
    MAP_TO_NODATA = "map_to_nodata"


class RecodeError(ValueError):
    pass


@dataclass(frozen=True)
class LabelScheme:
    scheme_id: str
    entries: tuple  # of (code, name, (r, g, b))

    def __post_init__(self):
        codes = [c for c, _, _ in self.entries]
        names = [n for _, n, _ in self.entries]
        if len(set(codes)) != len(codes) or len(set(names)) != len(names):
            raise ValueError("scheme codes and names must be unique")

    @property
    def codes(self):
        return [c for c, _, _ in self.entries]

    def name_of(self, code):
        for c, n, _ in self.entries:
            if c == code:
                return n
        raise KeyError(code)

    def code_of(self, name):
        for c, n, _ in self.entries:
            if n == name:
                return c
        raise KeyError(name)

    def color_of(self, code):
        for c, _, rgb in self.entries:
            if c == code:
                return rgb
        raise KeyError(code)


@dataclass(frozen=True)
class RecodeMap:
    from_scheme: str
    to_scheme: str
    mapping: dict  # code -> code
    unknown_policy: UnknownPolicy = UnknownPolicy.ERROR


@dataclass
class ClassDistribution:
    scheme_id: str
    fractions: dict  # code -> fraction of valid pixels


@dataclass
class CrosswalkMatrix:
    scheme_a: str
    scheme_b: str
    codes_a: list
    codes_b: list
    counts: np.ndarray  # (len(codes_a), len(codes_b))

    def total(self):
        return int(self.counts.sum())


GENERAL_NAMES = ["Forest", "Grassland", "Wetland", "Cropland", "Barren",
                 "Settlement", "Water", "Snow and glaciers"]

GENERAL_COLORS = [(0, 102, 0), (170, 204, 102), (102, 153, 153),
                  (230, 204, 77), (179, 138, 102), (204, 51, 51),
                  (51, 102, 204), (230, 242, 255)]

# (name, general class) in published crosswalk row order
_NALCMS_ROWS = [
    ("Temperate or sub-polar needleleaf forest", "Forest"),
    ("Sub-polar taiga needleleaf forest", "Forest"),
    ("Temperate or sub-polar broadleaf deciduous forest", "Forest"),
    ("Mixed forest", "Forest"),
    ("Temperate or sub-polar shrubland", "Grassland"),
    ("Temperate or sub-polar grassland", "Grassland"),
    ("Sub-polar or polar shrubland lichen moss", "Grassland"),
    ("Sub-polar or polar grassland lichen moss", "Grassland"),
    ("Wetland", "Wetland"),
    ("Cropland", "Cropland"),
    ("Barren lands", "Barren"),
    ("Urban", "Settlement"),
    ("Water", "Water"),
    ("Snow and ice", "Snow and glaciers"),
]

_CORINE_ROWS = [
    ("Broad-leaved forest", "Forest"),
    ("Coniferous forest", "Forest"),
    ("Mixed forest", "Forest"),
    ("Transitional woodland shrub", "Grassland"),
    ("Sparsely vegetated areas", "Grassland"),
    ("Green urban areas", "Grassland"),
    ("Moors and heathland", "Wetland"),
    ("Inland marshes", "Wetland"),
    ("Peat bog", "Wetland"),
    ("Non irrigated arable land", "Cropland"),
    ("Pasture", "Cropland"),
    ("Complex cultivation pattern", "Cropland"),
    ("Land principally occupied by agriculture with significant areas of "
     "natural vegetation", "Cropland"),
    ("Beaches dunes sands", "Barren"),  # also listed under Settlement; kept here
    ("Bare rock", "Barren"),
    ("Burnt areas", "Barren"),
    ("Mineral extraction site", "Barren"),
    ("Continuous urban fabric", "Settlement"),
    ("Discontinues urban fabric", "Settlement"),
    ("Industrial or commercial units", "Settlement"),
    ("Road and rail networks and associated lands", "Settlement"),
    ("Port areas", "Settlement"),
    ("Airports", "Settlement"),
    ("Dump site", "Settlement"),
    ("Construction site", "Settlement"),
    ("Sport and leisure facilities", "Settlement"),
    ("Intertidal flats", "Water"),
    ("Water courses", "Water"),
    ("Water bodies", "Water"),
    ("Sea and ocean", "Water"),
    ("Glaciers and perpetual snow", "Snow and glaciers"),
]

BEACHES_NOTE = ("'Beaches dunes sands' appears under both Barren and "
                "Settlement in the published crosswalk; assigned to Barren.")


def _palette(n, base):
    # deterministic distinct-ish colors for the fine schemes
    rng = np.random.default_rng(base)
    return [tuple(int(v) for v in rng.integers(32, 224, 3)) for _ in range(n)]


def builtin_schemes():
    """Return (nalcms, corine, general, nalcms->general map, corine->general map)."""
    general = LabelScheme(
        "GENERAL",
        tuple((i + 1, name, GENERAL_COLORS[i]) for i, name in enumerate(GENERAL_NAMES)),
    )
    ncolors = _palette(len(_NALCMS_ROWS), 1)
    nalcms = LabelScheme(
        "NALCMS",
        tuple((i + 1, name, ncolors[i]) for i, (name, _) in enumerate(_NALCMS_ROWS)),
    )
    ccolors = _palette(len(_CORINE_ROWS), 2)
    corine = LabelScheme(
        "CORINE",
        tuple((i + 1, name, ccolors[i]) for i, (name, _) in enumerate(_CORINE_ROWS)),
    )
    n2g = RecodeMap("NALCMS", "GENERAL",
                    {i + 1: general.code_of(g) for i, (_, g) in enumerate(_NALCMS_ROWS)})
    c2g = RecodeMap("CORINE", "GENERAL",
                    {i + 1: general.code_of(g) for i, (_, g) in enumerate(_CORINE_ROWS)})
    return nalcms, corine, general, n2g, c2g


def scheme_by_id(scheme_id):
    nalcms, corine, general, _, _ = builtin_schemes()
    table = {s.scheme_id: s for s in (nalcms, corine, general)}
    if scheme_id not in table:
        raise RecodeError(f"unknown scheme {scheme_id!r}")
    return table[scheme_id]


def recode_map_for(from_scheme, to_scheme="GENERAL"):
    _, _, _, n2g, c2g = builtin_schemes()
    for m in (n2g, c2g):
        if m.from_scheme == from_scheme and m.to_scheme == to_scheme:
            return m
    raise RecodeError(f"no built-in recode map {from_scheme} -> {to_scheme}")


def recode(labels, recode_map):
    """Apply a total code mapping per pixel; nodata pixels pass through."""
    if labels.bands != 1:
        raise RecodeError("labels must be single-band")
    codes = labels.samples[0]
    valid = labels.valid & (codes != LABEL_NODATA)
    lut = np.full(256, LABEL_NODATA, np.int32)
    for src, dst in recode_map.mapping.items():
        lut[src] = dst
    known = np.zeros(256, bool)
    for src in recode_map.mapping:
        known[src] = True
    unknown = valid & ~known[codes]
    if unknown.any():
        if recode_map.unknown_policy is UnknownPolicy.ERROR:
            idx = int(np.flatnonzero(unknown.ravel())[0])
            bad = int(codes.ravel()[idx])
            raise RecodeError(
                f"code {bad} at pixel {idx} not in scheme {recode_map.from_scheme}")
        # MAP_TO_NODATA: lut already sends unknown codes to nodata
    out = np.where(valid, lut[codes], codes.astype(np.int32))
    out_valid = labels.valid.copy()
    if recode_map.unknown_policy is UnknownPolicy.MAP_TO_NODATA:
        out_valid &= ~unknown
    return Raster(out.astype("<u1")[None], out_valid, labels.geotransform)


def class_distribution(labels, scheme):
    """Fraction of valid pixels per scheme code."""
    codes = labels.samples[0]
    valid = labels.valid & (codes != LABEL_NODATA)
    n = int(valid.sum())
    if n == 0:
        raise RecodeError("no valid pixels")
    vals = codes[valid]
    bad = set(np.unique(vals)) - set(scheme.codes)
    if bad:
        raise RecodeError(f"codes {sorted(bad)} not in scheme {scheme.scheme_id}")
    counts = np.bincount(vals, minlength=max(scheme.codes) + 1)
    return ClassDistribution(scheme.scheme_id,
                             {c: counts[c] / n for c in scheme.codes})


def crosswalk(labels_a, labels_b, scheme_a=None, scheme_b=None):
    """Co-occurrence counts over jointly valid pixels of two label rasters."""
    if labels_a.samples.shape != labels_b.samples.shape:
        raise RecodeError("label rasters differ in size")
    a = labels_a.samples[0]
    b = labels_b.samples[0]
    joint = (labels_a.valid & labels_b.valid
             & (a != LABEL_NODATA) & (b != LABEL_NODATA))
    av, bv = a[joint].astype(np.int64), b[joint].astype(np.int64)
    codes_a = scheme_a.codes if scheme_a else sorted(np.unique(av).tolist())
    codes_b = scheme_b.codes if scheme_b else sorted(np.unique(bv).tolist())
    ia = {c: i for i, c in enumerate(codes_a)}
    ib = {c: i for i, c in enumerate(codes_b)}
    counts = np.zeros((len(codes_a), len(codes_b)), np.int64)
    pair = av * 256 + bv
    uniq, cnt = np.unique(pair, return_counts=True)
    for p, c in zip(uniq, cnt):
        counts[ia[p // 256], ib[p % 256]] = c
    name_a = scheme_a.scheme_id if scheme_a else "A"
    name_b = scheme_b.scheme_id if scheme_b else "B"
    return CrosswalkMatrix(name_a, name_b, codes_a, codes_b, counts)


def scheme_manifest(scheme, recode_map=None, notes=None):
    """JSON-serializable manifest for a scheme and optional recode map."""
    doc = {
        "scheme_id": scheme.scheme_id,
        "entries": [{"code": c, "name": n, "color": list(rgb)}
                    for c, n, rgb in scheme.entries],
    }
    if recode_map is not None:
        doc["recode"] = [{"from": k, "to": v}
                         for k, v in sorted(recode_map.mapping.items())]
        doc["recode_to"] = recode_map.to_scheme
    if scheme.scheme_id == "CORINE":
        notes = (notes or []) + [BEACHES_NOTE]
    if notes:
        doc["notes"] = notes
    return doc


def write_scheme_manifest(scheme, path, recode_map=None):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scheme_manifest(scheme, recode_map), f, indent=2)
        f.write("\n")
