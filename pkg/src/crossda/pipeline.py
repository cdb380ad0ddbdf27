"""Configuration-driven orchestration of the full adaptation pipeline.

Stages: shift -> tile -> recode -> [train-style] -> stylize -> mix ->
train-seg (adapted and baseline) -> infer -> eval. Every stage writes a
manifest entry (stage name, parameter digest, input/output hashes, seed);
re-running with unchanged inputs skips work and reproduces identical output
hashes.
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import schemes as sch
from .metrics import (build_report, confusion, iou_from_confusion,
                      random_point_validation, render_labelmap, write_report)
from .networks import NUM_CLASSES
from .optim import load_checkpoint
from .raster import (LABEL_NODATA, Raster, TileSpec, band_stats,
                     estimate_shift_offsets, raster_read, raster_write,
                     rescale_unit, shift_values, tile_dataset)
from .seg import (BandMeans, SegTrainConfig, compute_band_means, infer,
                  load_training_arrays, train_seg)
from .style import (DomainStyle, StyleTrainConfig, build_mixed_dataset,
                    extract_domain_style, read_manifest, stylize_dataset,
                    train_style, validate_manifest, write_manifest)

log = logging.getLogger("crossda")

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


@dataclass
class PipelineConfig:
    paths: dict
    preprocess: dict
    labels: dict
    style: dict
    segmentation: dict
    evaluation: dict

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc.get('version')!r}")
        missing = {"paths", "preprocess", "labels", "style",
                   "segmentation", "evaluation"} - set(doc)
        if missing:
            raise ConfigError(f"missing config sections: {sorted(missing)}")
        cfg = cls(doc["paths"], doc["preprocess"], doc["labels"],
                  doc["style"], doc["segmentation"], doc["evaluation"])
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self):
        for key in ("source_image", "source_labels", "target_image",
                    "target_labels"):
            p = self.paths.get(key)
            if not p or not Path(p).exists():
                raise ConfigError(f"paths.{key}: missing file {p!r}")
        if "out" not in self.paths:
            raise ConfigError("paths.out is required")
        if self.style.get("mode") not in ("stats", "gan"):
            raise ConfigError(f"unknown style mode {self.style.get('mode')!r}")
        if self.labels.get("scheme") not in ("NALCMS", "CORINE"):
            raise ConfigError(f"unknown label scheme {self.labels.get('scheme')!r}")
        pp = self.preprocess
        if not 0 < pp.get("tile_size", 512):
            raise ConfigError("tile_size must be positive")
        pct = pp.get("percentile", 0.005)
        if not 0.0 <= pct <= 1.0:
            raise ConfigError("percentile must be in [0, 1]")
        if self.segmentation.get("total_steps", 1) < 1:
            raise ConfigError("segmentation.total_steps must be >= 1")

    def seg_config(self):
        s = self.segmentation
        return SegTrainConfig(
            batch=s.get("batch", 8), total_steps=s.get("total_steps", 2000),
            base_lr=s.get("base_lr", 1e-4),
            weight_decay=s.get("weight_decay", 5e-4),
            power=s.get("power", 0.9), augment=s.get("augment", True),
            seed=s.get("seed", 0))

    def style_config(self):
        t = self.style.get("train", {})
        return StyleTrainConfig(
            steps=t.get("steps", 2000), batch=t.get("batch", 4),
            lr_g=t.get("lr_g", 2e-4), lr_d=t.get("lr_d", 2e-4),
            beta1=t.get("beta1", 0.5), seed=t.get("seed", 0),
            checkpoint_interval=t.get("checkpoint_interval", 500))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _labels_to_indices(raster):
    """General codes 1..K -> network class indices 0..K-1, nodata preserved."""
    codes = raster.samples[0].astype(np.int64)
    idx = np.where((codes == LABEL_NODATA) | ~raster.valid, LABEL_NODATA,
                   codes - 1)
    return Raster(idx.astype("<u1")[None], raster.valid.copy(),
                  raster.geotransform)


def _indices_to_labels(raster):
    idx = raster.samples[0].astype(np.int64)
    codes = np.where((idx == LABEL_NODATA) | ~raster.valid, LABEL_NODATA,
                     idx + 1)
    return Raster(codes.astype("<u1")[None], raster.valid.copy(),
                  raster.geotransform)


class Pipeline:
    """Runs the staged pipeline under paths.out with hash-keyed resumption."""

    def __init__(self, config):
        self.cfg = config
        self.out = Path(config.paths["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.jsonl"
        self.entries = {}
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        e = json.loads(line)
                        self.entries[e["key"]] = e

    # -- stage machinery ---------------------------------------------------

    def _stage(self, name, params, inputs, outputs, fn, seed=None):
        """Run fn unless a matching manifest entry with intact outputs exists."""
        in_hashes = {str(p): _sha256(p) for p in inputs}
        key = hashlib.sha256(json.dumps(
            {"stage": name, "params": params, "inputs": in_hashes},
            sort_keys=True).encode()).hexdigest()
        entry = self.entries.get(key)
        if entry is not None and all(
                Path(p).exists() and _sha256(p) == h
                for p, h in entry["outputs"].items()):
            log.info("stage %s: up to date, skipping", name)
            return False
        log.info("stage %s: running", name)
        t0 = time.time()
        fn()
        entry = {
            "stage": name, "key": key, "params": params, "seed": seed,
            "inputs": in_hashes,
            "outputs": {str(p): _sha256(p) for p in outputs},
            "elapsed_s": round(time.time() - t0, 3),
        }
        self.entries[key] = entry
        with open(self.manifest_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
        return True

    # -- individual stages -------------------------------------------------

    def stage_shift(self):
        pp = self.cfg.preprocess
        for domain in ("source", "target"):
            src = self.cfg.paths[f"{domain}_image"]
            dst = self.out / f"shifted_{domain}.mbt"
            offsets = pp.get(f"{domain}_offsets")
            params = {"offsets": offsets, "percentile": pp.get("percentile", 0.005)}

            def fn(src=src, dst=dst, offsets=offsets):
                r = raster_read(src)
                if offsets is None:
                    stats = band_stats(r, bins=1024)
                    offsets = estimate_shift_offsets(
                        stats, pp.get("percentile", 0.005))
                    log.info("estimated %s offsets: %s", domain, offsets)
                raster_write(shift_values(r, offsets), dst)

            self._stage(f"shift-{domain}", params, [src], [dst], fn)

    def stage_tile(self):
        pp = self.cfg.preprocess
        spec = TileSpec(pp.get("tile_size", 512), pp.get("stride", 0) or 0,
                        pp.get("min_valid_fraction", 0.5))
        params = {"tile_size": spec.tile_size, "stride": spec.stride,
                  "min_valid_fraction": spec.min_valid_fraction}
        for domain in ("source", "target"):
            img_path = self.out / f"shifted_{domain}.mbt"
            lab_path = self.cfg.paths[f"{domain}_labels"]
            tdir = self.out / "tiles" / domain
            index_path = self.out / f"tiles_{domain}.json"

            def fn(img_path=img_path, lab_path=lab_path, tdir=tdir,
                   index_path=index_path):
                tdir.mkdir(parents=True, exist_ok=True)
                image = raster_read(img_path)
                labels = raster_read(lab_path)
                tiles = tile_dataset(image, labels, spec)
                index = []
                for i, (img, lab, rec) in enumerate(tiles):
                    ip = tdir / f"img_{i:05d}.mbt"
                    lp = tdir / f"lab_{i:05d}.mbt"
                    raster_write(img, ip)
                    raster_write(lab, lp)
                    index.append({"image": str(ip), "labels": str(lp),
                                  "x": rec.x_off, "y": rec.y_off})
                with open(index_path, "w", encoding="utf-8") as f:
                    json.dump(index, f, indent=1)
                    f.write("\n")

            self._stage(f"tile-{domain}", params, [img_path, lab_path],
                        [index_path], fn)

    def _tile_index(self, domain):
        with open(self.out / f"tiles_{domain}.json", encoding="utf-8") as f:
            return json.load(f)

    def stage_recode(self):
        scheme_id = self.cfg.labels["scheme"]
        rmap = sch.recode_map_for(scheme_id, "GENERAL")
        schemes_path = self.out / "schemes.json"
        for domain in ("source", "target"):
            index = self._tile_index(domain)
            inputs = [row["labels"] for row in index]
            outputs = [row["labels"].replace("lab_", "gen_") for row in index]

            def fn(index=index):
                for row in index:
                    lab = raster_read(row["labels"])
                    gen = sch.recode(lab, rmap)
                    raster_write(gen, row["labels"].replace("lab_", "gen_"))

            self._stage(f"recode-{domain}", {"scheme": scheme_id}, inputs,
                        outputs, fn)

        def write_schemes():
            fine = sch.scheme_by_id(scheme_id)
            doc = {
                "fine": sch.scheme_manifest(fine, rmap),
                "general": sch.scheme_manifest(sch.scheme_by_id("GENERAL")),
            }
            with open(schemes_path, "w", encoding="utf-8") as f:
                json.dump(doc, f, indent=2)
                f.write("\n")

        self._stage("schemes", {"scheme": scheme_id}, [], [schemes_path],
                    write_schemes)

    def _load_tiles(self, domain, kind="image"):
        index = self._tile_index(domain)
        keymap = {"image": "image", "labels": "labels"}
        out = []
        for row in index:
            path = row[keymap[kind]]
            if kind == "labels":
                path = path.replace("lab_", "gen_")
            out.append(raster_read(path))
        return out

    def stage_style(self):
        mode = self.cfg.style["mode"]
        styles_path = self.out / "styles.json"
        src_index = self._tile_index("source")
        tgt_index = self._tile_index("target")
        inputs = [r["image"] for r in src_index] + [r["image"] for r in tgt_index]

        def compute_styles():
            styles = {}
            for domain in ("source", "target"):
                tiles = [rescale_unit(t) for t in self._load_tiles(domain)]
                st = extract_domain_style(tiles)
                styles[domain] = {"mu": st.mu.tolist(), "sigma": st.sigma.tolist()}
            with open(styles_path, "w", encoding="utf-8") as f:
                json.dump(styles, f, indent=2)
                f.write("\n")

        self._stage("styles", {}, inputs, [styles_path], compute_styles)

        if mode == "gan":
            cfg = self.cfg.style_config()
            sdir = self.out / "style"
            outputs = [sdir / f"{n}.ckpt" for n in ("g_st", "d_t", "g_ts", "d_s")]
            params = {"steps": cfg.steps, "batch": cfg.batch, "lr_g": cfg.lr_g,
                      "lr_d": cfg.lr_d, "beta1": cfg.beta1, "seed": cfg.seed}

            def fn():
                sdir.mkdir(parents=True, exist_ok=True)
                src = [rescale_unit(t) for t in self._load_tiles("source")]
                tgt = [rescale_unit(t) for t in self._load_tiles("target")]
                _, rows = train_style(src, tgt, cfg, out_dir=str(sdir))
                with open(sdir / "style_loss.csv", "w", encoding="utf-8") as f:
                    cols = list(rows[0].keys())
                    f.write(",".join(cols) + "\n")
                    for row in rows:
                        f.write(",".join(repr(row[c]) for c in cols) + "\n")

            self._stage("train-style", params, inputs, outputs, fn,
                        seed=cfg.seed)

    def _domain_styles(self):
        with open(self.out / "styles.json", encoding="utf-8") as f:
            doc = json.load(f)
        return (DomainStyle(np.array(doc["source"]["mu"]),
                            np.array(doc["source"]["sigma"])),
                DomainStyle(np.array(doc["target"]["mu"]),
                            np.array(doc["target"]["sigma"])))

    def stage_stylize(self):
        mode = self.cfg.style["mode"]
        src_index = self._tile_index("source")
        inputs = [r["image"] for r in src_index] + [self.out / "styles.json"]
        if mode == "gan":
            inputs.append(self.out / "style" / "g_st.ckpt")
        outputs = [r["image"].replace("img_", "sty_") for r in src_index]

        def fn():
            tiles = [raster_read(r["image"]) for r in src_index]
            source_style, target_style = self._domain_styles()
            generator = None
            if mode == "gan":
                generator = load_checkpoint(self.out / "style" / "g_st.ckpt")
            styled = stylize_dataset(tiles, mode, generator=generator,
                                     source_style=source_style,
                                     target_style=target_style)
            for r, s in zip(src_index, styled):
                raster_write(s, r["image"].replace("img_", "sty_"))

        self._stage("stylize", {"mode": mode}, inputs, outputs, fn)

    def stage_mix(self):
        src_index = self._tile_index("source")
        originals = [(r["image"], r["labels"].replace("lab_", "gen_"))
                     for r in src_index]
        stylized = [r["image"].replace("img_", "sty_") for r in src_index]
        orig_path = self.out / "originals.jsonl"
        mixed_path = self.out / "mixed.jsonl"

        def fn():
            rows = build_mixed_dataset(originals, stylized)
            validate_manifest(rows)
            write_manifest(rows, mixed_path)
            write_manifest([r for r in rows if r["origin"] == "original"],
                           orig_path)

        self._stage("mix", {}, [p for pair in originals for p in pair] + stylized,
                    [orig_path, mixed_path], fn)

    def stage_means(self):
        # each model normalizes with the means of its own training set plus
        # the validation (target) tiles, so the baseline stays independent of
        # the style mode
        tgt_index = self._tile_index("target")
        manifests = {"baseline": "originals.jsonl", "adapted": "mixed.jsonl"}
        outputs = [self.out / f"means_{w}.json" for w in manifests]
        rows = {w: read_manifest(self.out / m) for w, m in manifests.items()}
        inputs = sorted({r["image_path"] for rs in rows.values() for r in rs}
                        | {r["image"] for r in tgt_index})

        def fn():
            val_tiles = [rescale_unit(raster_read(r["image"]))
                         for r in tgt_index]
            for which, manifest_rows in rows.items():
                train_tiles = [rescale_unit(raster_read(r["image_path"]))
                               for r in manifest_rows]
                means = compute_band_means(train_tiles, val_tiles)
                path = self.out / f"means_{which}.json"
                with open(path, "w", encoding="utf-8") as f:
                    json.dump({"means": means.values.tolist()}, f, indent=2)
                    f.write("\n")

        self._stage("means", {}, inputs, outputs, fn)

    def _band_means(self, which):
        with open(self.out / f"means_{which}.json", encoding="utf-8") as f:
            return BandMeans(np.array(json.load(f)["means"]))

    def _seg_rows(self, manifest_name):
        rows = read_manifest(self.out / manifest_name)
        # labels on disk are GENERAL codes; training wants class indices
        return rows

    def stage_train_seg(self, which):
        manifest_name = "mixed.jsonl" if which == "adapted" else "originals.jsonl"
        ckpt = self.out / f"{which}.ckpt"
        loss_csv = self.out / f"{which}_loss.csv"
        cfg = self.cfg.seg_config()
        rows = self._seg_rows(manifest_name)
        inputs = ([self.out / manifest_name, self.out / f"means_{which}.json"]
                  + [r["image_path"] for r in rows]
                  + [r["label_path"] for r in rows])
        params = {"config": vars(cfg).copy(), "manifest": manifest_name}

        def fn():
            means = self._band_means(which)
            images, targets = load_training_arrays(rows, means)
            targets = np.where(targets == LABEL_NODATA, LABEL_NODATA,
                               targets - 1)
            _, log_rows = train_seg(None, cfg, means, out_path=ckpt,
                                    images=images, targets=targets)
            with open(loss_csv, "w", encoding="utf-8") as f:
                f.write("step,lr,loss\n")
                for row in log_rows:
                    f.write(f"{row['step']},{row['lr']!r},{row['loss']!r}\n")

        self._stage(f"train-seg-{which}", params, inputs, [ckpt, loss_csv],
                    fn, seed=cfg.seed)

    def stage_infer(self, which):
        ckpt = self.out / f"{which}.ckpt"
        tgt_index = self._tile_index("target")
        pdir = self.out / f"pred_{which}"
        inputs = ([ckpt, self.out / f"means_{which}.json"]
                  + [r["image"] for r in tgt_index])
        outputs = [pdir / f"pred_{i:05d}.mbt" for i in range(len(tgt_index))]

        def fn():
            pdir.mkdir(parents=True, exist_ok=True)
            params = load_checkpoint(ckpt)
            means = self._band_means(which)
            tiles = [raster_read(r["image"]) for r in tgt_index]
            preds = infer(params, tiles, means)
            for i, p in enumerate(preds):
                raster_write(p, pdir / f"pred_{i:05d}.mbt")

        self._stage(f"infer-{which}", {}, inputs, outputs, fn)

    def _mosaic(self, domain, paths, tile_size):
        """Reassemble per-tile label rasters into a scene-sized raster."""
        index = self._tile_index(domain)
        ref = raster_read(self.cfg.paths[f"{domain}_labels"])
        canvas = np.full((ref.height, ref.width), LABEL_NODATA, np.uint8)
        valid = np.zeros((ref.height, ref.width), bool)
        for row, path in zip(index, paths):
            t = raster_read(path)
            y, x = row["y"], row["x"]
            canvas[y:y + tile_size, x:x + tile_size] = t.samples[0]
            valid[y:y + tile_size, x:x + tile_size] = t.valid
        return Raster(canvas[None], valid)

    def stage_eval(self):
        tgt_index = self._tile_index("target")
        src_index = self._tile_index("source")
        n = len(tgt_index)
        tile_size = self.cfg.preprocess.get("tile_size", 512)
        ev = self.cfg.evaluation
        report_path = self.out / "report.json"
        inputs = ([self.out / f"pred_baseline/pred_{i:05d}.mbt" for i in range(n)]
                  + [self.out / f"pred_adapted/pred_{i:05d}.mbt" for i in range(n)]
                  + [r["labels"].replace("lab_", "gen_") for r in tgt_index])
        outputs = [report_path, self.out / "pred_adapted.ppm",
                   self.out / "reference.ppm"]
        params = {"seed": ev.get("seed", 0), "points": ev.get("points", 100)}

        def fn():
            general = sch.scheme_by_id("GENERAL")
            reference = self._mosaic(
                "target", [r["labels"].replace("lab_", "gen_")
                           for r in tgt_index], tile_size)
            ref_idx = _labels_to_indices(reference)
            reports = {}
            preds = {}
            for which in ("baseline", "adapted"):
                pred = self._mosaic(
                    "target", [self.out / f"pred_{which}/pred_{i:05d}.mbt"
                               for i in range(n)], tile_size)
                preds[which] = pred
                reports[which] = iou_from_confusion(
                    confusion(ref_idx, pred, NUM_CLASSES))
            dists = {}
            for domain, index in (("source", src_index), ("target", tgt_index)):
                labels = self._mosaic(
                    domain, [r["labels"].replace("lab_", "gen_") for r in index],
                    tile_size)
                dist = sch.class_distribution(labels, general)
                dists[domain] = {general.name_of(c): round(f, 6)
                                 for c, f in dist.fractions.items()}
            points = random_point_validation(
                ref_idx, preds["adapted"], n=params["points"],
                seed=params["seed"])
            doc = build_report(reports["baseline"], reports["adapted"],
                               [name for _, name, _ in general.entries],
                               distributions=dists, points=points)
            write_report(doc, report_path)
            render_labelmap(_indices_to_labels(preds["adapted"]), general,
                            self.out / "pred_adapted.ppm")
            render_labelmap(reference, general, self.out / "reference.ppm")

        self._stage("eval", params, inputs, outputs, fn,
                    seed=params["seed"])

    # -- driver ------------------------------------------------------------

    def run(self):
        self.stage_shift()
        self.stage_tile()
        self.stage_recode()
        self.stage_style()
        self.stage_stylize()
        self.stage_mix()
        self.stage_means()
        self.stage_train_seg("baseline")
        self.stage_train_seg("adapted")
        self.stage_infer("baseline")
        self.stage_infer("adapted")
        self.stage_eval()
        with open(self.out / "report.json", encoding="utf-8") as f:
            return json.load(f)


def run(config):
    """Execute the full pipeline for a PipelineConfig; returns the report."""
    return Pipeline(config).run()
