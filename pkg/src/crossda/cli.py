"""Command-line interface for the adaptation toolkit.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import schemes as sch
from .metrics import (build_report, confusion, iou_from_confusion,
                      random_point_validation, render_labelmap, write_report)
from .pipeline import ConfigError, Pipeline, PipelineConfig
from .raster import (RasterError, TileSpec, band_stats, composite_bands,
                     estimate_shift_offsets, raster_read, raster_write,
                     shift_values, tile_dataset)
from .synth import SynthSpec, write_benchmark


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _offsets(text):
    return [int(v) for v in text.split(",")]


def build_parser():
    p = _Parser(prog="crossda",
                description="Cross-sensor domain adaptation pipeline")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="composite single-band MBT files")
    sp.add_argument("--bands", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("stats", help="per-band statistics of a raster")
    sp.add_argument("--input", required=True)
    sp.add_argument("--bins", type=int, default=256)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("shift", help="subtract per-band offsets")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--offsets", type=_offsets, default=None,
                    help="comma-separated per-band offsets")
    sp.add_argument("--percentile", type=float, default=0.005)

    sp = sub.add_parser("tile", help="cut aligned image/label tiles")
    sp.add_argument("--image", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--tile-size", type=int, default=512)
    sp.add_argument("--stride", type=int, default=0)
    sp.add_argument("--min-valid-fraction", type=float, default=0.5)

    sp = sub.add_parser("recode", help="recode labels between schemes")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--from", dest="from_scheme", default="NALCMS")
    sp.add_argument("--to", dest="to_scheme", default="GENERAL")

    for name in ("train-style", "stylize", "mix", "train-seg", "infer"):
        sp = sub.add_parser(name, help=f"run pipeline through the {name} stage")
        sp.add_argument("--config", required=True)

    sp = sub.add_parser("eval", help="IoU report for a label-map pair")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--points", type=int, default=0)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tiles", type=int, default=200)
    sp.add_argument("--tile-size", type=int, default=64)
    sp.add_argument("--mode", choices=("stats", "gan"), default="stats")
    sp.add_argument("--seg-steps", type=int, default=2000)
    sp.add_argument("--style-steps", type=int, default=2000)

    sp = sub.add_parser("run", help="execute the full pipeline")
    sp.add_argument("--config", required=True)

    sp = sub.add_parser("render", help="render a label raster to PPM")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--scheme", default="GENERAL")
    sp.add_argument("--out", required=True)
    return p


def _stage_sequence(pipe, upto):
    pipe.stage_shift()
    pipe.stage_tile()
    pipe.stage_recode()
    if upto == "recode":
        return
    pipe.stage_style()
    if upto == "train-style":
        return
    pipe.stage_stylize()
    if upto == "stylize":
        return
    pipe.stage_mix()
    if upto == "mix":
        return
    pipe.stage_means()
    pipe.stage_train_seg("baseline")
    pipe.stage_train_seg("adapted")
    if upto == "train-seg":
        return
    pipe.stage_infer("baseline")
    pipe.stage_infer("adapted")


def _cmd_stats(args):
    stats = band_stats(raster_read(args.input), args.bins)
    doc = {"bands": [
        {"min": stats.min[b], "max": stats.max[b],
         "mean": stats.mean[b], "std": stats.std[b]}
        for b in range(stats.bands)]}
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def _cmd_eval(args):
    ref = raster_read(args.ref)
    pred = raster_read(args.pred)
    report = iou_from_confusion(confusion(ref, pred, args.classes))
    doc = {"per_class": [round(v, 2) for v in report.per_class],
           "miou": round(report.miou, 2),
           "acc": round(report.pixel_accuracy, 4)}
    if args.points:
        pts = random_point_validation(ref, pred, n=args.points,
                                      seed=args.seed or 0)
        doc["points"] = {"seed": pts.seed, "n": len(pts.points),
                         "agreement": pts.agreement}
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def dispatch(args):
    if args.command == "ingest":
        bands = [raster_read(p) for p in args.bands]
        raster_write(composite_bands(bands), args.out)
    elif args.command == "stats":
        _cmd_stats(args)
    elif args.command == "shift":
        r = raster_read(args.input)
        offsets = args.offsets
        if offsets is None:
            offsets = estimate_shift_offsets(band_stats(r, bins=1024),
                                             args.percentile)
        if len(offsets) == 1:
            offsets = offsets * r.bands
        raster_write(shift_values(r, offsets), args.out)
    elif args.command == "tile":
        from pathlib import Path
        spec = TileSpec(args.tile_size, args.stride, args.min_valid_fraction)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        tiles = tile_dataset(raster_read(args.image), raster_read(args.labels),
                             spec)
        index = []
        for i, (img, lab, rec) in enumerate(tiles):
            raster_write(img, out / f"img_{i:05d}.mbt")
            raster_write(lab, out / f"lab_{i:05d}.mbt")
            index.append({"image": f"img_{i:05d}.mbt",
                          "labels": f"lab_{i:05d}.mbt",
                          "x": rec.x_off, "y": rec.y_off})
        with open(out / "index.json", "w", encoding="utf-8") as f:
            json.dump(index, f, indent=1)
    elif args.command == "recode":
        rmap = sch.recode_map_for(args.from_scheme, args.to_scheme)
        raster_write(sch.recode(raster_read(args.input), rmap), args.out)
    elif args.command in ("train-style", "stylize", "mix", "train-seg",
                          "infer"):
        pipe = Pipeline(PipelineConfig.from_file(args.config))
        _stage_sequence(pipe, args.command)
    elif args.command == "eval":
        _cmd_eval(args)
    elif args.command == "synth":
        spec = SynthSpec(seed=args.seed if args.seed is not None else 17,
                         tiles_per_domain=args.tiles,
                         tile_size=args.tile_size)
        write_benchmark(spec, args.out, style_mode=args.mode,
                        seg_steps=args.seg_steps,
                        style_steps=args.style_steps)
    elif args.command == "run":
        report = Pipeline(PipelineConfig.from_file(args.config)).run()
        print(json.dumps({"baseline_miou": report["baseline"]["miou"],
                          "adapted_miou": report["adapted"]["miou"],
                          "relative_gain": report["relative_gain"]}))
    elif args.command == "render":
        scheme = sch.scheme_by_id(args.scheme)
        render_labelmap(raster_read(args.labels), scheme, args.out)


def main(argv=None):
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        dispatch(args)
    except (ConfigError, RasterError, sch.RecodeError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - stage-tagged runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
