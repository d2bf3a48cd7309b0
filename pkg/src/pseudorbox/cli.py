"""Command-line entry point: ``pseudorbox <command> [options]``.

Commands:
  gen-pseudo   full pipeline over a dataset
  voronoi      Voronoi partition of the annotation points
  watershed    Voronoi-bounded watershed and the fitted boxes
  select-mask  score and pick candidate masks from a manifest
  assign       label assignment for one image at a given epoch
  eval-loss    losses of predicted boxes against watershed regions
  export-dota  rewrite DOTA files from a records file
  synth        write a synthetic dataset

The run configuration is a TOML file given by ``--config`` or by the
``PSEUDORBOX_CONFIG`` environment variable; command-line flags override it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .assign import pla
from .formats import (
    DatasetIndex,
    load_candidates,
    load_config,
    load_image,
    parse_annotations,
    parse_point_annotations,
    read_manifest,
    read_prediction_grids,
)
from .geometry import LabelMap, RBox, rbox_to_gaussian
from .losses import edge_map, gaussian_overlap_loss, l_pgdm
from .maskselect import METRIC_NAMES, select_best_mask
from .pipeline import instance_losses, read_records, run_pipeline, write_outputs
from .render import render_labels
from .synthetic import write_dataset
from .watershed import GrayImage, InstanceBasins, class_specific_watershed, fit_basin_boxes, voronoi_partition, voronoi_watershed

log = logging.getLogger("pseudorbox")


def _classes(arg: str) -> list[str]:
    p = Path(arg)
    if p.is_file():
        return [ln.strip() for ln in p.read_text().splitlines() if ln.strip()]
    return [c for c in arg.split(",") if c]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    g = p.add_argument_group("run configuration overrides")
    g.add_argument("--n-thr", type=int)
    g.add_argument("--switch-epoch", type=int)
    g.add_argument("--epoch", type=int)
    g.add_argument("--class-specific", action="store_true", default=None)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--center-radius", type=float)
    g.add_argument("--sigma-fg", type=float, help="foreground Gaussian sigma at the 1024 px reference")
    g.add_argument("--tau-bg", type=float)
    g.add_argument("--gradient-smoothing", type=float)
    g.add_argument("--no-scale-watershed", action="store_true", help="use watershed scales as absolute pixels")
    g.add_argument("--sigma-c-factor", type=float)
    g.add_argument("--lambda-color", type=float)
    g.add_argument("--k-ar", type=float)


def _config(args, class_table):
    cfg = load_config(args.config, class_table)
    top = {k: getattr(args, k) for k in ("n_thr", "switch_epoch", "epoch", "class_specific", "seed", "workers",
                                         "center_radius") if getattr(args, k, None) is not None}
    ws = {k: getattr(args, k) for k in ("sigma_fg", "tau_bg", "gradient_smoothing") if getattr(args, k) is not None}
    mp = {k: getattr(args, k) for k in ("sigma_c_factor", "lambda_color", "k_ar") if getattr(args, k) is not None}
    if ws:
        top["watershed"] = dataclasses.replace(cfg.watershed, **ws)
    if mp:
        top["metric_params"] = dataclasses.replace(cfg.metric_params, **mp)
    if args.no_scale_watershed:
        top["scale_watershed"] = False
    if getattr(args, "overlays", False):
        top["overlays"] = True
    return dataclasses.replace(cfg, **top) if top else cfg


def _single_image_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--classes", required=True, help="class file (one per line) or comma list")


def _load_single(args):
    classes = _classes(args.classes)
    cfg = _config(args, classes)
    rgb = load_image(args.image)
    points = parse_point_annotations(Path(args.annotations).read_text(), classes)
    return classes, cfg, rgb, GrayImage.from_rgb(rgb), points


def _boxes_json(boxes, degenerate=None):
    return [{"index": k, "box": list(b.as_tuple()), **({} if degenerate is None else {"degenerate": degenerate[k]})}
            for k, b in enumerate(boxes)]


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# --------------------------------------------------------------------------
# commands


def cmd_gen_pseudo(args) -> int:
    index = DatasetIndex.load(args.dataset)
    cfg = _config(args, index.class_table)
    out = Path(args.out)
    result = run_pipeline(index, cfg, overlay_dir=str(out / "overlays") if cfg.overlays else None)
    write_outputs(result, out)
    s = result.summary
    print(f"{s['total']} images: {s['candidate_branch']} candidate-mask, {s['watershed_branch']} watershed, "
          f"{s['skipped']} skipped ({s['failed']} failed)")
    return 1 if result.failed else 0


def cmd_voronoi(args) -> int:
    _, _, rgb, gray, points = _load_single(args)
    vor = voronoi_partition([p.point for p in points], gray.width, gray.height)
    if args.out:
        Image.fromarray(vor.labels.astype(np.uint16)).save(args.out)
    if args.overlay:
        render_labels(rgb, vor).save(args.overlay)
    counts = np.bincount(vor.labels.ravel(), minlength=vor.num_instances + 1)
    _emit({"ties": int(counts[0]), "cell_sizes": counts[1:].tolist()})
    return 0


def cmd_watershed(args) -> int:
    _, cfg, rgb, gray, points = _load_single(args)
    ws = cfg.watershed_for(gray.width, gray.height)
    basins = class_specific_watershed(gray, points, ws) if cfg.class_specific else voronoi_watershed(gray, points, ws)
    fitted = fit_basin_boxes(basins)
    if args.overlay:
        lm = basins.to_label_map() if isinstance(basins, InstanceBasins) else basins
        render_labels(rgb, lm, [f.box for f in fitted]).save(args.overlay)
    _emit(_boxes_json([f.box for f in fitted], [f.degenerate for f in fitted]))
    return 0


def cmd_select_mask(args) -> int:
    classes = _classes(args.classes)
    cfg = _config(args, classes)
    rgb = load_image(args.image)
    h, w = rgb.shape[:2]
    out = []
    for rec in read_manifest(args.manifest):
        choice = select_best_mask(load_candidates(rec, w, h), rec.prompt, rgb, cfg.prior_for(rec.class_id),
                                  cfg.metric_params)
        out.append({"instance_index": rec.instance_index, "selected": choice.index,
                    "path": rec.candidates[choice.index], "score": choice.score,
                    "scores": list(choice.all_scores),
                    "metrics": dict(zip(METRIC_NAMES, choice.metrics.tolist()))})
    _emit(out)
    return 0


def cmd_assign(args) -> int:
    _, cfg, _, gray, points = _load_single(args)
    preds = None
    if args.predictions:
        preds, _ = read_prediction_grids(args.predictions)
        preds = sorted(preds, key=lambda p: p.level_index)
    res = pla(cfg.epoch, cfg.switch_epoch, gray, points, preds, cfg.watershed_for(gray.width, gray.height),
              cfg.levels, class_specific=cfg.class_specific, center_radius=cfg.center_radius)
    _emit({"source": "watershed" if cfg.epoch < cfg.switch_epoch else "dynamic",
           "positives": list(res.assignment.positives_per_gt),
           "pseudo_boxes": _boxes_json([p.box for p in res.pseudo_labels])})
    return 0


def cmd_eval_loss(args) -> int:
    classes, cfg, _, gray, points = _load_single(args)
    preds = [a.reference for a in parse_annotations(Path(args.pred).read_text(), classes)]
    if len(preds) != len(points) or any(p is None for p in preds):
        raise SystemExit("--pred must hold one DOTA polygon per annotated point, in the same order")
    ws = cfg.watershed_for(gray.width, gray.height)
    basins = class_specific_watershed(gray, points, ws) if cfg.class_specific else voronoi_watershed(gray, points, ws)
    fitted = fit_basin_boxes(basins)
    edges = edge_map(gray.pixels)
    per = [instance_losses(p, f.pixels, edges) for p, f in zip(preds, fitted)]
    _emit({"instances": per, "pgdm": l_pgdm([x["mask"] for x in per]),
           "overlap": gaussian_overlap_loss([rbox_to_gaussian(p) for p in preds]),
           "edge": float(np.mean([x["edge"] for x in per])) if per else 0.0})
    return 0


def cmd_export_dota(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in read_records(args.records):
        (out / f"{r.image_id}.txt").write_text(r.dota_text())
    return 0


def cmd_synth(args) -> int:
    write_dataset(args.out, num_images=args.num_images, seed=args.seed, width=args.size, height=args.size,
                  with_predictions=args.with_predictions)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudorbox", description="Point-supervised rotated-box pseudo labels.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pseudo", help="run the full pipeline over a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory or JSON index")
    p.add_argument("--out", required=True)
    p.add_argument("--overlays", action="store_true", help="write overlay images")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("voronoi", help="Voronoi partition of the annotation points")
    _single_image_args(p)
    p.add_argument("--out", help="16-bit label PNG")
    p.add_argument("--overlay")
    _add_config_flags(p)
    p.set_defaults(func=cmd_voronoi)

    p = sub.add_parser("watershed", help="watershed basins and fitted boxes")
    _single_image_args(p)
    p.add_argument("--overlay")
    _add_config_flags(p)
    p.set_defaults(func=cmd_watershed)

    p = sub.add_parser("select-mask", help="pick the best candidate mask per instance")
    p.add_argument("--image", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_select_mask)

    p = sub.add_parser("assign", help="label assignment for one image")
    _single_image_args(p)
    p.add_argument("--predictions", help="prediction grid file (text or binary)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("eval-loss", help="losses of predicted boxes against watershed regions")
    _single_image_args(p)
    p.add_argument("--pred", required=True, help="DOTA file with one predicted box per annotated point")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("export-dota", help="write DOTA files from records.jsonl")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dota)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=20)
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-predictions", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
