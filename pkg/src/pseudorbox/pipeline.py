"""Batch pseudo-labeling: route each image, build boxes, score losses, assign anchors.

Every image is processed independently and any exception is caught and
recorded, so one bad tile never aborts the batch.  Results are merged in
image-id order, which makes records and summaries independent of entry
order and worker scheduling.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .assign import dynamic_pseudo_labels, pla
from .formats import (
    DatasetEntry,
    DatasetIndex,
    FormatError,
    RunConfig,
    dota_line,
    load_candidates,
    load_image,
    parse_annotations,
    read_manifest,
    read_prediction_grids,
)
from .geometry import Point2, RBox, rbox_iou, rbox_to_gaussian
from .losses import (
    RegressionTarget,
    edge_loss,
    edge_map,
    edge_targets,
    gaussian_overlap_loss,
    l_mask,
    l_pgdm,
    mask_regression_targets,
)
from .maskselect import Branch, route_image, select_best_mask
from .watershed import GrayImage, InstanceBasins, class_specific_watershed, fit_basin_boxes, voronoi_watershed

log = logging.getLogger(__name__)

SKIPPED = "skipped"


@dataclass
class InstanceRecord:
    index: int
    point: Point2
    class_id: int
    class_name: str
    branch: str
    box: RBox | None = None
    selection_score: float | None = None
    candidate_index: int | None = None
    degenerate: bool = False
    losses: dict = field(default_factory=dict)
    iou: float | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index, "point": [self.point[0], self.point[1]],
            "class_id": self.class_id, "class_name": self.class_name, "branch": self.branch,
            "box": None if self.box is None else list(self.box.as_tuple()),
            "selection_score": self.selection_score, "candidate_index": self.candidate_index,
            "degenerate": self.degenerate, "losses": self.losses, "iou": self.iou,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceRecord":
        box = None if d["box"] is None else RBox(*d["box"])
        return cls(d["index"], Point2(*d["point"]), d["class_id"], d["class_name"], d["branch"], box,
                   d["selection_score"], d["candidate_index"], d["degenerate"], d["losses"], d["iou"])


@dataclass
class PseudoLabelRecord:
    image_id: str
    status: str
    branch: str
    instances: list
    width: int = 0
    height: int = 0
    reason: str | None = None
    losses: dict = field(default_factory=dict)
    positives: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id, "status": self.status, "branch": self.branch,
            "width": self.width, "height": self.height, "reason": self.reason,
            "losses": self.losses, "positives": self.positives,
            "instances": [i.to_dict() for i in self.instances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoLabelRecord":
        return cls(d["image_id"], d["status"], d["branch"], [InstanceRecord.from_dict(i) for i in d["instances"]],
                   d["width"], d["height"], d["reason"], d["losses"], d["positives"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)

    def dota_text(self) -> str:
        rows = [dota_line(i.box, i.class_name) for i in sorted(self.instances, key=lambda i: i.index)
                if i.box is not None]
        return "".join(r + "\n" for r in rows)


@dataclass
class PipelineResult:
    records: list
    summary: dict

    @property
    def failed(self) -> int:
        return self.summary["failed"]


# --------------------------------------------------------------------------
# per-image work


class _Skip(Exception):
    """Image cannot be processed as configured; recorded as skipped, not failed."""


def instance_losses(pred: RBox, pixels: np.ndarray, edges: np.ndarray) -> dict:
    """Mask-regression and edge losses of a predicted box against one region.

    Single-row or single-column regions have a zero extent on one axis; the
    target is clamped to the one-pixel size so the loss stays defined.
    """
    t = mask_regression_targets(pixels, pred.center, pred.theta)
    t = RegressionTarget(max(t.w_t, 1.0), max(t.h_t, 1.0))
    out = {"mask": l_mask(pred.w, pred.h, t)}
    et = edge_targets(edges, pred)
    out["edge"] = edge_loss(pred, et)
    return out


def _base_instances(anns, class_table) -> list[InstanceRecord]:
    return [InstanceRecord(k, a.point.point, a.point.class_id, class_table[a.point.class_id], SKIPPED)
            for k, a in enumerate(anns)]


def _candidate_regions(entry: DatasetEntry, anns, rgb: np.ndarray, cfg: RunConfig, insts) -> list[np.ndarray]:
    if entry.manifest_path is None:
        raise _Skip("sparse image routed to candidate-mask branch has no candidate manifest")
    h, w = rgb.shape[:2]
    by_index = {r.instance_index: r for r in read_manifest(entry.manifest_path)}
    missing = [k for k in range(len(anns)) if k not in by_index]
    if missing:
        raise _Skip(f"candidate manifest lists no candidates for instances {missing}")
    masks = []
    for inst in insts:
        cands = load_candidates(by_index[inst.index], w, h)
        if not cands:
            raise _Skip(f"instance {inst.index} has an empty candidate list")
        choice = select_best_mask(cands, inst.point, rgb, cfg.prior_for(inst.class_id), cfg.metric_params)
        inst.selection_score = choice.score
        inst.candidate_index = choice.index
        masks.append(choice.best.mask.bits)
    return masks


def _watershed_regions(gray: GrayImage, anns, cfg: RunConfig) -> list[np.ndarray]:
    points = [a.point for a in anns]
    ws_cfg = cfg.watershed_for(gray.width, gray.height)
    if cfg.class_specific:
        return class_specific_watershed(gray, points, ws_cfg).masks
    return InstanceBasins.from_label_map(voronoi_watershed(gray, points, ws_cfg)).masks


def _load_predictions(entry: DatasetEntry, cfg: RunConfig, w: int, h: int):
    if entry.predictions_path is None:
        return None
    preds, strides = read_prediction_grids(entry.predictions_path)
    by_index = {p.level_index: (p, s) for p, s in zip(preds, strides)}
    for lvl in cfg.levels:
        if lvl.index not in by_index:
            raise FormatError(f"prediction grid has no level {lvl.index}")
        p, s = by_index[lvl.index]
        if s != lvl.stride or p.scores.shape != lvl.grid_shape(w, h):
            raise FormatError(f"prediction level {lvl.index} is stride {s} {p.scores.shape}, "
                              f"expected stride {lvl.stride} {lvl.grid_shape(w, h)}")
    return [by_index[l.index][0] for l in cfg.levels]


def process_image(entry: DatasetEntry, cfg: RunConfig, class_table: Sequence[str],
                  overlay_dir: str | None = None) -> PseudoLabelRecord:
    """Run one image end to end; never raises."""
    anns, insts = [], []
    try:
        anns = parse_annotations(Path(entry.annotation_path).read_text(), class_table)
        insts = _base_instances(anns, class_table)
        rgb = load_image(entry.image_path)
        h, w = rgb.shape[:2]
        gray = GrayImage.from_rgb(rgb)
        branch = route_image(len(anns), cfg.n_thr).branch
        try:
            preds = _load_predictions(entry, cfg, w, h)
            if branch is Branch.CANDIDATE_MASK:
                regions = _candidate_regions(entry, anns, rgb, cfg, insts)
            else:
                regions = _watershed_regions(gray, anns, cfg) if anns else []
            if cfg.epoch >= cfg.switch_epoch and preds is None:
                raise _Skip(f"epoch {cfg.epoch} >= switch epoch {cfg.switch_epoch} needs a prediction grid")
        except _Skip as s:
            return PseudoLabelRecord(entry.image_id, SKIPPED, SKIPPED, insts, w, h, reason=str(s))

        fitted = fit_basin_boxes(InstanceBasins(regions)) if regions else []
        gts = [a.point for a in anns]
        if preds is not None and gts:
            predicted = [pl.box for pl in dynamic_pseudo_labels([g.point for g in gts], preds, cfg.levels, w, h)]
        else:
            predicted = [f.box for f in fitted]

        edges = edge_map(gray.pixels)
        mask_terms, edge_terms = [], []
        for inst, fit, pred, ann in zip(insts, fitted, predicted, anns):
            inst.branch = branch.value
            inst.box = fit.box
            inst.degenerate = fit.degenerate
            inst.losses = instance_losses(pred, fit.pixels, edges)
            mask_terms.append(inst.losses["mask"])
            edge_terms.append(inst.losses["edge"])
            if ann.reference is not None:
                inst.iou = rbox_iou(fit.box, ann.reference)

        lw = cfg.loss_weights
        losses = {
            "pgdm": l_pgdm(mask_terms),
            "overlap": gaussian_overlap_loss([rbox_to_gaussian(b) for b in predicted]),
            "edge": float(np.mean(edge_terms)) if edge_terms else 0.0,
        }
        losses["total"] = lw.pgdm * losses["pgdm"] + lw.overlap * losses["overlap"] + lw.edge * losses["edge"]

        result = pla(cfg.epoch, cfg.switch_epoch, gray, gts, preds, cfg.watershed_for(w, h), cfg.levels,
                     class_specific=cfg.class_specific, static_boxes=[f.box for f in fitted],
                     center_radius=cfg.center_radius)
        record = PseudoLabelRecord(entry.image_id, "ok", branch.value, insts, w, h, losses=losses,
                                   positives=list(result.assignment.positives_per_gt))
        if overlay_dir is not None:
            from .render import render_overlay

            render_overlay(rgb, record, regions).save(os.path.join(overlay_dir, f"{entry.image_id}.png"))
        return record
    except Exception as e:  # noqa: BLE001 - failure isolation
        log.warning("image %s failed: %s", entry.image_id, e)
        return PseudoLabelRecord(entry.image_id, "failed", SKIPPED, insts, reason=f"{type(e).__name__}: {e}")


# --------------------------------------------------------------------------
# batch


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(sum(values) / len(values)) if values else None


def summarize(records: Sequence[PseudoLabelRecord], cfg: RunConfig) -> dict:
    counts = {Branch.CANDIDATE_MASK.value: 0, Branch.WATERSHED.value: 0, SKIPPED: 0}
    for r in records:
        counts[r.branch] += 1
    per_branch = {}
    for b in (Branch.CANDIDATE_MASK.value, Branch.WATERSHED.value):
        rs = [r for r in records if r.branch == b]
        per_branch[b] = {k: _mean(r.losses.get(k) for r in rs) for k in ("pgdm", "overlap", "edge", "total")}
        per_branch[b]["mean_iou"] = _mean(i.iou for r in rs for i in r.instances)
    return {
        "total": len(records),
        "candidate_branch": counts[Branch.CANDIDATE_MASK.value],
        "watershed_branch": counts[Branch.WATERSHED.value],
        "skipped": counts[SKIPPED],
        "failed": sum(r.status == "failed" for r in records),
        "instances": sum(len(r.instances) for r in records),
        "loss_means": per_branch,
        "positives": {r.image_id: r.positives for r in records},
        "reasons": {r.image_id: r.reason for r in records if r.reason is not None},
        "config": cfg.to_dict(),
    }


def _process_star(args) -> PseudoLabelRecord:
    return process_image(*args)


def run_pipeline(index: DatasetIndex, cfg: RunConfig, overlay_dir: str | None = None) -> PipelineResult:
    """Process every image of ``index``; records come back sorted by image id."""
    if overlay_dir is not None:
        os.makedirs(overlay_dir, exist_ok=True)
    jobs = [(e, cfg, index.class_table, overlay_dir) for e in sorted(index.entries, key=lambda e: e.image_id)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_process_star, jobs))
    else:
        records = [_process_star(j) for j in jobs]
    records.sort(key=lambda r: r.image_id)
    return PipelineResult(records, summarize(records, cfg))


def read_records(path: str | os.PathLike) -> list[PseudoLabelRecord]:
    return [PseudoLabelRecord.from_dict(json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln.strip()]


def write_outputs(result: PipelineResult, out_dir: str | os.PathLike) -> None:
    """``records.jsonl``, ``summary.json`` and ``dota/<image_id>.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "dota").mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w") as f:
        for r in result.records:
            f.write(r.to_json() + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True, allow_nan=False) + "\n")
    for r in result.records:
        (out / "dota" / f"{r.image_id}.txt").write_text(r.dota_text())
