"""Readers and writers for everything that crosses the process boundary.

* point annotations, ``x y class`` or DOTA polygons ``x1 y1 ... x4 y4 class difficulty``
* DOTA pseudo-label export
* candidate-mask manifests (JSON Lines, one record per instance)
* prediction grids, text or binary (see :func:`read_prediction_grids`)
* run configuration (TOML) and the dataset index (JSON or directory layout)
"""
from __future__ import annotations

import json
import math
import os
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .assign import DEFAULT_LEVELS, FpnLevel, LevelPredictions, check_levels
from .geometry import AnnotatedPoint, BinaryMask, DegenerateInputError, Point2, RBox, min_area_rect
from .losses import LossWeights
from .maskselect import ClassPrior, MaskCandidate, MetricParams
from .watershed import WatershedConfig

CONFIG_ENV = "PSEUDORBOX_CONFIG"
GRID_MAGIC = b"PRGRID01"
DOTA_HEADERS = ("imagesource:", "gsd:")


class FormatError(ValueError):
    """Malformed input file; the message carries the file position."""


# --------------------------------------------------------------------------
# annotations


@dataclass(frozen=True)
class ParsedAnnotation:
    point: AnnotatedPoint
    reference: RBox | None = None


def parse_annotations(text: str, class_table: Sequence[str]) -> list[ParsedAnnotation]:
    """Parse point or DOTA-polygon lines; polygons also yield a reference box."""
    lookup = {name: i for i, name in enumerate(class_table)}
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.lower().startswith(DOTA_HEADERS):
            continue
        parts = line.split()
        if len(parts) == 3:
            coords, name = parts[:2], parts[2]
        elif len(parts) in (9, 10):
            coords, name = parts[:8], parts[8]
        else:
            raise FormatError(f"line {lineno}: expected 'x y class' or a DOTA polygon, got {raw!r}")
        try:
            vals = [float(v) for v in coords]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric coordinate in {raw!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"line {lineno}: non-finite coordinate in {raw!r}")
        if name not in lookup:
            raise FormatError(f"line {lineno}: unknown class {name!r} in {raw!r}")
        ref = None
        if len(vals) == 2:
            pt = Point2(vals[0], vals[1])
        else:
            poly = np.array(vals).reshape(4, 2)
            pt = Point2(*poly.mean(axis=0))
            try:
                ref = min_area_rect(poly)
            except (DegenerateInputError, ValueError):
                ref = None
        out.append(ParsedAnnotation(AnnotatedPoint(pt, lookup[name]), ref))
    return out


def parse_point_annotations(text: str, class_table: Sequence[str]) -> list[AnnotatedPoint]:
    return [a.point for a in parse_annotations(text, class_table)]


def _fmt(v: float) -> str:
    s = f"{v:.8f}"
    return "0.00000000" if s == "-0.00000000" else s


def dota_line(box: RBox, class_name: str, difficulty: int = 0) -> str:
    coords = " ".join(_fmt(v) for v in box.corners().ravel())
    return f"{coords} {class_name} {difficulty}"


def export_dota_rbox(records: Iterable, class_table: Sequence[str] | None = None) -> str:
    """DOTA text for image records, one line per instance ordered by instance index.

    ``records`` holds :class:`~pseudorbox.pipeline.PseudoLabelRecord` objects
    or ``(box, class_name)`` pairs.  Instances without a box are skipped.
    """
    lines = []
    for rec in records:
        if isinstance(rec, tuple):
            box, name = rec
            lines.append(dota_line(box, name))
            continue
        for inst in sorted(rec.instances, key=lambda i: i.index):
            if inst.box is not None:
                lines.append(dota_line(inst.box, inst.class_name))
    return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# images and masks


def load_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit raster as ``(H, W, 3)`` uint8 (gray images are replicated)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr


def load_mask(path: str | os.PathLike) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr > 127)


def save_mask(mask: BinaryMask | np.ndarray, path: str | os.PathLike) -> None:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    Image.fromarray((bits * 255).astype(np.uint8), mode="L").save(path)


@dataclass(frozen=True)
class ManifestRecord:
    instance_index: int
    prompt: Point2
    class_id: int
    candidates: tuple[str, ...]


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    """Candidate manifest: JSON Lines, one object per instance.

    Each object has ``instance_index``, ``x``, ``y``, ``class_id`` and
    ``candidates`` (mask paths, relative to the manifest's directory).
    """
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = ManifestRecord(int(obj["instance_index"]), Point2(float(obj["x"]), float(obj["y"])),
                                 int(obj["class_id"]),
                                 tuple(str(base / c) for c in obj["candidates"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: bad manifest record ({e})") from None
        out.append(rec)
    return sorted(out, key=lambda r: r.instance_index)


def write_manifest(path: str | os.PathLike, records: Sequence[ManifestRecord]) -> None:
    base = Path(path).parent
    with open(path, "w") as f:
        for r in records:
            obj = {"instance_index": r.instance_index, "x": r.prompt[0], "y": r.prompt[1],
                   "class_id": r.class_id,
                   "candidates": [os.path.relpath(c, base) for c in r.candidates]}
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_candidates(rec: ManifestRecord, width: int, height: int) -> list[MaskCandidate]:
    out = []
    for path in rec.candidates:
        m = load_mask(path)
        if (m.width, m.height) != (width, height):
            raise FormatError(f"candidate {path} is {m.width}x{m.height}, image is {width}x{height}")
        if not m.bits.any():
            raise FormatError(f"candidate {path} is empty")
        out.append(MaskCandidate(m, rec.instance_index, os.path.basename(path)))
    return out


# --------------------------------------------------------------------------
# prediction grids


def write_prediction_grids(path: str | os.PathLike, preds: Sequence[LevelPredictions],
                           strides: Sequence[int], binary: bool = False) -> None:
    """Write grids in the text or binary encoding read by :func:`read_prediction_grids`."""
    if binary:
        with open(path, "wb") as f:
            f.write(GRID_MAGIC)
            f.write(struct.pack("<I", len(preds)))
            for p, s in zip(preds, strides):
                rows, cols = p.scores.shape
                f.write(struct.pack("<4I", p.level_index, s, rows, cols))
                cells = np.concatenate([p.boxes, p.scores[..., None]], axis=-1)
                f.write(cells.astype("<f8").tobytes())
        return
    lines = ["# pseudorbox prediction grids: cx cy w h theta score per cell, row-major",
             f"levels {len(preds)}"]
    for p, s in zip(preds, strides):
        rows, cols = p.scores.shape
        lines.append(f"level {p.level_index} stride {s} rows {rows} cols {cols}")
        cells = np.concatenate([p.boxes, p.scores[..., None]], axis=-1).reshape(-1, 6)
        lines.extend(" ".join(repr(float(v)) for v in c) for c in cells)
    Path(path).write_text("\n".join(lines) + "\n")


def read_prediction_grids(path: str | os.PathLike) -> tuple[list[LevelPredictions], list[int]]:
    """Read per-level prediction grids; returns ``(predictions, strides)``.

    Text encoding::

        levels <L>
        level <index> stride <s> rows <R> cols <C>
        <R*C lines: cx cy w h theta score>      (repeated per level)

    Lines starting with ``#`` are comments.  Binary encoding: magic
    ``PRGRID01``, little-endian ``uint32`` level count, then per level four
    ``uint32`` (index, stride, rows, cols) followed by ``rows*cols*6``
    ``float64`` cell values.
    """
    raw = Path(path).read_bytes()
    if raw.startswith(GRID_MAGIC):
        return _read_grids_binary(raw, path)
    lines = [ln.strip() for ln in raw.decode().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    try:
        head = lines[0].split()
        if head[0] != "levels":
            raise FormatError(f"{path}: expected 'levels <n>' header")
        n = int(head[1])
        pos, preds, strides = 1, [], []
        for _ in range(n):
            tok = lines[pos].split()
            if tok[0] != "level" or tok[2] != "stride" or tok[4] != "rows" or tok[6] != "cols":
                raise FormatError(f"{path}: bad level header {lines[pos]!r}")
            idx, s, rows, cols = int(tok[1]), int(tok[3]), int(tok[5]), int(tok[7])
            pos += 1
            cells = np.array([[float(v) for v in lines[pos + k].split()] for k in range(rows * cols)])
            pos += rows * cols
            if cells.shape != (rows * cols, 6):
                raise FormatError(f"{path}: level {idx} cells must have 6 values each")
            cells = cells.reshape(rows, cols, 6)
            preds.append(LevelPredictions(idx, cells[..., :5], cells[..., 5]))
            strides.append(s)
    except (IndexError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: truncated or malformed prediction grid ({e})") from None
    return preds, strides


def _read_grids_binary(raw: bytes, path) -> tuple[list[LevelPredictions], list[int]]:
    try:
        off = len(GRID_MAGIC)
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        preds, strides = [], []
        for _ in range(n):
            idx, s, rows, cols = struct.unpack_from("<4I", raw, off)
            off += 16
            count = rows * cols * 6
            cells = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(rows, cols, 6)
            off += count * 8
            preds.append(LevelPredictions(idx, cells[..., :5].copy(), cells[..., 5].copy()))
            strides.append(s)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated binary prediction grid ({e})") from None
    return preds, strides


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    n_thr: int = 4
    switch_epoch: int = 6
    epoch: int = 0
    watershed: WatershedConfig = field(default_factory=WatershedConfig)
    scale_watershed: bool = True
    metric_params: MetricParams = field(default_factory=MetricParams)
    class_priors: dict = field(default_factory=dict)
    default_prior: ClassPrior = field(default_factory=ClassPrior)
    levels: tuple = DEFAULT_LEVELS
    loss_weights: LossWeights = field(default_factory=LossWeights)
    class_specific: bool = False
    center_radius: float | None = None
    seed: int = 0
    workers: int = 1
    overlays: bool = False

    def __post_init__(self):
        if self.n_thr < 0 or self.switch_epoch < 0 or self.epoch < 0:
            raise ValueError("n_thr, switch_epoch and epoch must be non-negative")
        check_levels(self.levels)

    def prior_for(self, class_id: int) -> ClassPrior:
        return self.class_priors.get(class_id, self.default_prior)

    def watershed_for(self, width: int, height: int) -> WatershedConfig:
        return self.watershed.scaled_to(width, height) if self.scale_watershed else self.watershed

    def to_dict(self) -> dict:
        return {
            "n_thr": self.n_thr, "switch_epoch": self.switch_epoch, "epoch": self.epoch,
            "scale_watershed": self.scale_watershed, "class_specific": self.class_specific,
            "center_radius": self.center_radius, "seed": self.seed,
            "watershed": vars(self.watershed).copy(),
            "metrics": vars(self.metric_params).copy(),
            "loss_weights": vars(self.loss_weights).copy(),
            "levels": [{"index": l.index, "stride": l.stride, "range": [l.regress_range[0], str(l.regress_range[1])
                                                                          if math.isinf(l.regress_range[1])
                                                                          else l.regress_range[1]]}
                       for l in self.levels],
            "priors": {str(k): {"weights": list(p.weights), "ar_range": list(p.ar_range)}
                       for k, p in sorted(self.class_priors.items())},
            "default_prior": {"weights": list(self.default_prior.weights),
                              "ar_range": list(self.default_prior.ar_range)},
        }


def _prior(obj: dict, class_id: int, default: ClassPrior) -> ClassPrior:
    return ClassPrior(class_id, tuple(obj.get("weights", default.weights)),
                      tuple(obj.get("ar_range", default.ar_range)))


def config_from_dict(data: dict, class_table: Sequence[str] = ()) -> RunConfig:
    """Build a :class:`RunConfig` from parsed TOML; unknown keys are rejected."""
    known = {"n_thr", "switch_epoch", "epoch", "watershed", "scale_watershed", "metrics", "priors",
             "levels", "loss_weights", "class_specific", "center_radius", "seed", "workers", "overlays"}
    unknown = set(data) - known
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    kw: dict = {k: data[k] for k in ("n_thr", "switch_epoch", "epoch", "scale_watershed", "class_specific",
                                     "center_radius", "seed", "workers", "overlays") if k in data}
    if "watershed" in data:
        kw["watershed"] = WatershedConfig(**data["watershed"])
    if "metrics" in data:
        kw["metric_params"] = MetricParams(**data["metrics"])
    if "loss_weights" in data:
        kw["loss_weights"] = LossWeights(**data["loss_weights"])
    if "levels" in data:
        kw["levels"] = tuple(
            FpnLevel(int(l.get("index", i)), int(l["stride"]), (float(l["range"][0]), float(l["range"][1])))
            for i, l in enumerate(data["levels"]))
    priors = dict(data.get("priors", {}))
    default = _prior(priors.pop("default", {}), -1, ClassPrior())
    lookup = {name: i for i, name in enumerate(class_table)}
    resolved = {}
    for key, obj in priors.items():
        if key in lookup:
            cid = lookup[key]
        elif key.isdigit():
            cid = int(key)
        else:
            raise FormatError(f"prior for unknown class {key!r}")
        resolved[cid] = _prior(obj, cid, default)
    kw["class_priors"] = resolved
    kw["default_prior"] = default
    return RunConfig(**kw)


def load_config(path: str | os.PathLike | None, class_table: Sequence[str] = ()) -> RunConfig:
    """Load a TOML run config; ``None`` falls back to ``$PSEUDORBOX_CONFIG`` then defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    with open(path, "rb") as f:
        return config_from_dict(tomllib.load(f), class_table)


# --------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    image_path: str
    annotation_path: str
    manifest_path: str | None = None
    predictions_path: str | None = None


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple
    class_table: tuple

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate image ids in dataset index")

    def validate(self) -> None:
        for e in self.entries:
            for p in (e.image_path, e.annotation_path, e.manifest_path, e.predictions_path):
                if p is not None and not os.path.exists(p):
                    raise FileNotFoundError(p)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetIndex":
        """Read a JSON index file or a dataset directory (see :meth:`from_directory`)."""
        path = Path(path)
        if path.is_dir():
            return cls.from_directory(path)
        data = json.loads(path.read_text())
        base = path.parent

        def rel(p):
            return None if p is None else str(base / p)

        entries = tuple(
            DatasetEntry(e.get("id", Path(e["image"]).stem), rel(e["image"]), rel(e["annotation"]),
                         rel(e.get("manifest")), rel(e.get("predictions")))
            for e in data["entries"])
        idx = cls(entries, tuple(data["class_table"]))
        idx.validate()
        return idx

    @classmethod
    def from_directory(cls, root: str | os.PathLike) -> "DatasetIndex":
        """Directory layout::

            classes.txt                 one class name per line
            images/<id>.png|jpg|tif
            annotations/<id>.txt
            manifests/<id>/manifest.jsonl   (optional)
            predictions/<id>.grid           (optional)
        """
        root = Path(root)
        classes = tuple(ln.strip() for ln in (root / "classes.txt").read_text().splitlines() if ln.strip())
        entries = []
        for img in sorted((root / "images").iterdir()):
            if img.suffix.lower() not in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"):
                continue
            stem = img.stem
            manifest = root / "manifests" / stem / "manifest.jsonl"
            preds = root / "predictions" / f"{stem}.grid"
            entries.append(DatasetEntry(stem, str(img), str(root / "annotations" / f"{stem}.txt"),
                                        str(manifest) if manifest.exists() else None,
                                        str(preds) if preds.exists() else None))
        idx = cls(tuple(entries), classes)
        idx.validate()
        return idx

    def dump(self, path: str | os.PathLike) -> None:
        base = Path(path).parent

        def rel(p):
            return None if p is None else os.path.relpath(p, base)

        data = {"class_table": list(self.class_table),
                "entries": [{"id": e.image_id, "image": rel(e.image_path), "annotation": rel(e.annotation_path),
                             "manifest": rel(e.manifest_path), "predictions": rel(e.predictions_path)}
                            for e in self.entries]}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
