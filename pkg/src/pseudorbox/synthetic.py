"""Synthetic scenes with known boxes, for tests, demos and the CLI ``synth`` command.

Objects are bright filled rectangles on a dark, mildly noisy background.
Placement is rejection-sampled so that every rectangle sits inside its own
Voronoi cell (its corners are closer to its own center than to any other),
which is the regime where a Voronoi-bounded watershed can recover it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .assign import DEFAULT_LEVELS, FpnLevel, LevelPredictions, anchor_points
from .formats import ManifestRecord, dota_line, save_mask, write_manifest, write_prediction_grids
from .geometry import RBox

DEFAULT_CLASSES = ("plane", "ship", "vehicle", "tank")


@dataclass(frozen=True)
class SyntheticObject:
    box: RBox
    class_id: int


@dataclass(frozen=True, eq=False)
class Scene:
    image: np.ndarray
    objects: list

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


def rasterize_box(box: RBox, width: int, height: int) -> np.ndarray:
    """Pixels whose centers lie in the closed box."""
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.stack([xs + 0.5, ys + 0.5], axis=-1)
    return box.contains(pts, strict=False)


def _in_own_cell(boxes: Sequence[RBox], margin: float) -> bool:
    centers = np.array([[b.cx, b.cy] for b in boxes])
    for k, b in enumerate(boxes):
        corners = b.corners()
        d = np.linalg.norm(corners[:, None, :] - centers[None, :, :], axis=-1)
        own = d[:, k].copy()
        d[:, k] = np.inf
        if np.any(own + margin >= d.min(axis=1)):
            return False
    return True


def random_boxes(rng: np.random.Generator, width: int, height: int, n: int,
                 size_range: tuple[float, float] = (16.0, 40.0), rotated: bool = False,
                 max_half_diag: float | None = None, margin: float = 4.0,
                 max_tries: int = 20000) -> list[RBox]:
    """``n`` non-overlapping boxes, each inside its own Voronoi cell."""
    boxes: list[RBox] = []
    tries = 0
    while len(boxes) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} boxes in {width}x{height} after {max_tries} tries")
        w, h = rng.uniform(*size_range, size=2)
        if max_half_diag is not None and math.hypot(w, h) / 2 > max_half_diag:
            continue
        theta = rng.uniform(-math.pi / 2, math.pi / 2) if rotated else 0.0
        r = math.hypot(w, h) / 2 + 2
        cx, cy = rng.uniform(r, width - r), rng.uniform(r, height - r)
        # snap to the pixel lattice so axis-aligned edges fall between pixels
        if not rotated:
            cx, cy, w, h = round(cx - w / 2) + round(w) / 2, round(cy - h / 2) + round(h) / 2, round(w), round(h)
        cand = RBox(cx, cy, w, h, theta)
        if _in_own_cell(boxes + [cand], margin):
            boxes.append(cand)
        elif tries % 500 == 0:
            boxes = []  # stuck: start the layout over
    return boxes


def render_scene(boxes: Sequence[RBox], class_ids: Sequence[int], width: int, height: int,
                 rng: np.random.Generator, noise: float = 4.0) -> Scene:
    img = np.full((height, width, 3), 40.0)
    img += rng.normal(0, noise, size=img.shape)
    for box in boxes:
        color = rng.uniform(170, 240, size=3)
        img[rasterize_box(box, width, height)] = color
    img = np.clip(img, 0, 255).astype(np.uint8)
    return Scene(img, [SyntheticObject(b, int(c)) for b, c in zip(boxes, class_ids)])


def random_scene(rng: np.random.Generator, width: int = 256, height: int = 256, n: int = 5,
                 num_classes: int = len(DEFAULT_CLASSES), **kw) -> Scene:
    boxes = random_boxes(rng, width, height, n, **kw)
    classes = rng.integers(0, num_classes, size=n)
    return render_scene(boxes, classes, width, height, rng)


def candidate_masks(box: RBox, width: int, height: int) -> list[np.ndarray]:
    """Plausible candidates for one object: shrunk, exact, grown and a round blob."""
    exact = rasterize_box(box, width, height)
    shrunk = ndimage.binary_erosion(exact, iterations=3)
    if not shrunk.any():
        shrunk = exact
    grown = ndimage.binary_dilation(exact, iterations=4)
    ys, xs = np.mgrid[0:height, 0:width]
    r = max(box.w, box.h) * 0.75
    blob = (xs + 0.5 - box.cx) ** 2 + (ys + 0.5 - box.cy) ** 2 <= r * r
    return [shrunk, blob, exact, grown]


def prediction_grids(scene: Scene, levels: Sequence[FpnLevel], rng: np.random.Generator,
                     jitter: float = 0.1) -> list[LevelPredictions]:
    """Fake detector output: each anchor predicts a jittered copy of its closest object."""
    out = []
    centers = np.array([[o.box.cx, o.box.cy] for o in scene.objects]).reshape(-1, 2)
    for lvl in levels:
        anchors = anchor_points(lvl, scene.width, scene.height)
        rows, cols = anchors.shape[:2]
        boxes = np.zeros((rows, cols, 5))
        scores = rng.uniform(0, 0.2, size=(rows, cols))
        if len(centers):
            d = np.linalg.norm(anchors[:, :, None, :] - centers[None, None], axis=-1)
            near = d.argmin(axis=-1)
            for k, o in enumerate(scene.objects):
                b = o.box
                sel = near == k
                n = int(sel.sum())
                boxes[sel] = np.stack([
                    b.cx + rng.normal(0, jitter * b.w, n), b.cy + rng.normal(0, jitter * b.h, n),
                    b.w * rng.uniform(1 - jitter, 1 + jitter, n), b.h * rng.uniform(1 - jitter, 1 + jitter, n),
                    b.theta + rng.normal(0, jitter, n)], axis=-1)
                fit = lvl.admits(max(b.w, b.h) / 2)
                scores[sel] += np.exp(-d[sel, k] / max(b.w, b.h)) * (0.8 if fit else 0.3)
        else:
            boxes[..., 2:4] = lvl.stride
        out.append(LevelPredictions(lvl.index, boxes, scores))
    return out


def write_dataset(root: str | Path, num_images: int = 20, seed: int = 0, width: int = 160, height: int = 160,
                  count_range: tuple[int, int] = (1, 8), class_names: Sequence[str] = DEFAULT_CLASSES,
                  size_range: tuple[float, float] = (12.0, 26.0), with_predictions: bool = False,
                  levels: Sequence[FpnLevel] = DEFAULT_LEVELS, n_thr: int = 4) -> Path:
    """Write a dataset directory readable by :meth:`DatasetIndex.from_directory`.

    Images with at most ``n_thr`` objects get a candidate manifest.
    Annotations are DOTA polygons of the true boxes, so the pipeline can
    report IoU against them.
    """
    root = Path(root)
    for sub in ("images", "annotations", "manifests", "predictions"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(c + "\n" for c in class_names))
    rng = np.random.default_rng(seed)
    for i in range(num_images):
        image_id = f"img{i:04d}"
        n = int(rng.integers(count_range[0], count_range[1] + 1))
        scene = random_scene(rng, width, height, n, num_classes=len(class_names), size_range=size_range)
        Image.fromarray(scene.image).save(root / "images" / f"{image_id}.png")
        lines = [dota_line(o.box, class_names[o.class_id]) for o in scene.objects]
        (root / "annotations" / f"{image_id}.txt").write_text("".join(ln + "\n" for ln in lines))
        if n <= n_thr:
            mdir = root / "manifests" / image_id
            mdir.mkdir(exist_ok=True)
            recs = []
            for k, o in enumerate(scene.objects):
                paths = []
                for j, m in enumerate(candidate_masks(o.box, width, height)):
                    p = mdir / f"inst{k:03d}_cand{j}.png"
                    save_mask(m, p)
                    paths.append(str(p))
                recs.append(ManifestRecord(k, (o.box.cx, o.box.cy), o.class_id, tuple(paths)))
            write_manifest(mdir / "manifest.jsonl", recs)
        if with_predictions:
            preds = prediction_grids(scene, levels, rng)
            write_prediction_grids(root / "predictions" / f"{image_id}.grid", preds,
                                   [l.stride for l in levels], binary=bool(i % 2))
    return root
