"""Diagnostic overlays: regions tinted per instance, boxes outlined, points marked."""
from __future__ import annotations

import colorsys
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import LabelMap, RBox


def palette(n: int) -> list[tuple[int, int, int]]:
    """``n`` well-separated colors (golden-ratio hue steps)."""
    out = []
    for k in range(n):
        r, g, b = colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.85, 1.0)
        out.append((int(r * 255), int(g * 255), int(b * 255)))
    return out


def tint_regions(rgb: np.ndarray, regions: Sequence[np.ndarray], alpha: float = 0.4) -> np.ndarray:
    base = np.asarray(rgb, dtype=float).copy()
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    for m, color in zip(regions, palette(len(regions))):
        base[m] = (1 - alpha) * base[m] + alpha * np.asarray(color, dtype=float)
    return np.clip(base, 0, 255).astype(np.uint8)


def draw_boxes(im: Image.Image, boxes: Sequence[RBox | None], points=None, width: int = 2) -> Image.Image:
    draw = ImageDraw.Draw(im)
    colors = palette(len(boxes))
    for k, box in enumerate(boxes):
        if box is not None:
            corners = [tuple(c) for c in box.corners()]
            draw.polygon(corners, outline=colors[k], width=width)
        if points is not None:
            x, y = points[k]
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(255, 255, 255), outline=(0, 0, 0))
    return im


def render_overlay(rgb: np.ndarray, record, regions: Sequence[np.ndarray] = ()) -> Image.Image:
    """Overlay for one pipeline record: selected masks or basins, boxes and prompts."""
    im = Image.fromarray(tint_regions(rgb, regions))
    boxes = [i.box for i in record.instances]
    return draw_boxes(im, boxes, [i.point for i in record.instances])


def render_labels(rgb: np.ndarray, labels: LabelMap, boxes: Sequence[RBox] = ()) -> Image.Image:
    """Overlay of a label map (0 left untinted) plus optional boxes."""
    regions = [labels.labels == k for k in range(1, labels.num_instances + 1)]
    im = Image.fromarray(tint_regions(rgb, regions))
    return draw_boxes(im, list(boxes)) if boxes else im
