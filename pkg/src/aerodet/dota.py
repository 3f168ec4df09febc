"""DOTA-v1.5 annotation parsing and COCO-style conversion.

DOTA labels are whitespace-separated lines of 8 quadrilateral vertex
coordinates, a category name, and a difficulty flag, optionally preceded
by 'imagesource'/'gsd' metadata lines.  Conversion emits horizontal
boxes in [x, y, w, h] form with the oriented polygon's shoelace area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConversionError, ParseError

CATEGORIES: Tuple[str, ...] = (
    "plane", "ship", "storage tank", "baseball diamond", "tennis court",
    "basketball court", "ground track field", "harbor", "bridge",
    "large vehicle", "small vehicle", "helicopter", "roundabout",
    "soccer ball field", "swimming pool", "container crane",
)

CATEGORY_IDS: Dict[str, int] = {name: i + 1 for i, name in enumerate(CATEGORIES)}


@dataclass(frozen=True)
class DotaAnnotation:
    vertices: Tuple[float, ...]  # x1 y1 x2 y2 x3 y3 x4 y4
    category: str
    difficult: int = 0

    def __post_init__(self):
        if len(self.vertices) != 8:
            raise ParseError(f"expected 8 vertex coordinates, got {len(self.vertices)}")
        if not all(np.isfinite(v) and v >= 0 for v in self.vertices):
            raise ParseError("vertex coordinates must be finite and >= 0")
        if self.category not in CATEGORY_IDS:
            raise ParseError(f"unknown category {self.category!r}")
        if self.difficult not in (0, 1):
            raise ParseError(f"difficult flag must be 0 or 1, got {self.difficult}")


def parse_dota(text: str) -> List[DotaAnnotation]:
    """Parse one DOTA label file's text into annotations."""
    out = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.lower().startswith(("imagesource", "gsd")):
            continue
        parts = line.split()
        # category names may contain spaces ("storage tank"); coordinates
        # are the first 8 tokens, difficulty the last, category the rest
        if len(parts) < 10:
            raise ParseError(f"expected 8 coords + category + difficulty, got {len(parts)} tokens", line=ln)
        try:
            verts = tuple(float(p) for p in parts[:8])
        except ValueError as exc:
            raise ParseError(f"non-numeric coordinate: {exc}", line=ln) from None
        category = " ".join(parts[8:-1])
        try:
            difficult = int(parts[-1])
        except ValueError:
            raise ParseError(f"non-integer difficulty {parts[-1]!r}", line=ln) from None
        try:
            out.append(DotaAnnotation(vertices=verts, category=category, difficult=difficult))
        except ParseError as exc:
            raise ParseError(str(exc), line=ln) from None
    return out


def serialize_dota(annotations: Sequence[DotaAnnotation]) -> str:
    """Inverse of parse_dota (no metadata lines)."""
    lines = []
    for a in annotations:
        coords = " ".join(format(v, "g") for v in a.vertices)
        lines.append(f"{coords} {a.category} {a.difficult}")
    return "\n".join(lines) + ("\n" if lines else "")


def obb_to_hbb(vertices: Sequence[float]) -> Tuple[float, float, float, float]:
    """Axis-aligned hull of the 4 quadrilateral vertices."""
    xs = vertices[0::2]
    ys = vertices[1::2]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 >= x1 or y0 >= y1:
        raise ConversionError(f"degenerate oriented box {tuple(vertices)}")
    return (x0, y0, x1, y1)


def shoelace_area(vertices: Sequence[float]) -> float:
    """Unsigned polygon area of the quadrilateral."""
    xs = np.asarray(vertices[0::2])
    ys = np.asarray(vertices[1::2])
    return float(abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))) / 2.0)


def dota_to_coco(images: Sequence[Tuple[str, int, int]],
                 annotations_per_image: Sequence[Sequence[DotaAnnotation]]) -> dict:
    """Build a COCO-style dataset dict.

    images: (file_name, width, height) per image, paired positionally with
    annotations_per_image.  Ids are assigned deterministically in input
    order, 1-based.
    """
    if len(images) != len(annotations_per_image):
        raise ConversionError("every annotation file needs a paired image")
    coco_images = []
    coco_anns = []
    ann_id = 1
    for img_id, ((file_name, width, height), anns) in enumerate(
            zip(images, annotations_per_image), start=1):
        if width <= 0 or height <= 0:
            raise ConversionError(f"image {file_name!r} has unknown dimensions")
        coco_images.append({"id": img_id, "file_name": file_name,
                            "width": width, "height": height})
        for a in anns:
            x0, y0, x1, y1 = obb_to_hbb(a.vertices)
            coco_anns.append({
                "id": ann_id,
                "image_id": img_id,
                "category_id": CATEGORY_IDS[a.category],
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "area": shoelace_area(a.vertices),
                "iscrowd": 0,
                "difficult": a.difficult,
            })
            ann_id += 1
    return {
        "images": coco_images,
        "annotations": coco_anns,
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(CATEGORIES)],
    }


def coco_to_json(dataset: dict) -> str:
    """Deterministic serialization (stable key order, fixed float repr)."""
    return json.dumps(dataset, indent=2, sort_keys=False)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma: Y = round(0.299 R + 0.587 G + 0.114 B), uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ConversionError("expected an 8-bit HxWx3 RGB image")
    y = (0.299 * rgb[:, :, 0].astype(np.float64)
         + 0.587 * rgb[:, :, 1]
         + 0.114 * rgb[:, :, 2])
    return np.round(y).astype(np.uint8)
