"""Tiled (slicing-aided) inference over a pluggable detector.

Plans overlapping tiles over a large image, crops and optionally
upscales each tile, runs a detector per tile, remaps its boxes back to
global coordinates, and deduplicates with deterministic class-wise NMS.
Also provides the fine-tuning-time patch/annotation extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ContractError, DetectorError


@dataclass(frozen=True)
class SliceConfig:
    height_range: Tuple[int, int] = (512, 512)   # [M_min, M_max] pixels
    width_range: Tuple[int, int] = (512, 512)    # [N_min, N_max] pixels
    overlap_ratio: float = 0.25
    resize_target: Optional[Tuple[int, int]] = None  # (width, height); long side governs
    seed: int = 0
    min_area_fraction: float = 0.25              # fine-tuning annotation visibility
    include_full_image: bool = False             # also run the detector on the whole image

    def __post_init__(self):
        hmin, hmax = self.height_range
        wmin, wmax = self.width_range
        if not (0 < hmin <= hmax and 0 < wmin <= wmax):
            raise ContractError("slice dimension ranges must satisfy 0 < min <= max")
        if not (0.0 <= self.overlap_ratio < 1.0):
            raise ContractError("overlap_ratio must be in [0, 1)")


@dataclass(frozen=True)
class SlicePlan:
    source_w: int
    source_h: int
    rects: Tuple[Tuple[int, int, int, int], ...]  # (x, y, w, h), row-major by (y, x)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    bbox: Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ContractError(f"degenerate bbox {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise ContractError(f"score {self.score} outside [0, 1]")

    @property
    def area(self):
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


class DetectorInterface(Protocol):
    """A detector returns patch-local detections for a patch image."""

    def detect(self, patch: np.ndarray) -> List[Detection]: ...


def plan_slices(source_w: int, source_h: int, slice_w: int, slice_h: int,
                overlap_ratio: float) -> SlicePlan:
    """Overlapping tile layout with edge windows clamped flush to the border."""
    if source_w < 1 or source_h < 1:
        raise ContractError("image dimensions must be positive")
    if slice_w < 1 or slice_h < 1:
        raise ContractError("slice dimensions must be positive")
    if not (0.0 <= overlap_ratio < 1.0):
        raise ContractError("overlap_ratio must be in [0, 1)")

    def starts(source, size):
        if source <= size:
            return [0], min(source, size)
        stride = max(1, math.floor(size * (1.0 - overlap_ratio)))
        out = []
        pos = 0
        while True:
            if pos + size >= source:
                out.append(source - size)
                break
            out.append(pos)
            pos += stride
        return out, size

    xs, w = starts(source_w, slice_w)
    ys, h = starts(source_h, slice_h)
    rects = tuple((x, y, w, h) for y in ys for x in xs)
    return SlicePlan(source_w=source_w, source_h=source_h, rects=rects)


def _resize_bilinear(patch: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize (align-corners-false convention), float64 output."""
    in_h, in_w = patch.shape[:2]
    img = patch.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    sx = in_w / out_w
    sy = in_h / out_h
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    wx = np.clip(xs - x0, 0.0, 1.0)
    wy = np.clip(ys - y0, 0.0, 1.0)
    top = img[y0][:, x0] * (1 - wx)[None, :, None] + img[y0][:, x1] * wx[None, :, None]
    bot = img[y1][:, x0] * (1 - wx)[None, :, None] + img[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    if patch.ndim == 2:
        out = out[:, :, 0]
    return out


def extract_and_resize(image: np.ndarray, plan: SlicePlan,
                       resize_target: Optional[Tuple[int, int]] = None):
    """Crop every planned rect; optionally upscale uniformly.

    The resize target's long side sets a uniform scale (aspect ratio is
    preserved, no letterboxing).  Returns (patch, scale_x, scale_y) per rect.
    """
    h, w = image.shape[:2]
    if (w, h) != (plan.source_w, plan.source_h):
        raise ContractError(f"image is {w}x{h} but plan expects {plan.source_w}x{plan.source_h}")
    out = []
    for (x, y, rw, rh) in plan.rects:
        if x < 0 or y < 0 or x + rw > w or y + rh > h:
            raise ContractError(f"rect {(x, y, rw, rh)} out of bounds")
        crop = image[y:y + rh, x:x + rw]
        if resize_target is None:
            out.append((crop, 1.0, 1.0))
            continue
        long_target = max(resize_target)
        scale = long_target / max(rw, rh)
        ow = int(round(rw * scale))
        oh = int(round(rh * scale))
        out.append((_resize_bilinear(crop, ow, oh), ow / rw, oh / rh))
    return out


def map_to_global(dets: Sequence[Detection], rect: Tuple[int, int, int, int],
                  scale_x: float, scale_y: float) -> List[Detection]:
    """Undo the patch resize and shift boxes by the rect origin."""
    x, y = rect[0], rect[1]
    out = []
    for d in dets:
        x0, y0, x1, y1 = d.bbox
        out.append(replace(d, bbox=(x0 / scale_x + x, y0 / scale_y + y,
                                    x1 / scale_x + x, y1 / scale_y + y)))
    return out


def _iou(a, b):
    ix0 = max(a[0], b[0]); iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2]); iy1 = min(a[3], b[3])
    iw = max(0.0, ix1 - ix0); ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def merge_predictions(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Class-wise greedy NMS with deterministic tie-breaking.

    Candidates are visited by (score desc, x_min asc, y_min asc); a box is
    kept unless it overlaps a kept same-class box with IoU >= threshold.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ContractError("iou_threshold must be in (0, 1]")
    order = sorted(dets, key=lambda d: (-d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.class_id))
    kept: List[Detection] = []
    for d in order:
        suppressed = any(k.class_id == d.class_id and _iou(k.bbox, d.bbox) >= iou_threshold
                         for k in kept)
        if not suppressed:
            kept.append(d)
    return kept


def sliced_inference(image: np.ndarray, detector: DetectorInterface,
                     config: SliceConfig, iou_threshold: float = 0.5,
                     max_workers: int = 1) -> List[Detection]:
    """Plan -> crop -> detect -> remap -> merge; order-independent result.

    Inference tiles use the upper bound of the configured dimension
    ranges.  With max_workers > 1, patches are detected concurrently;
    the merged output is identical either way because results are
    gathered in plan order before the deterministic merge.
    """
    h, w = image.shape[:2]
    plan = plan_slices(w, h, config.width_range[1], config.height_range[1],
                       config.overlap_ratio)
    patches = extract_and_resize(image, plan, config.resize_target)

    def run(item):
        rect, (patch, sx, sy) = item
        try:
            local = detector.detect(patch)
        except Exception as exc:
            raise DetectorError(f"detector failed on patch rect {rect}: {exc}") from exc
        return map_to_global(local, rect, sx, sy)

    items = list(zip(plan.rects, patches))
    all_dets: List[Detection] = []
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for dets in pool.map(run, items):
                all_dets.extend(dets)
    else:
        for item in items:
            all_dets.extend(run(item))
    if config.include_full_image:
        try:
            all_dets.extend(detector.detect(image))
        except Exception as exc:
            raise DetectorError(f"detector failed on full image: {exc}") from exc
    return merge_predictions(all_dets, iou_threshold)


def finetune_patches(image: np.ndarray, annotations: Sequence[Detection],
                     config: SliceConfig):
    """Sampled-size training patches with clipped, rescaled annotations.

    Slice height/width are drawn uniformly from the configured ranges with
    the config seed.  Annotations keeping less than ``min_area_fraction``
    of their area inside a patch are dropped from that patch.
    """
    rng = np.random.default_rng(config.seed)
    h, w = image.shape[:2]
    sh = int(rng.integers(config.height_range[0], config.height_range[1] + 1))
    sw = int(rng.integers(config.width_range[0], config.width_range[1] + 1))
    plan = plan_slices(w, h, sw, sh, config.overlap_ratio)
    patches = extract_and_resize(image, plan, config.resize_target)
    out = []
    for rect, (patch, sx, sy) in zip(plan.rects, patches):
        x, y, rw, rh = rect
        kept = []
        for a in annotations:
            x0, y0, x1, y1 = a.bbox
            cx0, cy0 = max(x0, x), max(y0, y)
            cx1, cy1 = min(x1, x + rw), min(y1, y + rh)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            if (cx1 - cx0) * (cy1 - cy0) < config.min_area_fraction * a.area:
                continue
            kept.append(replace(a, bbox=((cx0 - x) * sx, (cy0 - y) * sy,
                                         (cx1 - x) * sx, (cy1 - y) * sy)))
        out.append((patch, kept))
    return out


class MockOracleDetector:
    """Test detector that reports ground-truth boxes visible in a patch.

    ``detect_in_rect`` must be primed with global ground truth; the
    detector then answers patch queries by rect, which ``sliced_inference``
    does not expose, so instead the oracle recognizes patches by content:
    it is constructed with the source image and global boxes and locates
    each patch's offset by exact pixel match.  A seeded jitter can perturb
    the reported boxes to emulate a real detector.
    """

    def __init__(self, image: np.ndarray, gt: Sequence[Detection],
                 score: float = 0.9, jitter: float = 0.0, seed: int = 0,
                 min_visible_fraction: float = 0.999):
        self.image = image
        self.gt = list(gt)
        self.score = score
        self.jitter = jitter
        self.rng = np.random.default_rng(seed)
        self.min_visible_fraction = min_visible_fraction

    def _locate(self, patch: np.ndarray):
        ph, pw = patch.shape[:2]
        ih, iw = self.image.shape[:2]
        if ph > ih or pw > iw:
            return None
        # candidate offsets where the top-left pixel matches, then verify
        sub = self.image[:ih - ph + 1, :iw - pw + 1]
        hit = sub == patch[0, 0]
        if hit.ndim == 3:
            hit = hit.all(axis=-1)
        for y, x in zip(*np.nonzero(hit)):
            if (np.array_equal(self.image[y, x:x + pw], patch[0])
                    and np.array_equal(self.image[y:y + ph, x:x + pw], patch)):
                return int(x), int(y)
        return None

    def detect(self, patch: np.ndarray) -> List[Detection]:
        loc = self._locate(patch)
        if loc is None:
            return []
        px, py = loc
        ph, pw = patch.shape[:2]
        out = []
        for g in self.gt:
            x0, y0, x1, y1 = g.bbox
            cx0, cy0 = max(x0, px), max(y0, py)
            cx1, cy1 = min(x1, px + pw), min(y1, py + ph)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            if (cx1 - cx0) * (cy1 - cy0) < self.min_visible_fraction * g.area:
                continue
            b = [cx0 - px, cy0 - py, cx1 - px, cy1 - py]
            if self.jitter > 0.0:
                b = list(np.asarray(b) + self.rng.uniform(-self.jitter, self.jitter, 4))
                b[0] = min(b[0], b[2] - 1e-6)
                b[1] = min(b[1], b[3] - 1e-6)
            out.append(Detection(class_id=g.class_id, score=self.score, bbox=tuple(b)))
        return out
