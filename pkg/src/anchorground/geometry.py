"""Pixel <-> patch geometry.

Conventions:
- Boxes are half-open ``[x1, x2) x [y1, y2)`` in pixels.
- Patches are indexed row-major: ``index = row * cols + col``.
- Border patches of images whose size is not a multiple of the patch side are
  clipped rectangles; their true (clipped) area is used everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

Point = tuple[float, float]


@dataclass(frozen=True)
class PatchGrid:
    image_w: float
    image_h: float
    patch_px: float

    def __post_init__(self):
        if self.image_w <= 0 or self.image_h <= 0 or self.patch_px <= 0:
            raise DomainError(f"invalid grid {self.image_w}x{self.image_h} / {self.patch_px}")

    @property
    def cols(self) -> int:
        return math.ceil(self.image_w / self.patch_px)

    @property
    def rows(self) -> int:
        return math.ceil(self.image_h / self.patch_px)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def patch_rect(self, index: int) -> "BBox":
        if not 0 <= index < self.size:
            raise DomainError(f"patch index {index} outside [0, {self.size})")
        r, c = divmod(index, self.cols)
        p = self.patch_px
        return BBox(c * p, r * p, min((c + 1) * p, self.image_w), min((r + 1) * p, self.image_h))

    def patch_rects(self) -> np.ndarray:
        """All clipped patch rectangles as an ``(|V|, 4)`` float array."""
        p = self.patch_px
        c = np.arange(self.cols)
        r = np.arange(self.rows)
        x1 = np.tile(c * p, self.rows)
        y1 = np.repeat(r * p, self.cols)
        x2 = np.minimum(x1 + p, self.image_w)
        y2 = np.minimum(y1 + p, self.image_h)
        return np.stack([x1, y1, x2, y2], axis=1).astype(np.float64)

    def patch_centers(self) -> np.ndarray:
        rects = self.patch_rects()
        return np.stack([(rects[:, 0] + rects[:, 2]) / 2, (rects[:, 1] + rects[:, 3]) / 2], axis=1)


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def canonical(cls, x1, y1, x2, y2, image_w=None, image_h=None) -> "BBox":
        """Order the corners and optionally clamp to ``[0, image_w] x [0, image_h]``."""
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        if image_w is not None:
            x1, x2 = min(max(x1, 0), image_w), min(max(x2, 0), image_w)
        if image_h is not None:
            y1, y2 = min(max(y1, 0), image_h), min(max(y2, 0), image_h)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def center(self) -> Point:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def contains(self, point: Point) -> bool:
        x, y = point
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2

    def contains_box(self, other: "BBox") -> bool:
        return self.x1 <= other.x1 and self.y1 <= other.y1 and other.x2 <= self.x2 and other.y2 <= self.y2

    def intersection(self, other: "BBox") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        return max(w, 0) * max(h, 0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class CropRegion:
    origin_x: float
    origin_y: float
    size_px: float
    zoom: float = 1.0

    def __post_init__(self):
        if self.zoom < 1:
            raise DomainError(f"zoom must be >= 1, got {self.zoom}")
        if self.size_px <= 0:
            raise DomainError("crop size must be positive")

    @property
    def frame_px(self) -> float:
        """Side of the zoomed crop frame."""
        return self.size_px * self.zoom

    def as_bbox(self) -> BBox:
        return BBox(self.origin_x, self.origin_y, self.origin_x + self.size_px, self.origin_y + self.size_px)


def patch_index_of(grid: PatchGrid, point: Point) -> int:
    x, y = point
    if not (0 <= x < grid.image_w and 0 <= y < grid.image_h):
        raise DomainError(f"point {point} outside {grid.image_w}x{grid.image_h} image")
    c = int(math.floor(x / grid.patch_px))
    r = int(math.floor(y / grid.patch_px))
    return r * grid.cols + c


def patch_center(grid: PatchGrid, index: int) -> Point:
    # center of the clipped rectangle, so ragged border patches stay in bounds
    return grid.patch_rect(index).center


def rect_iou(a: BBox, b: BBox) -> float:
    inter = a.intersection(b)
    if inter <= 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou(grid: PatchGrid, index: int, bbox: BBox) -> float:
    return rect_iou(grid.patch_rect(index), bbox)


def iou_all(grid: PatchGrid, bbox: BBox) -> np.ndarray:
    """IoU of every patch with ``bbox``, shape ``(|V|,)``."""
    rects = grid.patch_rects()
    w = np.clip(np.minimum(rects[:, 2], bbox.x2) - np.maximum(rects[:, 0], bbox.x1), 0, None)
    h = np.clip(np.minimum(rects[:, 3], bbox.y2) - np.maximum(rects[:, 1], bbox.y1), 0, None)
    inter = w * h
    areas = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    union = areas + bbox.area - inter
    out = np.zeros(len(rects))
    pos = inter > 0
    out[pos] = inter[pos] / union[pos]
    return out


def expand_bbox(grid: PatchGrid, bbox: BBox, k: int) -> BBox:
    if k < 0:
        raise DomainError("expansion must be non-negative")
    if k == 0:
        return bbox
    m = k * grid.patch_px
    return BBox.canonical(bbox.x1 - m, bbox.y1 - m, bbox.x2 + m, bbox.y2 + m, grid.image_w, grid.image_h)


def plan_crop(grid: PatchGrid, center: Point, crop_px: float, zoom: float = 1.0) -> CropRegion:
    """Square crop of side ``crop_px`` centred on ``center``.

    Near a border the window is translated back inside the image rather than
    shrunk, so the second pass always sees the same number of tokens. A crop
    larger than the image degenerates to the whole image (the square side is
    capped at the shorter image side).
    """
    if crop_px <= 0:
        raise DomainError("crop_px must be positive")
    if zoom < 1:
        raise DomainError("zoom must be >= 1")
    cx, cy = center
    if not (0 <= cx <= grid.image_w and 0 <= cy <= grid.image_h):
        raise DomainError(f"crop center {center} outside image")
    size = min(crop_px, grid.image_w, grid.image_h)
    ox = min(max(cx - size / 2, 0), grid.image_w - size)
    oy = min(max(cy - size / 2, 0), grid.image_h - size)
    return CropRegion(ox, oy, size, zoom)


def map_to_global(local_point: Point, region: CropRegion) -> Point:
    x, y = local_point
    f = region.frame_px
    if not (0 <= x <= f and 0 <= y <= f):
        raise DomainError(f"local point {local_point} outside zoomed frame of side {f}")
    return (region.origin_x + x / region.zoom, region.origin_y + y / region.zoom)


def map_to_local(point: Point, region: CropRegion) -> Point:
    """Inverse of :func:`map_to_global`."""
    x, y = point
    return ((x - region.origin_x) * region.zoom, (y - region.origin_y) * region.zoom)


def bbox_to_local(bbox: BBox, region: CropRegion) -> BBox:
    """Project a global box into the zoomed crop frame, clipped to the frame."""
    x1, y1 = map_to_local((bbox.x1, bbox.y1), region)
    x2, y2 = map_to_local((bbox.x2, bbox.y2), region)
    f = region.frame_px
    return BBox.canonical(x1, y1, x2, y2, f, f)


def min_relax(grid: PatchGrid, bbox: BBox, point: Point, cap: int = 8) -> float:
    """Smallest ``k`` such that ``expand_bbox(k)`` contains ``point``; ``inf`` beyond ``cap``."""
    for k in range(cap + 1):
        if expand_bbox(grid, bbox, k).contains(point):
            return k
    return math.inf
