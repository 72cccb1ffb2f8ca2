"""Patch-wise grounding labels from a ground-truth box.

Each patch gets ``IoU(patch, box) * N(patch_center; box_center, diag(sx^2, sy^2))``
with ``sx = alpha * box_width`` and ``sy = alpha * box_height``; the vector is
then normalized to sum to one. The Gaussian is sampled at the patch center and
left unnormalized because the constant cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import BBox, PatchGrid, iou_all

DEFAULT_ALPHA = 0.8
SIGMA_FLOOR = 0.5


@dataclass(frozen=True)
class GroundingLabel:
    values: np.ndarray
    grid: PatchGrid
    alpha: float = DEFAULT_ALPHA

    def __len__(self):
        return len(self.values)


def _nondegenerate(bbox: BBox) -> BBox:
    # point-like boxes are widened to 1x1 px around their center
    x1, y1, x2, y2 = bbox.x1, bbox.y1, bbox.x2, bbox.y2
    if x2 - x1 <= 0:
        cx = (x1 + x2) / 2
        x1, x2 = cx - 0.5, cx + 0.5
    if y2 - y1 <= 0:
        cy = (y1 + y2) / 2
        y1, y2 = cy - 0.5, cy + 0.5
    return BBox(x1, y1, x2, y2)


def gaussian_sigmas(bbox: BBox, alpha: float = DEFAULT_ALPHA) -> tuple[float, float]:
    bbox = _nondegenerate(bbox)
    return max(alpha * bbox.width, SIGMA_FLOOR), max(alpha * bbox.height, SIGMA_FLOOR)


def gaussian_weight(patch_center, bbox: BBox, alpha: float = DEFAULT_ALPHA) -> float:
    sx, sy = gaussian_sigmas(bbox, alpha)
    cx, cy = _nondegenerate(bbox).center
    dx = (patch_center[0] - cx) / sx
    dy = (patch_center[1] - cy) / sy
    return math.exp(-0.5 * (dx * dx + dy * dy))


def patch_labels(grid: PatchGrid, bbox: BBox, alpha: float = DEFAULT_ALPHA, weighted: bool = True) -> GroundingLabel:
    """Normalized label over the patches of ``grid``.

    With ``weighted=False`` every overlapping patch gets equal mass (the flat
    labelling used as an ablation arm).
    """
    box = _nondegenerate(bbox)
    ious = iou_all(grid, box)
    if not np.any(ious > 0):
        raise DomainError(f"bbox {bbox} does not intersect the {grid.image_w}x{grid.image_h} image")
    if weighted:
        sx, sy = gaussian_sigmas(bbox, alpha)
        cx, cy = box.center
        centers = grid.patch_centers()
        dx = (centers[:, 0] - cx) / sx
        dy = (centers[:, 1] - cy) / sy
        # log domain so a tiny box far from every patch center still normalizes
        logw = np.full(len(ious), -np.inf)
        pos = ious > 0
        logw[pos] = np.log(ious[pos]) - 0.5 * (dx[pos] ** 2 + dy[pos] ** 2)
        raw = np.exp(logw - logw[pos].max())
    else:
        raw = (ious > 0).astype(np.float64)
    return GroundingLabel(raw / raw.sum(), grid, alpha)
