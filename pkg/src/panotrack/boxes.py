"""Box formats, IoU and the detection record passed between stages.

Boxes are plain ``(x_min, y_min, x_max, y_max)`` tuples in continuous pixel
coordinates: pixel ``i`` covers ``[i, i + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .categories import check_category

PANORAMA = -1  # frame_space value for detections already on the panorama


def yolo_to_xyxy(box):
    """(centre x, centre y, w, h) -> (x_min, y_min, x_max, y_max)."""
    x, y, w, h = box
    if not (w > 0 and h > 0):
        raise ValueError(f"box width and height must be positive, got w={w}, h={h}")
    return (x - w / 2, y - h / 2, x + w / 2, y + h / 2)


def xyxy_to_xywh(box):
    """(x_min, y_min, x_max, y_max) -> (centre x, centre y, w, h)."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    if not (w > 0 and h > 0):
        raise ValueError(f"box width and height must be positive, got w={w}, h={h}")
    return ((x1 + x2) / 2, (y1 + y2) / 2, w, h)


def area(box):
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU between box arrays of shape (m, 4) and (n, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def vertical_iou(a, b):
    """IoU of the y-extents only."""
    inter = min(a[3], b[3]) - max(a[1], b[1])
    if inter <= 0:
        return 0.0
    union = max(a[3], b[3]) - min(a[1], b[1])
    return inter / union


def mbr(boxes):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    return (boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())


def shift_x(box, dx):
    return (box[0] + dx, box[1], box[2] + dx, box[3])


def wrapped_candidates(box, pano_width):
    """The box on the panorama and on the two virtual copies either side."""
    return [shift_x(box, -pano_width), tuple(box), shift_x(box, pano_width)]


def wrapped_iou(a, b, pano_width):
    return max(iou(a, c) for c in wrapped_candidates(b, pano_width))


def normalize_x(box, pano_width):
    """Shift a box horizontally so that its left edge lies in [0, width)."""
    k = np.floor(box[0] / pano_width)
    return shift_x(box, -k * pano_width) if k else tuple(box)


def split_at_seam(box, pano_width):
    """Clip a (normalized) box to the panorama, splitting it where it wraps.

    Returns one box, or two boxes ``[right part, left part]`` when the input
    extends past ``x = width``.
    """
    box = normalize_x(box, pano_width)
    x1, y1, x2, y2 = box
    if x2 <= pano_width:
        return [box]
    if x2 - x1 >= pano_width:
        return [(0.0, y1, float(pano_width), y2)]
    return [(x1, y1, float(pano_width), y2), (0.0, y1, x2 - pano_width, y2)]


@dataclass(eq=False)
class Detection:
    """A scored, labelled box on a sub-view or on the panorama."""

    box: tuple
    score: float
    category: str
    frame_space: int = PANORAMA
    wraps_seam: bool = False
    feature: Optional[np.ndarray] = None
    # sides ('left'/'right') of the sub-view the box is clipped by
    tangent: frozenset = field(default_factory=frozenset)
    # sub-view a panorama detection was reprojected from
    source_view: Optional[int] = None

    def __post_init__(self):
        check_category(self.category)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        self.box = tuple(float(v) for v in self.box)
        if self.box[0] > self.box[2] or self.box[1] > self.box[3]:
            raise ValueError(f"malformed box {self.box}")
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=float)

    @property
    def area(self):
        return area(self.box)

    @property
    def xywh(self):
        return xyxy_to_xywh(self.box)

    def with_box(self, box, **kw):
        return replace(self, box=tuple(box), **kw)
