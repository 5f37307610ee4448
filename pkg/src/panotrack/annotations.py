"""Per-frame annotation records shared by the tracker, harness and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .categories import check_category


@dataclass
class AnnotatedObject:
    id: int
    category: str
    box: tuple  # may extend past the panorama width for seam-straddling objects
    visibility: float = 1.0
    score: float = 1.0
    feature: Optional[np.ndarray] = None

    def __post_init__(self):
        check_category(self.category)
        self.box = tuple(float(v) for v in self.box)


@dataclass
class FrameAnnotations:
    frame: int
    objects: list = field(default_factory=list)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"frame {self.frame}: object ids {dup} appear more than once")


@dataclass
class OvertakeRecord:
    track_id: int
    side: str  # 'left' | 'right'
    state: str  # 'unconfirmed' | 'confirmed' | 'failed'
    start_frame: int
    end_frame: Optional[int] = None

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.state not in ("unconfirmed", "confirmed", "failed"):
            raise ValueError(f"bad overtake state {self.state!r}")
        if self.state == "confirmed" and self.end_frame is None:
            raise ValueError("a confirmed overtake needs an end frame")
        if self.end_frame is not None and self.end_frame < self.start_frame:
            raise ValueError("end_frame precedes start_frame")
