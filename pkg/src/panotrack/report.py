"""Exploratory dataset statistics: position heat map, category and size counts."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import area
from .categories import CATEGORIES
from .metrics import size_class


@dataclass
class DatasetReport:
    heat: np.ndarray  # (H // cell, W // cell) counts
    category_counts: dict
    size_counts: dict
    cell: int = 1

    @property
    def total_boxes(self):
        return sum(self.category_counts.values())


def dataset_report(frames, width, height, cell=1):
    """Count how often each pixel lies inside an annotated box.

    A pixel is inside when its centre is; columns wrap at the seam.  With
    ``cell > 1`` the counts are summed over ``cell`` x ``cell`` blocks.
    """
    if width % cell or height % cell:
        raise ValueError("cell must divide the frame size")
    heat = np.zeros((height, width), dtype=np.int64)
    cats = {c: 0 for c in CATEGORIES}
    sizes = {"small": 0, "medium": 0, "large": 0}
    for fa in frames:
        for o in fa.objects:
            x1, y1, x2, y2 = o.box
            r0, r1 = max(math.ceil(y1 - 0.5), 0), min(math.ceil(y2 - 0.5), height)
            c0, c1 = math.ceil(x1 - 0.5), math.ceil(x2 - 0.5)
            if r1 > r0 and c1 > c0:
                cols = np.arange(c0, min(c1, c0 + width)) % width
                heat[r0:r1, cols] += 1
            cats[o.category] += 1
            sizes[size_class(area(o.box))] += 1
    if cell > 1:
        heat = heat.reshape(height // cell, cell, width // cell, cell).sum(axis=(1, 3))
    return DatasetReport(heat, cats, sizes, cell)


def write_report(report, out_dir):
    """Write heat.csv, categories.csv and sizes.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "heat.csv", report.heat, fmt="%d", delimiter=",")
    with open(out / "categories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "boxes"])
        w.writerows(report.category_counts.items())
    with open(out / "sizes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "boxes"])
        w.writerows(report.size_counts.items())
