"""Minimum-cost assignment with gating."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

INFTY_COST = 1e5


@dataclass
class Assignment:
    matches: list = field(default_factory=list)  # (row, col) pairs
    unmatched_rows: list = field(default_factory=list)
    unmatched_cols: list = field(default_factory=list)


def hungarian_solve(costs, gate=np.inf):
    """Optimal one-to-one assignment; pairs costing more than ``gate`` are dropped.

    Entries above the gate are clamped to just above it before solving so
    that forbidden pairs cannot distort the rest of the solution.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = costs.shape
    if m == 0 or n == 0:
        return Assignment([], list(range(m)), list(range(n)))
    if not np.all(np.isfinite(costs)) or np.any(costs < 0):
        raise ValueError("cost matrix must be finite and non-negative")
    work = costs.copy()
    if np.isfinite(gate):
        work[work > gate] = gate + 1e-5
    rows, cols = linear_sum_assignment(work)
    matches = []
    for r, c in zip(rows, cols):
        if costs[r, c] > gate or costs[r, c] >= INFTY_COST:
            continue
        matches.append((int(r), int(c)))
    mr = {r for r, _ in matches}
    mc = {c for _, c in matches}
    return Assignment(
        matches,
        [r for r in range(m) if r not in mr],
        [c for c in range(n) if c not in mc],
    )
