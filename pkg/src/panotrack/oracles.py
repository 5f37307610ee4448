"""Brute-force reference implementations used to check the main code.

Nothing here imports from the rest of the package: each check is written
from its definition so that agreement means something.
"""

from __future__ import annotations

import itertools
import math


def brute_force_assignment(costs):
    """Minimum total cost over all injective row->column maps (rows <= cols or transposed).

    Returns (total, pairs).
    """
    m = len(costs)
    n = len(costs[0]) if m else 0
    if m == 0 or n == 0:
        return 0.0, []
    best, best_pairs = math.inf, []
    if m <= n:
        for cols in itertools.permutations(range(n), m):
            tot = sum(costs[r][c] for r, c in enumerate(cols))
            if tot < best:
                best, best_pairs = tot, list(enumerate(cols))
    else:
        for rows in itertools.permutations(range(m), n):
            tot = sum(costs[r][c] for c, r in enumerate(rows))
            if tot < best:
                best, best_pairs = tot, sorted((r, c) for c, r in enumerate(rows))
    return best, best_pairs


def kalman_1d_constant(z, x0, p0, r, steps):
    """Scalar Kalman filter on a constant with no process noise.

    Returns the list of (estimate, variance) after each of ``steps`` updates
    with the same measurement ``z``, starting from estimate ``x0``.  In closed
    form the variance after k updates is ``1 / (1/p0 + k/r)``.
    """
    out = []
    x, p = float(x0), p0
    for _ in range(steps):
        k = p / (p + r)
        x = x + k * (z - x)
        p = (1 - k) * p
        out.append((x, p))
    return out


def kalman_1d_variance(p0, r, k):
    return 1.0 / (1.0 / p0 + k / r)


def interval_iou(a, b):
    """IoU of two axis-aligned boxes by explicit interval intersection."""
    def overlap(lo1, hi1, lo2, hi2):
        lo, hi = max(lo1, lo2), min(hi1, hi2)
        return hi - lo if hi > lo else 0.0

    inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3])
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def seam_interval_iou(a, b, width):
    return max(interval_iou(a, (b[0] + k * width, b[1], b[2] + k * width, b[3])) for k in (-1, 0, 1))


def pr_curve_ap(scored, n_gt, points=101):
    """Interpolated AP from a list of (score, is_tp) by walking every cut-off.

    For each recall level r the precision is the best precision at any cut
    whose recall reaches r.
    """
    ranked = sorted(scored, key=lambda s: -s[0])
    curve = []
    tp = fp = 0
    for _, hit in ranked:
        if hit:
            tp += 1
        else:
            fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for i in range(points):
        r = i / (points - 1)
        total += max((p for rec, p in curve if rec >= r - 1e-12), default=0.0)
    return total / points


def greedy_image_matches(preds, gts, thr):
    """(score, is_tp) for one image: highest score first takes its best free gt."""
    free = list(range(len(gts)))
    out = []
    for box, score in sorted(preds, key=lambda p: -p[1]):
        best, best_v = None, thr
        for g in free:
            v = interval_iou(box, gts[g])
            if v >= best_v:
                best, best_v = g, v
        if best is not None:
            free.remove(best)
        out.append((score, best is not None))
    return out


def coco_ap_oracle(images, thresholds=None):
    """Single-category AP over IoU thresholds; ``images`` = [(preds, gts)].

    ``preds`` are (box, score), ``gts`` boxes; every box counts (no size filter).
    """
    if thresholds is None:
        thresholds = [0.5 + 0.05 * i for i in range(10)]
    n_gt = sum(len(g) for _, g in images)
    aps = []
    for thr in thresholds:
        scored = []
        for preds, gts in images:
            scored += greedy_image_matches(preds, gts, thr)
        aps.append(pr_curve_ap(scored, n_gt))
    return sum(aps) / len(aps)


def exhaustive_idf1(gt_tracks, hyp_tracks, threshold=0.5):
    """IDF1 by trying every injective gt -> hyp id map.

    Tracks are dicts id -> {frame: (category, box)}.
    """
    gids, hids = sorted(gt_tracks), sorted(hyp_tracks)
    n_gt = sum(len(t) for t in gt_tracks.values())
    n_hyp = sum(len(t) for t in hyp_tracks.values())

    def agree(g, h):
        a, b = gt_tracks[g], hyp_tracks[h]
        n = 0
        for f in a:
            if f in b and a[f][0] == b[f][0] and interval_iou(a[f][1], b[f][1]) >= threshold:
                n += 1
        return n

    best = 0
    k = min(len(gids), len(hids))
    for gsub in itertools.combinations(gids, k):
        for hperm in itertools.permutations(hids, k):
            best = max(best, sum(agree(g, h) for g, h in zip(gsub, hperm)))
    return 2 * best / (n_gt + n_hyp) if n_gt + n_hyp else 1.0


def f_score(tp, fp, fn):
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)
