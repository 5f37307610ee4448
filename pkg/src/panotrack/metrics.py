"""Detection AP and multi-object tracking metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import area, iou, wrapped_iou

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
# exact i / 100 so that a recall such as 3 / 10 compares equal to its point
RECALL_POINTS = np.arange(101) / 100.0
SIZE_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, 128.0**2),
    "medium": (128.0**2, 384.0**2),
    "large": (384.0**2, np.inf),
}


def size_class(box_area):
    if box_area < 128.0**2:
        return "small"
    if box_area < 384.0**2:
        return "medium"
    return "large"


def _iou_fn(pano_width):
    if pano_width:
        return lambda a, b: wrapped_iou(a, b, pano_width)
    return iou


# -- detection AP -------------------------------------------------------------

@dataclass
class APResult:
    ap: float
    ap50: float
    ap75: float
    aps: float
    apm: float
    apl: float
    per_category: dict = field(default_factory=dict)


def match_image(preds, gts, thr, ignore, iou_fn=iou):
    """Greedy score-descending matching for one image and category.

    ``preds`` are (box, score) sorted by score, ``gts`` boxes and ``ignore``
    flags for the ground truth.  Returns per-prediction (matched, ignored).
    """
    order = sorted(range(len(gts)), key=lambda g: ignore[g])  # non-ignored first
    taken = [False] * len(gts)
    out = []
    for box, _ in preds:
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for g in order:
            if taken[g]:
                continue
            if best >= 0 and not ignore[best] and ignore[g]:
                break
            v = iou_fn(box, gts[g])
            if v >= best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            out.append((True, ignore[best]))
        else:
            out.append((False, False))
    return out


def _precision_at_recall(tps, fps, n_gt):
    tp = np.cumsum(tps, dtype=float)
    fp = np.cumsum(fps, dtype=float)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    # precision envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return q.mean()


def category_ap(predictions, truth, category, thr, size="all", iou_fn=iou):
    """AP for one category, IoU threshold and size range; nan without ground truth."""
    lo, hi = SIZE_RANGES[size]
    records = []  # (score, matched, ignored)
    n_gt = 0
    for img in set(predictions) | set(truth):
        gts = [g.box for g in truth.get(img, []) if g.category == category]
        ign = [not (lo <= area(b) < hi) for b in gts]
        n_gt += sum(1 for i in ign if not i)
        preds = sorted(
            ((p.box, p.score) for p in predictions.get(img, []) if p.category == category),
            key=lambda t: -t[1],
        )
        for (box, score), (m, ig) in zip(preds, match_image(preds, gts, thr, ign, iou_fn)):
            if not m:
                ig = not (lo <= area(box) < hi)
            records.append((score, m, ig))
    if n_gt == 0:
        return float("nan")
    records = [r for r in records if not r[2]]
    records.sort(key=lambda r: -r[0])
    tps = np.array([r[1] for r in records], dtype=bool)
    return _precision_at_recall(tps, ~tps, n_gt)


def compute_ap(predictions, truth, iou_thresholds=IOU_THRESHOLDS, pano_width=None):
    """COCO-style AP, AP50, AP75 and size-stratified AP.

    ``predictions`` maps image -> objects with ``box``, ``score``, ``category``;
    ``truth`` maps image -> objects with ``box`` and ``category``.  Averages
    over categories that have ground truth in the given size range.
    """
    iou_fn = _iou_fn(pano_width)
    cats = sorted({g.category for gs in truth.values() for g in gs})
    thresholds = np.asarray(iou_thresholds, dtype=float)

    def mean_ap(size, thrs):
        vals = [category_ap(predictions, truth, c, t, size, iou_fn) for c in cats for t in thrs]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    per_cat = {c: float(np.nanmean([category_ap(predictions, truth, c, t, "all", iou_fn) for t in thresholds]))
               for c in cats}
    return APResult(
        ap=mean_ap("all", thresholds),
        ap50=mean_ap("all", [0.5]),
        ap75=mean_ap("all", [0.75]),
        aps=mean_ap("small", thresholds),
        apm=mean_ap("medium", thresholds),
        apl=mean_ap("large", thresholds),
        per_category=per_cat,
    )


# -- tracking -----------------------------------------------------------------

@dataclass
class MotReport:
    idf1: float
    idp: float
    idr: float
    mota: float
    motp: float
    mt: int
    pt: int
    ml: int
    fp: int
    fn: int
    ids: int
    fm: int
    num_gt: int
    num_matches: int
    num_gt_tracks: int

    COLUMNS = ("IDF1", "IDP", "IDR", "MOTA", "MOTP", "MT", "PT", "ML", "FP", "FN", "IDs", "FM", "GT")

    def row(self):
        return (self.idf1, self.idp, self.idr, self.mota, self.motp, self.mt, self.pt, self.ml,
                self.fp, self.fn, self.ids, self.fm, self.num_gt)


def _frames_by_index(stream):
    out = {}
    for fa in stream:
        if fa.frame in out:
            raise ValueError(f"frame {fa.frame} appears twice")
        ids = [o.id for o in fa.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"frame {fa.frame}: duplicate ids")
        out[fa.frame] = fa.objects
    return out


def _pair_iou(g, h, iou_fn, class_aware):
    if class_aware and g.category != h.category:
        return 0.0
    return iou_fn(g.box, h.box)


def clear_mot_events(pred, truth, threshold=0.5, pano_width=None, class_aware=True):
    """Per-frame CLEAR-MOT correspondences.

    Returns a list of (frame, gt ids, hyp ids, [(gt id, hyp id, iou)]).
    """
    iou_fn = _iou_fn(pano_width)
    P, T = _frames_by_index(pred), _frames_by_index(truth)
    last = {}  # gt id -> hyp id of its previous match
    events = []
    for f in sorted(set(P) | set(T)):
        gts = {g.id: g for g in T.get(f, [])}
        hyps = {h.id: h for h in P.get(f, [])}
        matches = []
        # keep correspondences from the previous match when still valid
        for gid, g in gts.items():
            hid = last.get(gid)
            if hid in hyps:
                v = _pair_iou(g, hyps[hid], iou_fn, class_aware)
                if v >= threshold and all(hid != m[1] for m in matches):
                    matches.append((gid, hid, v))
        free_g = [g for g in gts if all(g != m[0] for m in matches)]
        free_h = [h for h in hyps if all(h != m[1] for m in matches)]
        if free_g and free_h:
            ious = np.array([[_pair_iou(gts[g], hyps[h], iou_fn, class_aware) for h in free_h] for g in free_g])
            cost = np.where(ious >= threshold, 1.0 - ious, 1e6)
            for r, c in zip(*linear_sum_assignment(cost)):
                if ious[r, c] >= threshold:
                    matches.append((free_g[r], free_h[c], float(ious[r, c])))
        events.append((f, list(gts), list(hyps), matches))
        for gid, hid, _ in matches:
            last[gid] = hid
    return events


def id_scores(pred, truth, threshold=0.5, pano_width=None, class_aware=True):
    """IDTP, number of gt boxes, number of hyp boxes under the optimal id mapping."""
    iou_fn = _iou_fn(pano_width)
    P, T = _frames_by_index(pred), _frames_by_index(truth)
    gt_ids = sorted({g.id for objs in T.values() for g in objs})
    hyp_ids = sorted({h.id for objs in P.values() for h in objs})
    gi = {g: i for i, g in enumerate(gt_ids)}
    hi = {h: i for i, h in enumerate(hyp_ids)}
    overlap = np.zeros((len(gt_ids), len(hyp_ids)))
    n_gt = n_hyp = 0
    for f in set(P) | set(T):
        gs, hs = T.get(f, []), P.get(f, [])
        n_gt += len(gs)
        n_hyp += len(hs)
        for g in gs:
            for h in hs:
                if _pair_iou(g, h, iou_fn, class_aware) >= threshold:
                    overlap[gi[g.id], hi[h.id]] += 1
    idtp = 0.0
    if overlap.size:
        r, c = linear_sum_assignment(overlap, maximize=True)
        idtp = float(overlap[r, c].sum())
    return idtp, n_gt, n_hyp


def compute_mot_metrics(pred, truth, threshold=0.5, pano_width=None, class_aware=True):
    """CLEAR-MOT, identity and coverage metrics of ``pred`` against ``truth``.

    Both are sequences of FrameAnnotations; boxes may extend past the right
    edge when ``pano_width`` is given, in which case IoU is seam-aware.
    """
    events = clear_mot_events(pred, truth, threshold, pano_width, class_aware)
    fp = fn = ids = fm = 0
    dist = []
    prev_hyp = {}  # gt id -> last matched hyp id
    tracked = {}  # gt id -> matched on its previous appearance
    present = defaultdict(int)
    covered = defaultdict(int)
    n_gt = 0
    for _, gts, hyps, matches in events:
        n_gt += len(gts)
        matched_g = {m[0]: m for m in matches}
        fp += len(hyps) - len(matches)
        fn += len(gts) - len(matches)
        for gid in gts:
            present[gid] += 1
            m = matched_g.get(gid)
            if m is None:
                tracked[gid] = False
                continue
            covered[gid] += 1
            if gid in prev_hyp and prev_hyp[gid] != m[1]:
                ids += 1
            if gid in prev_hyp and tracked.get(gid) is False:
                fm += 1
            prev_hyp[gid] = m[1]
            tracked[gid] = True
            dist.append(1.0 - m[2])
    ratios = [covered[g] / present[g] for g in present]
    mt = sum(r >= 0.8 for r in ratios)
    ml = sum(r <= 0.2 for r in ratios)
    idtp, n_g, n_h = id_scores(pred, truth, threshold, pano_width, class_aware)
    return MotReport(
        idf1=2 * idtp / (n_g + n_h) if n_g + n_h else 1.0,
        idp=idtp / n_h if n_h else 1.0,
        idr=idtp / n_g if n_g else 1.0,
        mota=1.0 - (fp + fn + ids) / n_gt if n_gt else float("nan"),
        motp=float(np.mean(dist)) if dist else float("nan"),
        mt=mt,
        pt=len(ratios) - mt - ml,
        ml=ml,
        fp=fp,
        fn=fn,
        ids=ids,
        fm=fm,
        num_gt=n_gt,
        num_matches=len(dist),
        num_gt_tracks=len(ratios),
    )
