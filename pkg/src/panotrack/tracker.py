"""DeepSORT-style tracking with category filtering and seam continuity.

Two changes relative to plain DeepSORT:

* category support: a track keeps the category it was started with, and
  every cost matrix forbids (cost ``1e5``) pairs of different categories;
* boundary support: fragments of one object split by the panorama seam are
  merged into one box reaching past the right edge, and motion/IoU distances
  take the best of the detection and its copies shifted by one panorama width.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .annotations import AnnotatedObject, FrameAnnotations
from .assignment import INFTY_COST, Assignment, hungarian_solve
from .boxes import Detection, iou, mbr, normalize_x, shift_x, vertical_iou, wrapped_candidates
from .kalman import (
    CHI2INV95,
    KalmanState,
    kalman_initiate,
    kalman_predict,
    kalman_update,
    squared_mahalanobis,
    to_xyah,
    xyah_to_box,
)

log = logging.getLogger(__name__)

UNCONFIRMED, CONFIRMED, DELETED = "unconfirmed", "confirmed", "deleted"


@dataclass
class TrackerConfig:
    max_age: int = 30
    n_init: int = 3
    lambda_: float = 0.0  # weight of the motion term in the appearance cost
    gating_threshold: float = CHI2INV95[4]
    max_cosine_distance: float = 0.2
    max_iou_distance: float = 0.7
    gallery_size: int = 100
    pano_width: int = 5376
    category_support: bool = True
    boundary_support: bool = True
    seam_vertical_iou: float = 0.3
    seam_tol: float = 1.0

    def __post_init__(self):
        if self.n_init < 1 or self.max_age < 1:
            raise ValueError("n_init and max_age must be at least 1")
        if self.pano_width < 4:
            raise ValueError("pano_width must be at least 4")


@dataclass(eq=False)
class Track:
    id: int
    category: str
    kalman: KalmanState
    state: str = UNCONFIRMED
    hits: int = 1
    age: int = 1
    time_since_update: int = 0
    score: float = 1.0
    features: deque = field(default_factory=deque)
    positions: deque = field(default_factory=lambda: deque(maxlen=30))
    history: list = field(default_factory=list)  # (frame, box, score) while unconfirmed

    @property
    def box(self):
        return xyah_to_box(self.kalman.mean)

    def is_confirmed(self):
        return self.state == CONFIRMED


def iou_distance_wrapped(track_box, det, pano_width, wrap=True):
    box = det.box if isinstance(det, Detection) else det
    if not wrap:
        return 1.0 - iou(track_box, box)
    return 1.0 - max(iou(track_box, c) for c in wrapped_candidates(box, pano_width))


def mahalanobis_distance_wrapped(s, det, pano_width, wrap=True):
    box = det.box if isinstance(det, Detection) else det
    cands = wrapped_candidates(box, pano_width) if wrap else [box]
    return float(np.min(squared_mahalanobis(s, [to_xyah(c) for c in cands])))


def cosine_distance_matrix(gallery, feats):
    """Smallest cosine distance from each row of ``feats`` to any gallery vector."""
    g = np.atleast_2d(np.asarray(gallery, dtype=float))
    f = np.atleast_2d(np.asarray(feats, dtype=float))
    if g.size == 0:
        raise ValueError("empty gallery")
    if g.shape[1] != f.shape[1]:
        raise ValueError(f"feature dimension {f.shape[1]} != gallery dimension {g.shape[1]}")
    gn = np.linalg.norm(g, axis=1)
    fn = np.linalg.norm(f, axis=1)
    if np.any(fn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm feature vector")
    sim = (g @ f.T) / np.outer(gn, fn)
    return np.clip(np.min(1.0 - sim, axis=0), 0.0, 2.0)


def cosine_distance(gallery, f):
    """Smallest cosine distance between ``f`` and any gallery vector."""
    return float(cosine_distance_matrix(gallery, np.asarray(f, dtype=float)[None, :])[0])


def apply_category_filter(costs, track_categories, det_categories):
    costs = np.array(costs, dtype=float)
    if costs.shape != (len(track_categories), len(det_categories)):
        raise ValueError("cost matrix shape does not match the category lists")
    tc = np.asarray(track_categories, dtype=object)[:, None]
    dc = np.asarray(det_categories, dtype=object)[None, :]
    costs[tc != dc] = INFTY_COST
    return costs


def merge_seam_detections(dets, pano_width, min_vertical_iou=0.3, tol=1.0):
    """Join left-edge and right-edge fragments of objects straddling the seam.

    The left fragment is moved right by one panorama width and merged with the
    right fragment, so the result may extend past ``x = width``.
    """
    W = pano_width
    rights = [i for i, d in enumerate(dets) if d.wraps_seam and d.box[2] >= W - tol]
    lefts = [i for i, d in enumerate(dets) if d.wraps_seam and d.box[0] <= tol and i not in rights]
    cands = []
    for i in rights:
        for j in lefts:
            a, b = dets[i], dets[j]
            if a.category != b.category:
                continue
            v = vertical_iou(a.box, b.box)
            if v >= min_vertical_iou:
                dh = abs((a.box[3] - a.box[1]) - (b.box[3] - b.box[1]))
                cands.append((-v, dh, i, j))
    cands.sort()
    used = set()
    merged = {}
    for _, _, i, j in cands:
        if i in used or j in used:
            continue
        used.update((i, j))
        a, b = dets[i], dets[j]
        box = mbr([a.box, shift_x(b.box, W)])
        area_a, area_b = a.area, b.area
        score = (a.score * area_a + b.score * area_b) / (area_a + area_b) if area_a + area_b > 0 else a.score
        feat = a.feature if area_a >= area_b else b.feature
        merged[i] = a.with_box(box, score=score, feature=feat, wraps_seam=True)
    out = []
    for k, d in enumerate(dets):
        if k in merged:
            out.append(merged[k])
        elif k not in used:
            out.append(d)
    return out


class PanoramicTracker:
    """Sequential tracker for one video stream."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.tracks = []
        self._next_id = 1
        self.events = []  # (frame, stage, track id, track category, det category, cost, gate)
        self.frame = None

    # -- distances -------------------------------------------------------
    def _wrap(self):
        return self.cfg.boundary_support

    def _near_candidate(self, track, box):
        """The copy of ``box`` (shifted by multiples of the width) closest to the track."""
        if not self._wrap():
            return box
        W = self.cfg.pano_width
        tx = track.kalman.mean[0]
        c = (box[0] + box[2]) / 2
        k = np.round((tx - c) / W)
        return shift_x(box, k * W)

    def _maha_row(self, t, dets):
        """Wrapped squared Mahalanobis distance from one track to every detection."""
        W, wrap = self.cfg.pano_width, self._wrap()
        cands = [wrapped_candidates(d.box, W) if wrap else [d.box] for d in dets]
        owner = np.repeat(np.arange(len(dets)), [len(c) for c in cands])
        d2 = squared_mahalanobis(t.kalman, [to_xyah(b) for c in cands for b in c])
        out = np.full(len(dets), np.inf)
        np.minimum.at(out, owner, d2)
        return out

    def _gate(self, costs, tracks, dets):
        for r, t in enumerate(tracks):
            costs[r, self._maha_row(t, dets) > self.cfg.gating_threshold] = INFTY_COST
        return costs

    def _filter(self, costs, tracks, dets):
        if self.cfg.category_support and costs.size:
            costs = apply_category_filter(costs, [t.category for t in tracks], [d.category for d in dets])
        return costs

    def appearance_cost(self, tracks, dets):
        """Cascade cost: gated cosine/motion blend, or gated IoU without features."""
        n, m = len(tracks), len(dets)
        costs = np.zeros((n, m))
        use_feat = all(d.feature is not None for d in dets) and all(len(t.features) for t in tracks)
        lam = self.cfg.lambda_
        if use_feat:
            feats = np.stack([np.asarray(d.feature, dtype=float) for d in dets])
        for r, t in enumerate(tracks):
            if use_feat:
                costs[r] = cosine_distance_matrix(list(t.features), feats)
                if lam:
                    costs[r] = lam * self._maha_row(t, dets) + (1 - lam) * costs[r]
            else:
                costs[r] = [iou_distance_wrapped(t.box, d, self.cfg.pano_width, self._wrap()) for d in dets]
        gate = self.cfg.max_cosine_distance if use_feat else self.cfg.max_iou_distance
        costs = self._gate(costs, tracks, dets)
        return self._filter(costs, tracks, dets), gate

    def iou_cost(self, tracks, dets):
        costs = np.array(
            [[iou_distance_wrapped(t.box, d, self.cfg.pano_width, self._wrap()) for d in dets] for t in tracks]
        ).reshape(len(tracks), len(dets))
        return self._filter(costs, tracks, dets), self.cfg.max_iou_distance

    # -- association -----------------------------------------------------
    def _match(self, cost_fn, track_idx, det_idx, dets, stage):
        if not track_idx or not det_idx:
            return [], list(track_idx), list(det_idx)
        tr = [self.tracks[i] for i in track_idx]
        de = [dets[j] for j in det_idx]
        costs, gate = cost_fn(tr, de)
        a = hungarian_solve(costs, gate)
        matches = []
        for r, c in a.matches:
            matches.append((track_idx[r], det_idx[c]))
            self.events.append((self.frame, stage, tr[r].id, tr[r].category, de[c].category, float(costs[r, c]), gate))
        return matches, [track_idx[r] for r in a.unmatched_rows], [det_idx[c] for c in a.unmatched_cols]

    def matching_cascade(self, dets):
        """Associate detections with the current (predicted) tracks.

        Returns an Assignment whose rows index ``self.tracks``.
        """
        confirmed = [i for i, t in enumerate(self.tracks) if t.is_confirmed()]
        unconfirmed = [i for i, t in enumerate(self.tracks) if not t.is_confirmed()]
        unmatched_dets = list(range(len(dets)))
        matches_a = []
        for level in range(self.cfg.max_age):
            if not unmatched_dets:
                break
            level_idx = [i for i in confirmed if self.tracks[i].time_since_update == 1 + level]
            if not level_idx:
                continue
            m, _, unmatched_dets = self._match(self.appearance_cost, level_idx, unmatched_dets, dets, "cascade")
            matches_a += m
        matched_a = {i for i, _ in matches_a}
        unmatched_a = [i for i in confirmed if i not in matched_a]
        iou_candidates = unconfirmed + [i for i in unmatched_a if self.tracks[i].time_since_update == 1]
        unmatched_a = [i for i in unmatched_a if self.tracks[i].time_since_update != 1]
        matches_b, unmatched_b, unmatched_dets = self._match(self.iou_cost, iou_candidates, unmatched_dets, dets, "iou")
        return Assignment(matches_a + matches_b, unmatched_a + unmatched_b, unmatched_dets)

    # -- lifecycle -------------------------------------------------------
    def _spawn(self, det, frame):
        t = Track(
            id=self._next_id,
            category=det.category,
            kalman=kalman_initiate(to_xyah(det.box)),
            score=det.score,
            features=deque(maxlen=self.cfg.gallery_size),
        )
        self._next_id += 1
        if det.feature is not None:
            t.features.append(det.feature)
        t.positions.append((det.box[0] + det.box[2]) / 2)
        t.history.append((frame, self.report_box(det.box), det.score))
        if self.cfg.n_init <= 1:
            t.state = CONFIRMED
        self.tracks.append(t)
        return t

    def _normalize(self, t):
        W = self.cfg.pano_width
        if not self._wrap():
            return
        x = t.kalman.mean[0]
        k = np.floor(x / W)
        if k:
            mean = t.kalman.mean.copy()
            mean[0] -= k * W
            t.kalman = KalmanState(mean, t.kalman.covariance)

    def step(self, dets, frame):
        """Process one frame; returns the confirmed tracks updated on this frame.

        Also returns, via ``self.confirmed_now``, tracks confirmed on this
        frame together with their tentative history.
        """
        self.frame = frame
        for t in self.tracks:
            t.kalman = kalman_predict(t.kalman)
            t.age += 1
            t.time_since_update += 1
        if self.cfg.boundary_support:
            dets = merge_seam_detections(dets, self.cfg.pano_width, self.cfg.seam_vertical_iou, self.cfg.seam_tol)
        a = self.matching_cascade(dets)
        self.confirmed_now = []
        for ti, di in a.matches:
            t, d = self.tracks[ti], dets[di]
            box = self._near_candidate(t, d.box)
            t.kalman = kalman_update(t.kalman, to_xyah(box))
            self._normalize(t)
            t.hits += 1
            t.time_since_update = 0
            t.score = d.score
            if d.feature is not None:
                t.features.append(d.feature)
            t.positions.append(t.kalman.mean[0])
            if t.state == UNCONFIRMED:
                t.history.append((frame, self.report_box(t.box), d.score))
                if t.hits >= self.cfg.n_init:
                    t.state = CONFIRMED
                    self.confirmed_now.append(t)
        for ti in a.unmatched_rows:
            t = self.tracks[ti]
            if t.state == UNCONFIRMED or t.time_since_update > self.cfg.max_age:
                t.state = DELETED
        for di in a.unmatched_cols:
            t = self._spawn(dets[di], frame)
            if t.state == CONFIRMED:
                self.confirmed_now.append(t)
        self.tracks = [t for t in self.tracks if t.state != DELETED]
        out = []
        for t in self.tracks:
            if t.is_confirmed() and t.time_since_update == 0:
                out.append(AnnotatedObject(t.id, t.category, self.report_box(t.box), 1.0, t.score))
        return out

    def report_box(self, box):
        return normalize_x(box, self.cfg.pano_width) if self.cfg.boundary_support else box


def step(tracker, detections, frame_index):
    """Functional alias of ``PanoramicTracker.step``."""
    return tracker.step(detections, frame_index)


def track_sequence(det_frames, cfg, frames=None, backfill=True, tracker=None):
    """Track a whole stream of per-frame detections.

    ``det_frames`` maps frame index -> detections.  With ``backfill`` the
    boxes a track had before it was confirmed are added to the output of
    their frames once it confirms (offline output).
    """
    tracker = tracker or PanoramicTracker(cfg)
    if frames is None:
        frames = range(min(det_frames, default=0), max(det_frames, default=-1) + 1)
    out = {f: [] for f in frames}
    for f in frames:
        out[f].extend(tracker.step(det_frames.get(f, []), f))
        if backfill:
            for t in tracker.confirmed_now:
                for hf, box, score in t.history[:-1]:
                    if hf in out:
                        out[hf].append(AnnotatedObject(t.id, t.category, box, 1.0, score))
        for t in tracker.confirmed_now:
            t.history = []
    result = [FrameAnnotations(f, sorted(out[f], key=lambda o: o.id)) for f in frames]
    return result, tracker
