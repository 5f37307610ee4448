"""Detect on perspective sub-views and fuse the results back onto the panorama."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .boxes import PANORAMA, Detection, area, iou, mbr, normalize_x, shift_x, split_at_seam, vertical_iou
from .projection import (
    ViewSpec,
    build_projection_maps,
    check_frame,
    geographic_to_perspective,
    lon_to_x,
    normalize_lon,
    resample_view,
    subview_to_geographic,
    x_to_lon,
    y_to_lat,
)

log = logging.getLogger(__name__)


class DetectorError(RuntimeError):
    """A detector failed on one sub-view."""

    def __init__(self, message, view_index=None):
        super().__init__(message if view_index is None else f"view {view_index}: {message}")
        self.view_index = view_index


@dataclass
class FusionConfig:
    fov: float = 120.0
    phi: float = -10.0
    thetas: tuple = (0.0, 90.0, 180.0, -90.0)
    edge_margin: float = 15.0
    sub_view_size: tuple = (1280, 1280)
    nms_iou: float = 0.65
    tangency_tol: float = 1.0  # px in sub-view space
    merge_vertical_iou: float = 0.3
    contain_frac: float = 0.9  # a tangent fragment this much inside a neighbour box is redundant
    workers: int = 1

    def __post_init__(self):
        # keep 180 rather than -180 for the back view
        self.thetas = tuple(180.0 if normalize_lon(t) == -180 else float(normalize_lon(t)) for t in self.thetas)
        self.sub_view_size = tuple(int(s) for s in self.sub_view_size)
        if len(self.thetas) < 2:
            raise ValueError("at least two views are required")
        if len(set(self.thetas)) != len(self.thetas):
            raise ValueError(f"duplicate view longitudes {self.thetas}")
        if self.overlap <= 0:
            raise ValueError(f"views of fov {self.fov} at {self.thetas} leave gaps or do not overlap")
        if not 0 <= self.edge_margin <= self.overlap / 2:
            raise ValueError(
                f"edge_margin {self.edge_margin} must lie in [0, overlap/2 = {self.overlap / 2}]"
            )

    @property
    def spacing(self):
        """Largest longitude gap between neighbouring view centres."""
        s = sorted(self.thetas)
        gaps = [b - a for a, b in zip(s, s[1:])] + [s[0] + 360 - s[-1]]
        return max(gaps)

    @property
    def overlap(self):
        return self.fov - self.spacing


def make_views(cfg, pano=None):
    """One ViewSpec per configured longitude, in configuration order."""
    w, h = cfg.sub_view_size
    return [ViewSpec(cfg.fov, t, cfg.phi, w, h) for t in cfg.thetas]


def neighbours(cfg):
    """Map view index -> (index of the view to its west, index of the view to its east)."""
    order = sorted(range(len(cfg.thetas)), key=lambda i: cfg.thetas[i])
    n = len(order)
    out = {}
    for k, i in enumerate(order):
        out[i] = (order[(k - 1) % n], order[(k + 1) % n])
    return out


@lru_cache(maxsize=64)
def _maps(view, pano):
    return build_projection_maps(view, pano)


def _column_angle(sx, view):
    """Horizontal angle (deg) of a sub-view column from the optical axis."""
    T = view.T
    return np.degrees(np.arctan(2 * T * np.asarray(sx, dtype=float) / view.out_width - T))


def filter_edge_boxes(dets, cfg):
    """Drop boxes lying entirely within ``edge_margin`` of a left/right view edge.

    Boxes clipped by a view edge are kept and flagged in ``Detection.tangent``
    so that the merge step can deal with them.
    """
    views = make_views(cfg)
    inner = cfg.fov / 2 - cfg.edge_margin
    out = []
    for d in dets:
        view = views[d.frame_space]
        x1, _, x2, _ = d.box
        tangent = set(d.tangent)
        if x1 <= cfg.tangency_tol:
            tangent.add("left")
        if x2 >= view.out_width - cfg.tangency_tol:
            tangent.add("right")
        in_left = _column_angle(x2, view) <= -inner
        in_right = _column_angle(x1, view) >= inner
        if (in_left or in_right) and not tangent:
            continue
        out.append(replace(d, tangent=frozenset(tangent)))
    return out


def _border_points(box, step=1.0):
    x1, y1, x2, y2 = box
    nx = max(int(math.ceil((x2 - x1) / step)), 1) + 1
    ny = max(int(math.ceil((y2 - y1) / step)), 1) + 1
    xs = np.linspace(x1, x2, nx)
    ys = np.linspace(y1, y2, ny)
    top = np.stack([xs, np.full(nx, y1)], axis=1)
    bot = np.stack([xs, np.full(nx, y2)], axis=1)
    left = np.stack([np.full(ny, x1), ys], axis=1)
    right = np.stack([np.full(ny, x2), ys], axis=1)
    return np.concatenate([top, bot, left, right])


def _reproject_points(pts, view, pano):
    """Sub-view points to panorama coords, x unwrapped around the view centre."""
    lon, lat = subview_to_geographic(pts[:, 0], pts[:, 1], view)
    dlon = normalize_lon(lon - view.theta_c)
    x = lon_to_x(view.theta_c, pano.width) + dlon / 360.0 * pano.width
    y = (0.5 - lat / 180.0) * pano.height
    return x, y


def _seam_column(view):
    """Sub-view column on the seam when it coincides with the optical axis column."""
    if abs(abs(view.theta_c) - 180.0) < 1e-9:
        return view.out_width / 2.0
    return None


def reproject_box(det, view, pano, split_seam=True):
    """Map a sub-view detection onto the panorama as the MBR of its reprojected border.

    Returns a list of one detection, or of two ``wraps_seam`` detections when
    the box straddles the panorama seam and ``split_seam`` is set.  With
    ``split_seam=False`` the single box is returned in coordinates unwrapped
    around the view's centre, so it may extend past either panorama edge.
    """
    x1, y1, x2, y2 = det.box
    tol = 1e-6
    if x1 < -tol or y1 < -tol or x2 > view.out_width + tol or y2 > view.out_height + tol:
        raise ValueError(f"box {det.box} lies outside the {view.out_width}x{view.out_height} view")
    base = dict(frame_space=PANORAMA, source_view=det.frame_space)

    def project(box):
        x, y = _reproject_points(_border_points(box), view, pano)
        return (x.min(), y.min(), x.max(), y.max())

    full = project(det.box)
    W = pano.width
    seam = np.ceil(full[0] / W) * W
    if not split_seam or not (full[0] < seam < full[2]):
        return [replace(det, box=full, **base)]

    col = _seam_column(view)
    if col is not None and x1 < col < x2:
        # split along the view's centre line and reproject both halves
        west, east = project((x1, y1, col, y2)), project((col, y1, x2, y2))
        parts = [(west[0], west[1], seam, west[3]), (seam, east[1], east[2], east[3])]
    else:
        parts = [(full[0], full[1], seam, full[3]), (seam, full[1], full[2], full[3])]
    out = []
    for p in parts:
        p = normalize_x(p, W)
        if p[2] - p[0] <= 0:
            continue
        out.append(replace(det, box=p, wraps_seam=True, **base))
    return out


def _visible_in(box, view, pano, tol):
    """True when the whole panorama box lies inside ``view``'s frustum."""
    x1, y1, x2, y2 = box
    n = 16
    xs = np.linspace(x1, x2, n)
    ys = np.linspace(y1, y2, n)
    pts = np.concatenate(
        [
            np.stack([xs, np.full(n, y1)], 1),
            np.stack([xs, np.full(n, y2)], 1),
            np.stack([np.full(n, x1), ys], 1),
            np.stack([np.full(n, x2), ys], 1),
        ]
    )
    lon = x_to_lon(pts[:, 0], pano.width)
    lat = np.clip(y_to_lat(pts[:, 1], pano.height), -90, 90)
    p, ok = geographic_to_perspective(lon, lat, view)
    if not ok.all():
        return False
    return bool(
        np.all(p[:, 0] >= -tol)
        and np.all(p[:, 0] <= view.out_width + tol)
        and np.all(p[:, 1] >= -tol)
        and np.all(p[:, 1] <= view.out_height + tol)
    )


def _near(box, ref_x, W):
    """Shift ``box`` by a multiple of W so its centre is closest to ``ref_x``."""
    c = (box[0] + box[2]) / 2
    k = np.round((ref_x - c) / W)
    return shift_x(box, k * W) if k else tuple(box)


def _rejoin_seam_parts(dets, W, tol):
    """Undo seam splitting for parts that came from the same sub-view detection."""
    rights = [d for d in dets if d.wraps_seam and d.box[2] >= W - tol]
    right_ids = {id(d) for d in rights}
    lefts = [d for d in dets if d.wraps_seam and d.box[0] <= tol and id(d) not in right_ids]
    used = set()
    out = [d for d in dets if not d.wraps_seam]
    for r in rights:
        best, best_v = None, 0.0
        for j, l in enumerate(lefts):
            if j in used or l.category != r.category or l.source_view != r.source_view:
                continue
            if l.score != r.score:
                continue
            v = vertical_iou(l.box, r.box)
            if v > best_v:
                best, best_v = j, v
        if best is None or best_v < 0.3:
            out.append(r)
            continue
        used.add(best)
        l = lefts[best]
        joined = mbr([r.box, shift_x(l.box, W)])
        out.append(replace(r, box=joined, wraps_seam=False))
    out.extend(l for j, l in enumerate(lefts) if j not in used)
    # unpaired seam parts keep their flag
    return out


def _component_score(members):
    areas = np.array([area(m.box) for m in members])
    scores = np.array([m.score for m in members])
    if areas.sum() <= 0:
        return float(scores.max())
    return float(np.dot(areas, scores) / areas.sum())


def _covered_by_neighbour(d, dets, nb, W, frac):
    """True if a same-category box from an adjacent view, not clipped on the
    facing side, contains at least ``frac`` of the fragment."""
    west, east = nb[d.source_view]
    a = area(d.box)
    if a <= 0:
        return False
    for o in dets:
        if o is d or o.category != d.category:
            continue
        facing = {west: "right", east: "left"}.get(o.source_view)
        if facing is None or facing in o.tangent:
            continue
        ob = _near(o.box, (d.box[0] + d.box[2]) / 2, W)
        ix = min(d.box[2], ob[2]) - max(d.box[0], ob[0])
        iy = min(d.box[3], ob[3]) - max(d.box[1], ob[1])
        if ix > 0 and iy > 0 and ix * iy >= frac * a:
            return True
    return False


def merge_fragments(fragments):
    """One detection for fragments of one object, given in a common unwrapped frame.

    The box is their MBR and the score the area-weighted mean of their scores.
    """
    best = max(fragments, key=lambda m: area(m.box))
    return replace(
        best,
        box=mbr([m.box for m in fragments]),
        score=_component_score(fragments),
        tangent=frozenset(),
        source_view=None,
        wraps_seam=False,
    )


def merge_boxes(dets, cfg, pano, return_groups=False):
    """Remove redundant edge fragments, merge multi-view fragments and de-duplicate.

    Input detections are on the panorama; tangency flags and ``source_view``
    come from the sub-view stage.  Output boxes are normalized to the panorama
    and split at the seam (``wraps_seam``).  With ``return_groups`` the list of
    fragment groups behind every merged box is returned as well.
    """
    W = pano.width
    views = make_views(cfg)
    nb = neighbours(cfg)
    px_tol = max(cfg.tangency_tol, 1.0)
    dets = _rejoin_seam_parts(list(dets), W, px_tol)

    # 1. tangent fragments fully visible in the neighbouring view are redundant
    kept = []
    for d in dets:
        if d.tangent and d.source_view is not None:
            west, east = nb[d.source_view]
            redundant = False
            for side, other in (("left", west), ("right", east)):
                if side in d.tangent:
                    ref = lon_to_x(views[other].theta_c, W)
                    if _visible_in(_near(d.box, ref, W), views[other], pano, px_tol):
                        redundant = True
            if not redundant:
                redundant = _covered_by_neighbour(d, dets, nb, W, cfg.contain_frac)
            if redundant:
                continue
        kept.append(d)

    # 2. pair east-tangent fragments with west-tangent fragments of the next view
    pairs = []
    for i, a in enumerate(kept):
        if "right" not in a.tangent or a.source_view is None:
            continue
        east = nb[a.source_view][1]
        for j, b in enumerate(kept):
            if j == i or b.source_view != east or "left" not in b.tangent:
                continue
            if a.category != b.category:
                continue
            bb = _near(b.box, (a.box[0] + a.box[2]) / 2, W)
            if bb[0] > a.box[2] + px_tol or bb[2] < a.box[0] - px_tol:
                continue
            v = vertical_iou(a.box, bb)
            if v >= cfg.merge_vertical_iou:
                pairs.append((v, -abs((a.box[3] - a.box[1]) - (bb[3] - bb[1])), i, j))
    pairs.sort(reverse=True)
    right_used, left_used = set(), set()
    adj = {i: [] for i in range(len(kept))}
    for _, _, i, j in pairs:
        if i in right_used or j in left_used:
            continue
        right_used.add(i)
        left_used.add(j)
        adj[i].append(j)
        adj[j].append(i)

    # 3. connected components -> MBR with area-weighted score
    seen = set()
    merged, groups = [], []
    order = sorted(range(len(kept)), key=lambda k: (kept[k].source_view is None, kept[k].source_view or 0))
    for start in order:
        if start in seen:
            continue
        comp = [start]
        boxes = {start: kept[start].box}
        seen.add(start)
        stack = [start]
        while stack:
            k = stack.pop()
            for m in adj[k]:
                if m in seen:
                    continue
                seen.add(m)
                boxes[m] = _near(kept[m].box, (boxes[k][0] + boxes[k][2]) / 2, W)
                comp.append(m)
                stack.append(m)
        members = [kept[k] for k in comp]
        if len(comp) == 1:
            merged.append(members[0])
            groups.append(members)
            continue
        merged.append(merge_fragments([replace(m, box=boxes[k]) for m, k in zip(members, comp)]))
        groups.append(members)

    # 4. cross-view duplicates
    idx = sorted(range(len(merged)), key=lambda k: -merged[k].score)
    survivors = []
    for k in idx:
        d = merged[k]
        dup = False
        for s in survivors:
            o = merged[s]
            if o.category != d.category:
                continue
            if iou(_near(d.box, (o.box[0] + o.box[2]) / 2, W), o.box) >= cfg.nms_iou:
                dup = True
                break
        if not dup:
            survivors.append(k)

    out, out_groups = [], []
    for k in survivors:
        d = merged[k]
        for part in split_at_seam(d.box, W):
            wraps = d.wraps_seam or len(split_at_seam(d.box, W)) > 1
            out.append(replace(d, box=part, wraps_seam=wraps))
            out_groups.append(groups[k])
    order = sorted(range(len(out)), key=lambda k: (-out[k].score, out[k].box))
    out = [out[k] for k in order]
    if return_groups:
        return out, [out_groups[k] for k in order]
    return out


def fuse_frame(frame, detector, cfg, pano, frame_index=0):
    """Run ``detector`` on every sub-view of one panorama and fuse the results."""
    if frame is not None:
        check_frame(frame, pano)
    views = make_views(cfg, pano)

    def run(i):
        img = None
        if getattr(detector, "needs_image", True):
            if frame is None:
                raise DetectorError("detector needs pixels but no frame was given", i)
            img = resample_view(frame, _maps(views[i], pano))
        try:
            found = detector.detect(img, i, frame_index)
        except DetectorError as e:
            if e.view_index is None:
                raise DetectorError(str(e), i) from e
            raise
        except Exception as e:
            raise DetectorError(f"{type(e).__name__}: {e}", i) from e
        return [replace(d, frame_space=i) for d in found]

    if cfg.workers > 1 and getattr(detector, "concurrent", False):
        with ThreadPoolExecutor(cfg.workers) as ex:
            per_view = list(ex.map(run, range(len(views))))
    else:
        per_view = [run(i) for i in range(len(views))]

    reprojected = []
    for i, dets in enumerate(per_view):
        for d in filter_edge_boxes(dets, cfg):
            reprojected.extend(reproject_box(d, views[i], pano, split_seam=False))
    return merge_boxes(reprojected, cfg, pano)


def format_fused(frame_index, dets):
    """Line-delimited fused records: frame category score x1 y1 x2 y2 wraps [features]."""
    from .categories import label_token

    lines = []
    for d in dets:
        cols = [str(frame_index), label_token(d.category), f"{d.score:.6f}"]
        cols += [f"{v:.3f}" for v in d.box]
        cols.append("1" if d.wraps_seam else "0")
        if d.feature is not None:
            cols += [f"{v:.6g}" for v in d.feature]
        lines.append(" ".join(cols))
    return lines


def parse_fused(lines):
    """Inverse of ``format_fused``; returns {frame: [Detection]}."""
    from .categories import parse_label

    out = {}
    dim = None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 8:
            raise ValueError(f"line {n}: expected at least 8 columns, got {len(parts)}")
        try:
            frame = int(parts[0])
            cat = parse_label(parts[1])
            score = float(parts[2])
            box = tuple(float(v) for v in parts[3:7])
            wraps = parts[7] == "1"
            feat = np.array([float(v) for v in parts[8:]]) if len(parts) > 8 else None
        except ValueError as e:
            raise ValueError(f"line {n}: {e}") from None
        if feat is not None:
            if dim is None:
                dim = feat.size
            elif feat.size != dim:
                raise ValueError(f"line {n}: feature dimension {feat.size} != {dim}")
        out.setdefault(frame, []).append(
            Detection(box=box, score=score, category=cat, wraps_seam=wraps, feature=feat)
        )
    return out
