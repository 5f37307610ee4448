"""MOT16 and COCO style annotation files.

MOT lines are ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,class,visibility``
with the COCO category id in the ``class`` column.  A box reaching past the
right edge of the panorama is written as two clipped rows sharing the id;
reading merges such pairs back into one box.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .annotations import AnnotatedObject, FrameAnnotations
from .boxes import split_at_seam, vertical_iou
from .categories import COCO_IDS, category_from_id


@dataclass
class MotRow:
    frame: int
    id: int
    box: tuple  # xyxy
    conf: float
    category: str
    visibility: float = 1.0

    def to_line(self):
        x1, y1, x2, y2 = self.box
        vals = [self.frame, self.id, _num(x1), _num(y1), _num(x2 - x1), _num(y2 - y1),
                _num(self.conf), COCO_IDS[self.category], _num(self.visibility)]
        return ",".join(str(v) for v in vals)


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else repr(v)


def parse_mot_line(line, source="<mot>", lineno=0):
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 9:
        raise ValueError(f"{source}:{lineno}: expected 9 comma-separated fields, got {len(parts)}")
    try:
        frame, tid = int(float(parts[0])), int(float(parts[1]))
        x, y, w, h, conf = (float(p) for p in parts[2:7])
        category = category_from_id(int(float(parts[7])))
        vis = float(parts[8])
    except ValueError as e:
        raise ValueError(f"{source}:{lineno}: {e}") from None
    if w <= 0 or h <= 0:
        raise ValueError(f"{source}:{lineno}: non-positive box size")
    return MotRow(frame, tid, (x, y, x + w, y + h), conf, category, vis)


def read_mot(path):
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                rows.append(parse_mot_line(line, str(path), i))
    return rows


def write_mot(path, rows):
    rows = sorted(rows, key=lambda r: (r.frame, r.id, r.box[0]))
    Path(path).write_text("".join(r.to_line() + "\n" for r in rows))


def frames_to_mot(frames, pano_width):
    """Annotation frames -> MOT rows, splitting boxes that wrap the seam."""
    rows = []
    for fa in frames:
        for o in fa.objects:
            for part in split_at_seam(o.box, pano_width):
                rows.append(MotRow(fa.frame, o.id, part, o.score, o.category, o.visibility))
    return rows


def _touches_left(box, tol=1.0):
    return box[0] <= tol


def _touches_right(box, pano_width, tol=1.0):
    return box[2] >= pano_width - tol


def mot_to_frames(rows, pano_width, frames=None):
    """MOT rows -> annotation frames, joining same-id seam pairs into one box.

    ``frames`` optionally lists frame indices to emit even when empty.
    """
    by_frame = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_frame[r.frame][r.id].append(r)
    keys = sorted(set(by_frame) | set(frames or ()))
    out = []
    for f in keys:
        objs = []
        for tid, rs in sorted(by_frame[f].items()):
            if len(rs) == 1:
                r = rs[0]
                objs.append(AnnotatedObject(tid, r.category, r.box, r.visibility, r.conf))
                continue
            if len(rs) != 2:
                raise ValueError(f"frame {f}: id {tid} appears {len(rs)} times")
            a, b = sorted(rs, key=lambda r: r.box[0])
            if not (_touches_left(a.box) and _touches_right(b.box, pano_width) and a.category == b.category):
                raise ValueError(f"frame {f}: id {tid} has two boxes that are not a seam pair")
            box = (b.box[0], min(a.box[1], b.box[1]), a.box[2] + pano_width, max(a.box[3], b.box[3]))
            wa = a.box[2] - a.box[0]
            wb = b.box[2] - b.box[0]
            vis = (a.visibility * wa + b.visibility * wb) / (wa + wb)
            objs.append(AnnotatedObject(tid, a.category, box, vis, max(a.conf, b.conf)))
        out.append(FrameAnnotations(f, objs))
    return out


def merge_split_track_ids(rows, pano_width, min_vertical_iou=0.3, tol=1.0):
    """Unify the ids of objects labelled twice because they straddle the seam.

    A pair is a box touching ``x = 0`` and a box touching the right edge in
    the same frame, with equal category and vertical IoU >= ``min_vertical_iou``.
    Both ids become the smaller one in every frame.  Returns
    ``(rows, remap)`` where ``remap`` maps old id -> new id.
    Raises ValueError when a box has more than one candidate partner.
    """
    by_frame = defaultdict(list)
    for r in rows:
        by_frame[r.frame].append(r)
    parent = {}

    def find(i):
        while parent.get(i, i) != i:
            i = parent[i]
        return i

    ambiguous = []
    for f, rs in sorted(by_frame.items()):
        lefts = [r for r in rs if _touches_left(r.box, tol)]
        rights = [r for r in rs if _touches_right(r.box, pano_width, tol)]
        pairs = [
            (a, b)
            for a in lefts
            for b in rights
            if a is not b and a.id != b.id and a.category == b.category
            and vertical_iou(a.box, b.box) >= min_vertical_iou
        ]
        counts = defaultdict(int)
        for a, b in pairs:
            counts[id(a)] += 1
            counts[id(b)] += 1
        if any(c > 1 for c in counts.values()):
            ambiguous.append(f)
            continue
        for a, b in pairs:
            ra, rb = find(a.id), find(b.id)
            if ra != rb:
                lo, hi = min(ra, rb), max(ra, rb)
                parent[hi] = lo
    if ambiguous:
        raise ValueError(f"ambiguous seam pairs in frames {ambiguous}")
    remap = {i: find(i) for i in parent if find(i) != i}
    out = [MotRow(r.frame, remap.get(r.id, r.id), r.box, r.conf, r.category, r.visibility) for r in rows]
    return out, remap


# -- COCO ---------------------------------------------------------------------

@dataclass
class CocoAnnotation:
    id: int
    image_id: int
    category: str
    box: tuple  # xyxy
    score: float = 1.0
    track_id: int = None
    extra: dict = field(default_factory=dict)


@dataclass
class CocoDataset:
    images: list  # dicts with at least id and frame
    annotations: list
    extra: dict = field(default_factory=dict)  # unknown top-level keys

    def image_frames(self):
        return {im["id"]: im.get("frame", im["id"]) for im in self.images}

    def to_frames(self, pano_width=None):
        """Group by image as FrameAnnotations (needs track ids)."""
        frame_of = self.image_frames()
        rows = []
        for a in self.annotations:
            if a.track_id is None:
                raise ValueError(f"annotation {a.id} has no track_id")
            rows.append(MotRow(frame_of[a.image_id], a.track_id, a.box, a.score, a.category))
        return mot_to_frames(rows, pano_width or 0, frames=sorted(frame_of.values()))

    def detections_by_image(self):
        out = defaultdict(list)
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "score", "track_id", "area", "iscrowd"}
_TOP_KEYS = {"images", "annotations", "categories"}


def _parse_ann(d, where):
    for k in ("image_id", "category_id", "bbox"):
        if k not in d:
            raise ValueError(f"{where}: missing {k!r}")
    try:
        category = category_from_id(d["category_id"])
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None
    bbox = d["bbox"]
    if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
        raise ValueError(f"{where}: bad bbox {bbox}")
    x, y, w, h = (float(v) for v in bbox)
    return CocoAnnotation(
        id=int(d.get("id", 0)),
        image_id=int(d["image_id"]),
        category=category,
        box=(x, y, x + w, y + h),
        score=float(d.get("score", 1.0)),
        track_id=None if d.get("track_id") is None else int(d["track_id"]),
        extra={k: v for k, v in d.items() if k not in _ANN_KEYS},
    )


def read_coco(path):
    """Read a COCO dataset file or a COCO results list (predictions)."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        anns = [_parse_ann(d, f"{path}:[{i}]") for i, d in enumerate(data)]
        images = [{"id": i} for i in sorted({a.image_id for a in anns})]
        return CocoDataset(images, anns)
    if not isinstance(data, dict) or "annotations" not in data:
        raise ValueError(f"{path}: expected a COCO object with 'annotations' or a results list")
    for i, c in enumerate(data.get("categories", [])):
        try:
            name = category_from_id(c["id"])
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}:categories[{i}]: {e}") from None
        if "name" in c and c["name"] != name:
            raise ValueError(f"{path}:categories[{i}]: id {c['id']} is {name!r}, not {c['name']!r}")
    anns = [_parse_ann(d, f"{path}:annotations[{i}]") for i, d in enumerate(data["annotations"])]
    images = data.get("images") or [{"id": i} for i in sorted({a.image_id for a in anns})]
    return CocoDataset(images, anns, {k: v for k, v in data.items() if k not in _TOP_KEYS})


def coco_from_frames(frames, pano_width, width=None, height=None):
    """Build a dataset from annotation frames; image id = frame index."""
    images = []
    anns = []
    for fa in frames:
        im = {"id": fa.frame, "frame": fa.frame}
        if width:
            im.update(width=width, height=height)
        images.append(im)
        for o in fa.objects:
            for part in split_at_seam(o.box, pano_width):
                anns.append(CocoAnnotation(len(anns) + 1, fa.frame, o.category, part, o.score, o.id))
    return CocoDataset(images, anns)


def write_coco(path, ds):
    out = dict(ds.extra)
    out["images"] = ds.images
    out["categories"] = [{"id": i, "name": n} for n, i in COCO_IDS.items()]
    anns = []
    for a in ds.annotations:
        x1, y1, x2, y2 = a.box
        d = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": COCO_IDS[a.category],
            "bbox": [x1, y1, x2 - x1, y2 - y1],
            "area": (x2 - x1) * (y2 - y1),
            "iscrowd": 0,
            "score": a.score,
        }
        if a.track_id is not None:
            d["track_id"] = a.track_id
        d.update(a.extra)
        anns.append(d)
    out["annotations"] = anns
    Path(path).write_text(json.dumps(out, indent=1))
