"""Scripted panoramic scenes with analytically known ground truth.

Objects are lon/lat rectangles moving along piecewise-linear keyframes, so
every box, identity and overtake in the ground truth follows from the script
without any estimation.

Script files are JSON::

    {
      "width": 2048, "height": 1024, "frames": 120, "fps": 30,
      "centre_lon": 0,
      "objects": [
        {"id": 1, "category": "car", "score": 0.9,
         "feature": [0.1, ...],            # optional appearance vector
         "keyframes": [                    # sizes in degrees
           {"frame": 0,  "lon": -150, "lat": -10, "w": 12, "h": 8},
           {"frame": 60, "lon": -30,  "lat": -10, "w": 12, "h": 8}
         ]}
      ]
    }

Longitudes along a trajectory are unwrapped: going from 170 to 190 crosses
the seam once.  Consecutive keyframes must differ by less than 180 degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .annotations import AnnotatedObject, FrameAnnotations, OvertakeRecord
from .boxes import Detection, split_at_seam
from .categories import MOTOR_VEHICLES, check_category
from .projection import PanoramaGeometry, lat_to_y, lon_to_x, normalize_lon

CATEGORY_COLOURS = {
    "person": (220, 20, 60),
    "bicycle": (119, 11, 32),
    "car": (0, 0, 142),
    "motorbike": (0, 0, 230),
    "bus": (0, 60, 100),
    "truck": (0, 0, 70),
    "traffic light": (250, 170, 30),
}
BACKGROUND = (40, 40, 40)


@dataclass
class Keyframe:
    frame: int
    lon: float
    lat: float
    w: float
    h: float


@dataclass
class ScriptedObject:
    id: int
    category: str
    keyframes: list
    score: float = 0.9
    feature: Optional[np.ndarray] = None

    def __post_init__(self):
        check_category(self.category)
        self.keyframes = sorted(
            (k if isinstance(k, Keyframe) else Keyframe(**k) for k in self.keyframes),
            key=lambda k: k.frame,
        )
        if not self.keyframes:
            raise ValueError(f"object {self.id} has no keyframes")
        frames = [k.frame for k in self.keyframes]
        if len(set(frames)) != len(frames):
            raise ValueError(f"object {self.id}: duplicate keyframe frames")
        for a, b in zip(self.keyframes, self.keyframes[1:]):
            if abs(b.lon - a.lon) >= 180:
                raise ValueError(f"object {self.id}: keyframes {a.frame}->{b.frame} jump 180 deg or more")
        for k in self.keyframes:
            if k.w <= 0 or k.h <= 0:
                raise ValueError(f"object {self.id}: non-positive size at frame {k.frame}")
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=float)

    @property
    def first(self):
        return self.keyframes[0].frame

    @property
    def last(self):
        return self.keyframes[-1].frame

    def active(self, t):
        return self.first <= t <= self.last

    def state(self, t):
        """Interpolated (lon, lat, w, h) at time ``t`` (unwrapped lon)."""
        ks = self.keyframes
        f = [k.frame for k in ks]
        return tuple(float(np.interp(t, f, [getattr(k, a) for k in ks])) for a in ("lon", "lat", "w", "h"))

    def lonlat_rect(self, t):
        lon, lat, w, h = self.state(t)
        return (lon - w / 2, lat - h / 2, lon + w / 2, lat + h / 2)


@dataclass
class SceneScript:
    width: int
    height: int
    frames: int
    fps: float = 30.0
    objects: list = field(default_factory=list)
    centre_lon: float = 0.0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ScriptedObject) else ScriptedObject(**o) for o in self.objects]
        if self.frames < 1:
            raise ValueError("a scene needs at least one frame")
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        PanoramaGeometry(self.width, self.height)

    @property
    def pano(self):
        return PanoramaGeometry(self.width, self.height)

    def box(self, obj, t):
        """Panorama box of ``obj`` at time t, left edge normalized into [0, width)."""
        lon0, lat0, lon1, lat1 = obj.lonlat_rect(t)
        x0 = lon_to_x(lon0, self.width)
        shift = math.floor(x0 / self.width) * self.width
        return (
            float(x0 - shift),
            float(lat_to_y(lat1, self.height)),
            float(lon_to_x(lon1, self.width) - shift),
            float(lat_to_y(lat0, self.height)),
        )

    def visible(self, t):
        return [o for o in self.objects if o.active(t)]

    def shifted(self, dlon):
        """Copy of the script with every longitude (and the centre line) moved by ``dlon``."""
        objs = []
        for o in self.objects:
            kfs = [Keyframe(k.frame, k.lon + dlon, k.lat, k.w, k.h) for k in o.keyframes]
            objs.append(ScriptedObject(o.id, o.category, kfs, o.score, o.feature))
        return SceneScript(self.width, self.height, self.frames, self.fps, objs, self.centre_lon + dlon)

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "frames": self.frames,
            "fps": self.fps,
            "centre_lon": self.centre_lon,
            "objects": [
                {
                    "id": o.id,
                    "category": o.category,
                    "score": o.score,
                    **({"feature": [float(v) for v in o.feature]} if o.feature is not None else {}),
                    "keyframes": [vars(k) for k in o.keyframes],
                }
                for o in self.objects
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, data):
        required = {"width", "height", "frames", "objects"}
        missing = required - set(data)
        if missing:
            raise ValueError(f"scene script missing keys: {sorted(missing)}")
        objs = []
        for i, o in enumerate(data["objects"]):
            try:
                objs.append(
                    ScriptedObject(
                        id=int(o["id"]),
                        category=o["category"],
                        keyframes=[Keyframe(**k) for k in o["keyframes"]],
                        score=float(o.get("score", 0.9)),
                        feature=o.get("feature"),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"objects[{i}]: {e}") from None
        return cls(
            width=int(data["width"]),
            height=int(data["height"]),
            frames=int(data["frames"]),
            fps=float(data.get("fps", 30.0)),
            objects=objs,
            centre_lon=float(data.get("centre_lon", 0.0)),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GroundTruthBundle:
    script: SceneScript
    frames: dict  # frame -> FrameAnnotations
    trajectories: dict  # object id -> [(frame, box)]
    overtakes: list  # confirmed OvertakeRecord, track_id = object id
    failed_overtakes: list = field(default_factory=list)

    def detections(self, frame, split_seam=True):
        """Perfect panorama-space detections for one frame."""
        out = []
        W = self.script.width
        for obj in self.frames[frame].objects:
            parts = split_at_seam(obj.box, W) if split_seam else [obj.box]
            for p in parts:
                out.append(
                    Detection(
                        box=p,
                        score=obj.score,
                        category=obj.category,
                        wraps_seam=len(parts) > 1,
                        feature=obj.feature,
                    )
                )
        return out


def _line_events(obj, centre_lon):
    """Analytic crossings of the box edges over the +-90 deg lines.

    Yields (time, kind, side, toward_centre) with kind in
    {'lead_in', 'lead_back', 'trail_in'}.
    """
    ks = obj.keyframes
    rel0 = float(normalize_lon(ks[0].lon - centre_lon))
    base = rel0 - ks[0].lon
    events = []
    for a, b in zip(ks, ks[1:]):
        t0, t1 = a.frame, b.frame
        ca, cb = a.lon + base, b.lon + base
        ha, hb = a.w / 2, b.w / 2
        vel = (cb - ca) / (t1 - t0)
        for k in (-1, 0, 1):
            for side, line in (("left", -90.0 + 360 * k), ("right", 90.0 + 360 * k)):
                # left: leading edge is x_max, trailing is x_min; right is mirrored
                lead_a, lead_b = (ca + ha, cb + hb) if side == "left" else (ca - ha, cb - hb)
                trail_a, trail_b = (ca - ha, cb - hb) if side == "left" else (ca + ha, cb + hb)
                sgn = 1.0 if side == "left" else -1.0
                # distance of the centre from the forward direction decreases
                mid = (ca + cb) / 2 - 360 * k
                toward = vel * (-1.0 if mid > 0 else 1.0) > 0
                for edge, (ea, eb) in (("lead", (lead_a, lead_b)), ("trail", (trail_a, trail_b))):
                    da, db = sgn * (ea - line), sgn * (eb - line)
                    if da == db:
                        continue
                    s = da / (da - db)
                    if not (0 < s <= 1):
                        continue
                    t = t0 + s * (t1 - t0)
                    entering = db > da
                    if edge == "lead":
                        events.append((t, "lead_in" if entering else "lead_back", side, toward))
                    elif entering:
                        events.append((t, "trail_in", side, toward))
    events.sort(key=lambda e: e[0])
    return events


def _event_frame(script, obj, t, side, kind):
    """First frame at or after the analytic crossing time where the crossing is visible."""
    W = script.width
    line = W / 4 if side == "left" else 3 * W / 4
    centre = lon_to_x(script.centre_lon, W)

    def past(f):
        x1, _, x2, _ = script.box(obj, f)
        if side == "left":
            e = x2 if kind != "trail_in" else x1
            d = (e - line - (centre - W / 2)) % W
            d = d - W if d >= W / 2 else d
            return d >= 0
        e = x1 if kind != "trail_in" else x2
        d = (line + (centre - W / 2) - e) % W
        d = d - W if d >= W / 2 else d
        return d >= 0

    f = max(int(math.floor(t)), obj.first)
    while f <= obj.last:
        state = past(f)
        want = kind != "lead_back"
        if state == want and (f > math.floor(t) or t == f):
            return f
        f += 1
    return None


def true_overtakes(script, obj):
    """Confirmed and failed overtakes of one object following the behaviour rules."""
    if obj.category not in MOTOR_VEHICLES or len(obj.keyframes) < 2:
        return [], []
    confirmed, failed = [], []
    active = None
    for t, kind, side, toward in _line_events(obj, script.centre_lon):
        f = _event_frame(script, obj, t, side, kind)
        if f is None:
            continue
        if active is None:
            if kind == "lead_in" and toward:
                active = OvertakeRecord(obj.id, side, "unconfirmed", f)
            continue
        if side != active.side:
            continue
        if kind == "trail_in":
            active.state, active.end_frame = "confirmed", max(f, active.start_frame)
            confirmed.append(active)
            active = None
        elif kind == "lead_back":
            active.state, active.end_frame = "failed", max(f, active.start_frame)
            failed.append(active)
            active = None
    return confirmed, failed


def realize(script):
    """Evaluate the script frame by frame into a GroundTruthBundle."""
    frames = {}
    traj = {}
    for f in range(script.frames):
        objs = []
        for o in script.visible(f):
            box = script.box(o, f)
            objs.append(AnnotatedObject(o.id, o.category, box, 1.0, o.score, o.feature))
            traj.setdefault(o.id, []).append((f, box))
        frames[f] = FrameAnnotations(f, objs)
    overtakes, failed = [], []
    for o in script.objects:
        c, fl = true_overtakes(script, o)
        overtakes += [r for r in c if r.end_frame < script.frames]
        failed += fl
    overtakes.sort(key=lambda r: (r.end_frame, r.track_id))
    return GroundTruthBundle(script, frames, traj, overtakes, failed)


def render(script, frame):
    """Rasterize frame ``frame``: filled category-coloured rectangles, wrapped at the seam."""
    W, H = script.width, script.height
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for o in script.visible(frame):
        x1, y1, x2, y2 = script.box(o, frame)
        r0 = max(int(math.ceil(y1 - 0.5)), 0)
        r1 = min(int(math.ceil(y2 - 0.5)), H)
        c0 = int(math.ceil(x1 - 0.5))
        c1 = int(math.ceil(x2 - 0.5))
        if r1 <= r0 or c1 <= c0:
            continue
        cols = np.arange(c0, c1) % W
        img[r0:r1, cols] = CATEGORY_COLOURS[o.category]
    return img


def random_features(rng, n, dim=128):
    f = rng.normal(size=(n, dim))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def random_scene(rng, width=2048, height=1024, frames=200, n_objects=10, lat_range=(-12.0, 2.0),
                 size_range=(3.0, 12.0), speed=0.5, categories=None, features=True, fps=30.0):
    """Objects on straight constant-speed paths spanning the whole clip."""
    from .categories import CATEGORIES

    cats = list(categories or CATEGORIES)
    feats = random_features(rng, n_objects) if features else [None] * n_objects
    objs = []
    for i in range(n_objects):
        w = float(rng.uniform(*size_range))
        h = float(rng.uniform(size_range[0], min(size_range[1], lat_range[1] - lat_range[0])))
        lat = float(rng.uniform(lat_range[0] + h / 2, lat_range[1] - h / 2)) if lat_range[1] - lat_range[0] > h else float(np.mean(lat_range))
        lon0 = float(rng.uniform(-180, 180))
        v = float(rng.uniform(-speed, speed))
        span = v * (frames - 1)
        # split long paths so consecutive keyframes stay under 180 deg apart
        n_seg = max(1, int(abs(span) // 90) + 1)
        kfs = [
            Keyframe(round(k * (frames - 1) / n_seg), lon0 + span * k / n_seg, lat, w, h)
            for k in range(n_seg + 1)
        ] if frames > 1 else [Keyframe(0, lon0, lat, w, h)]
        objs.append(ScriptedObject(i + 1, str(rng.choice(cats)), kfs, 0.9, feats[i]))
    return SceneScript(width, height, frames, fps, objs)
