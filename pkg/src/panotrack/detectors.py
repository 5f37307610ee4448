"""Detector ports backed by stored results or an external process.

A ground-truth oracle for synthetic scenes lives here too."""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .boxes import Detection
from .categories import label_token, parse_label
from .fusion import DetectorError, make_views
from .projection import geographic_to_perspective, subview_to_geographic

log = logging.getLogger(__name__)


class DetectorPort:
    """Callable boundary between the pipeline and any object detector.

    ``detect(image, view_index, frame_index)`` returns detections in sub-view
    pixel coordinates.  ``needs_image`` tells the pipeline whether to render
    sub-views at all; ``concurrent`` whether views may be detected in parallel.
    """

    needs_image = True
    concurrent = False

    def detect(self, image, view_index, frame_index):
        raise NotImplementedError


class DetectionStore(DetectorPort):
    """Pre-computed detections keyed by (frame, view).

    File format, one detection per line::

        frame view category score x_min y_min x_max y_max [f1 .. fd]

    Category labels containing spaces are written with underscores.
    """

    needs_image = False
    concurrent = True

    def __init__(self, records=None):
        self.records = {}
        self.feature_dim = None
        for key, dets in (records or {}).items():
            for d in dets:
                self.add(key[0], key[1], d)

    def add(self, frame, view, det):
        if det.feature is not None:
            if self.feature_dim is None:
                self.feature_dim = det.feature.size
            elif det.feature.size != self.feature_dim:
                raise ValueError(f"feature dimension {det.feature.size} != {self.feature_dim}")
        self.records.setdefault((int(frame), int(view)), []).append(det)

    def detect(self, image, view_index, frame_index):
        return list(self.records.get((frame_index, view_index), []))

    def __len__(self):
        return sum(len(v) for v in self.records.values())

    def frames(self):
        return sorted({f for f, _ in self.records})

    def lines(self):
        for (frame, view) in sorted(self.records):
            for d in self.records[(frame, view)]:
                cols = [str(frame), str(view), label_token(d.category), f"{d.score:.6f}"]
                cols += [repr(float(v)) for v in d.box]
                if d.feature is not None:
                    cols += [repr(float(v)) for v in d.feature]
                yield " ".join(cols)

    def save(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def load_detection_store(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"detection file not found: {path}")
    store = DetectionStore()
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 8:
            raise ValueError(f"{path}:{n}: expected at least 8 columns, got {len(parts)}")
        try:
            frame, view = int(parts[0]), int(parts[1])
            cat = parse_label(parts[2])
            det = Detection(
                box=tuple(float(v) for v in parts[4:8]),
                score=float(parts[3]),
                category=cat,
                frame_space=view,
                feature=[float(v) for v in parts[8:]] if len(parts) > 8 else None,
            )
            store.add(frame, view, det)
        except ValueError as e:
            raise ValueError(f"{path}:{n}: {e}") from None
    return store


def parse_detector_output(text, source="detector"):
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DetectorError(f"{source} output line {n}: expected 6 columns, got {line!r}")
        try:
            out.append(
                Detection(
                    box=tuple(float(v) for v in parts[2:6]),
                    score=float(parts[1]),
                    category=parse_label(parts[0]),
                )
            )
        except ValueError as e:
            raise DetectorError(f"{source} output line {n}: {e}") from None
    return out


class ExternalDetector(DetectorPort):
    """Runs a command per sub-view; the image path is appended as last argument.

    The command prints ``category score x_min y_min x_max y_max`` per line.
    """

    concurrent = True

    def __init__(self, command, timeout=60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty detector command")
        self.timeout = timeout

    def detect(self, image, view_index, frame_index):
        from PIL import Image

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / f"f{frame_index:06d}_v{view_index}.png"
            Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
            try:
                res = subprocess.run(
                    self.command + [str(path)],
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                )
            except subprocess.TimeoutExpired:
                raise DetectorError(f"detector timed out after {self.timeout}s", view_index) from None
            except OSError as e:
                raise DetectorError(f"cannot run detector: {e}", view_index) from None
        if res.returncode != 0:
            raise DetectorError(
                f"detector exited with status {res.returncode}: {res.stderr.strip()}", view_index
            )
        return parse_detector_output(res.stdout, "external detector")


def external_detector(command, timeout=60.0):
    return ExternalDetector(command, timeout)


class PerfectDetector(DetectorPort):
    """Ground-truth boxes of a scene script projected into each sub-view.

    Each object's lon/lat rectangle is projected into the view and clipped to
    its frustum; the detection is the MBR of the visible part.  Optional
    Gaussian jitter (pixels) and random drops emulate a noisy detector.
    """

    needs_image = False
    concurrent = False  # shares one RNG

    def __init__(self, script, cfg, jitter=0.0, drop=0.0, seed=0, view_scores=None, step_deg=0.02):
        self.script = script
        self.views = make_views(cfg)
        self.jitter = float(jitter)
        self.drop = float(drop)
        self.rng = np.random.default_rng(seed)
        self.view_scores = view_scores
        self.step_deg = step_deg
        self._edges = {}

    def _frustum_edge(self, view):
        """lon/lat of points along the four sub-view borders."""
        if view not in self._edges:
            w, h = view.out_width, view.out_height
            xs = np.linspace(0, w, 2 * w + 1)
            ys = np.linspace(0, h, 2 * h + 1)
            pts = np.concatenate(
                [
                    np.stack([xs, np.zeros_like(xs)], 1),
                    np.stack([xs, np.full_like(xs, h)], 1),
                    np.stack([np.zeros_like(ys), ys], 1),
                    np.stack([np.full_like(ys, w), ys], 1),
                ]
            )
            lon, lat = subview_to_geographic(pts[:, 0], pts[:, 1], view)
            self._edges[view] = (pts, lon, lat)
        return self._edges[view]

    def project(self, rect, view):
        """Sub-view MBR of a lon/lat rectangle clipped to the view, or None."""
        lon0, lat0, lon1, lat1 = rect
        n_lon = max(int(np.ceil((lon1 - lon0) / self.step_deg)), 2) + 1
        n_lat = max(int(np.ceil((lat1 - lat0) / self.step_deg)), 2) + 1
        lons = np.linspace(lon0, lon1, n_lon)
        lats = np.linspace(lat0, lat1, n_lat)
        blon = np.concatenate([lons, lons, np.full(n_lat, lon0), np.full(n_lat, lon1)])
        blat = np.concatenate([np.full(n_lon, lat0), np.full(n_lon, lat1), lats, lats])
        p, ok = geographic_to_perspective(blon, np.clip(blat, -90, 90), view)
        w, h = view.out_width, view.out_height
        inside = ok & (p[:, 0] >= 0) & (p[:, 0] <= w) & (p[:, 1] >= 0) & (p[:, 1] <= h)
        pts = [p[inside]]
        epts, elon, elat = self._frustum_edge(view)
        rel = (elon - lon0) % 360.0
        in_rect = (rel <= lon1 - lon0) & (elat >= lat0) & (elat <= lat1)
        pts.append(epts[in_rect])
        pts = np.concatenate(pts)
        if len(pts) == 0:
            return None
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            return None
        return (float(x1), float(y1), float(x2), float(y2))

    def detect(self, image, view_index, frame_index):
        view = self.views[view_index]
        out = []
        for obj in self.script.visible(frame_index):
            box = self.project(obj.lonlat_rect(frame_index), view)
            if box is None:
                continue
            if self.drop and self.rng.random() < self.drop:
                continue
            if self.jitter:
                b = np.array(box) + self.rng.normal(0.0, self.jitter, 4)
                b[[0, 2]] = np.clip(np.sort(b[[0, 2]]), 0, view.out_width)
                b[[1, 3]] = np.clip(np.sort(b[[1, 3]]), 0, view.out_height)
                box = tuple(b)
            score = obj.score if self.view_scores is None else self.view_scores[view_index]
            out.append(
                Detection(box=box, score=score, category=obj.category, frame_space=view_index, feature=obj.feature)
            )
        return out


def perfect_detector(script, cfg, **kw):
    return PerfectDetector(script, cfg, **kw)
