"""Motion direction voting and the per-track overtaking state machine."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .annotations import OvertakeRecord
from .categories import MOTOR_VEHICLES
from .projection import lon_to_x

FORWARDS = "forwards"
BACKWARDS = "backwards"
UNDETERMINED = "undetermined"


@dataclass
class BehaviourConfig:
    window: int = 5
    vote_threshold: int = 3
    centre_lon: float = 0.0  # forward direction; overtake lines sit at +-90 deg from it
    eligible: frozenset = MOTOR_VEHICLES
    min_duration: float = 0.0  # seconds; 0 disables the filter
    fps: float = 30.0

    def __post_init__(self):
        self.eligible = frozenset(self.eligible)
        if not 1 <= self.vote_threshold <= self.window:
            raise ValueError("vote_threshold must lie in [1, window]")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def left_line_lon(self):
        return self.centre_lon - 90.0

    @property
    def right_line_lon(self):
        return self.centre_lon + 90.0


def _wrap(d, width):
    """Signed offset on the circle, in [-width/2, width/2)."""
    return (d + width / 2) % width - width / 2


def classify_direction(positions, pano_width, cfg):
    """Majority vote over the last ``window`` frame-to-frame displacements.

    A displacement counts as forwards when the wrapped distance between the
    box centre and the forward direction shrinks.
    """
    pos = list(positions)[-(cfg.window + 1):]
    if len(pos) < 2:
        return UNDETERMINED
    centre = lon_to_x(cfg.centre_lon, pano_width)
    dist = [abs(_wrap(x - centre, pano_width)) for x in pos]
    toward = sum(b < a for a, b in zip(dist, dist[1:]))
    away = sum(b > a for a, b in zip(dist, dist[1:]))
    fwd, bwd = toward >= cfg.vote_threshold, away >= cfg.vote_threshold
    if fwd and not bwd:
        return FORWARDS
    if bwd and not fwd:
        return BACKWARDS
    return UNDETERMINED


@dataclass
class TrackBehaviour:
    """Running state for one track id."""

    track_id: int
    category: str
    positions: deque = field(default_factory=lambda: deque(maxlen=16))
    prev_box: tuple = None
    active: OvertakeRecord = None
    records: list = field(default_factory=list)


def overtake_step(state, motion, box, frame, cfg, pano_width):
    """Advance one track's overtake state machine by one observation.

    Left-side vehicles start an overtake when, moving forwards, the right edge
    of the box crosses the left line; the overtake is confirmed once the left
    edge has crossed as well and fails if the right edge falls back behind
    the line.  Right-side vehicles are mirrored about the right line.
    Returns the record that finished on this frame, if any.
    """
    W = pano_width
    if state.category not in cfg.eligible:
        state.prev_box = box
        return None
    L = lon_to_x(cfg.left_line_lon, W)
    R = lon_to_x(cfg.right_line_lon, W)

    def off(x, line):
        return _wrap(x - line, W)

    def near(*offs):
        return all(abs(o) < W / 4 for o in offs)

    finished = None
    prev = state.prev_box
    if state.active is None and prev is not None and motion == FORWARDS:
        a, b = off(prev[2], L), off(box[2], L)
        if near(a, b) and a < 0 <= b:
            state.active = OvertakeRecord(state.track_id, "left", "unconfirmed", frame)
        else:
            a, b = off(prev[0], R), off(box[0], R)
            if near(a, b) and a > 0 >= b:
                state.active = OvertakeRecord(state.track_id, "right", "unconfirmed", frame)

    rec = state.active
    if rec is not None:
        if rec.side == "left":
            trail, lead = off(box[0], L), off(box[2], L)
            done = near(trail) and trail >= 0
            fail = near(lead) and lead < 0
        else:
            trail, lead = off(box[2], R), off(box[0], R)
            done = near(trail) and trail <= 0
            fail = near(lead) and lead > 0
        if done:
            rec.state, rec.end_frame = "confirmed", frame
        elif fail:
            rec.state, rec.end_frame = "failed", frame
        if rec.state != "unconfirmed":
            state.records.append(rec)
            state.active = None
            finished = rec
    state.prev_box = box
    return finished


def detect_overtakes(stream, cfg, pano_width, annotate=False):
    """Run direction voting and the overtake FSM over a tracker output stream.

    ``stream`` yields FrameAnnotations (or ``(frame, objects)`` pairs) in frame
    order, one unwrapped box per track id.  Returns the confirmed records
    sorted by end frame; with ``annotate`` also a dict frame -> set of track
    ids involved in a confirmed overtake on that frame.
    """
    states = {}
    confirmed = []
    for item in stream:
        frame, objects = (item.frame, item.objects) if hasattr(item, "frame") else item
        for obj in objects:
            st = states.get(obj.id)
            if st is None:
                st = states[obj.id] = TrackBehaviour(obj.id, obj.category)
            cx = (obj.box[0] + obj.box[2]) / 2
            st.positions.append(cx)
            motion = classify_direction(st.positions, pano_width, cfg)
            rec = overtake_step(st, motion, obj.box, frame, cfg, pano_width)
            if rec is not None and rec.state == "confirmed":
                if (rec.end_frame - rec.start_frame) / cfg.fps >= cfg.min_duration:
                    confirmed.append(rec)
    confirmed.sort(key=lambda r: (r.end_frame, r.track_id))
    if not annotate:
        return confirmed
    marks = {}
    for r in confirmed:
        for f in range(r.start_frame, r.end_frame + 1):
            marks.setdefault(f, set()).add(r.track_id)
    return confirmed, marks


@dataclass
class OvertakeScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_score: float
    precision_defined: bool = True
    recall_defined: bool = True


def score_overtakes(predicted, truth, frame_tolerance=0, match_side=True):
    """Greedy one-to-one matching of predicted and true overtakes by interval overlap."""
    cands = []
    for i, p in enumerate(predicted):
        for j, t in enumerate(truth):
            if match_side and p.side != t.side:
                continue
            if p.start_frame - frame_tolerance > t.end_frame or t.start_frame - frame_tolerance > p.end_frame:
                continue
            cost = abs(p.start_frame - t.start_frame) + abs(p.end_frame - t.end_frame)
            cands.append((cost, i, j))
    cands.sort()
    used_p, used_t = set(), set()
    for _, i, j in cands:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
    return overtake_counts(len(used_p), len(predicted) - len(used_p), len(truth) - len(used_t))


def overtake_counts(tp, fp, fn):
    """Precision, recall and F-score from raw counts; empty denominators report 1 and a flag."""
    p_def, r_def = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_def else 1.0
    recall = tp / (tp + fn) if r_def else 1.0
    denom = 2 * tp + fp + fn
    f = 2 * tp / denom if denom else 1.0
    return OvertakeScore(tp, fp, fn, precision, recall, f, p_def, r_def)


def format_overtakes(records):
    return [f"{r.track_id} {r.side} {r.start_frame} {r.end_frame}" for r in records]


def parse_overtakes(lines):
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {n}: expected 'track_id side start end', got {line!r}")
        try:
            out.append(OvertakeRecord(int(parts[0]), parts[1], "confirmed", int(parts[2]), int(parts[3])))
        except ValueError as e:
            raise ValueError(f"line {n}: {e}") from None
    return out
