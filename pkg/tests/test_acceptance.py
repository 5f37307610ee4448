"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""

import math
import time
from collections import Counter, defaultdict

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from panotrack.assignment import hungarian_solve
from panotrack.annotations import AnnotatedObject, FrameAnnotations
from panotrack.behaviour import BehaviourConfig, detect_overtakes, overtake_counts, score_overtakes
from panotrack.boxes import area, split_at_seam
from panotrack.detectors import PerfectDetector
from panotrack.fusion import FusionConfig, filter_edge_boxes, fuse_frame, make_views, merge_boxes, reproject_box
from panotrack.metrics import clear_mot_events, compute_ap, compute_mot_metrics
from panotrack.oracles import (
    brute_force_assignment,
    coco_ap_oracle,
    exhaustive_idf1,
    f_score,
    seam_interval_iou,
)
from panotrack.projection import (
    PanoramaGeometry,
    build_projection_maps,
    equirect_point_to_perspective,
    geographic_to_sphere,
    lat_to_y,
    lon_to_x,
    perspective_point_to_equirect,
    plane_to_sphere,
    rotation_matrix,
    rotate_to_view,
)
from panotrack.synthetic import Keyframe, SceneScript, ScriptedObject, random_features, random_scene, realize
from panotrack.tracker import TrackerConfig, merge_seam_detections, track_sequence

PANO = PanoramaGeometry(5376, 2688)
FUSION = FusionConfig()


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0

    def check(self):
        assert self.elapsed < self.limit, f"took {self.elapsed:.1f} s, limit {self.limit} s"


def wrap_dx(a, b, width):
    return (a - b + width / 2) % width - width / 2


def truth_frames(script):
    frames = realize(script).frames
    return [frames[f] for f in range(script.frames)]


def fuse_pipeline(script, frames=None, cfg=FUSION):
    det = PerfectDetector(script, cfg)
    frames = range(script.frames) if frames is None else frames
    return {f: fuse_frame(None, det, cfg, script.pano, f) for f in frames}


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_projection_round_trip():
    rng = np.random.default_rng(1)
    n = 10_000
    worst = 0.0
    with Timer(10) as t:
        for view in make_views(FUSION, PANO):
            # sample equirect pixels until n fall inside this view with |lat| < 60
            pts = []
            while sum(len(p) for p in pts) < n:
                x = lon_to_x(view.theta_c + rng.uniform(-75, 75, 4 * n), PANO.width) % PANO.width
                lat = rng.uniform(-60, 60, 4 * n)
                q = np.stack([np.floor(x) + 0.5, np.floor(lat_to_y(lat, PANO.height)) + 0.5], 1)
                p, ok = equirect_point_to_perspective(q, view, PANO)
                inside = ok & np.all((p >= 0) & (p <= 1280), axis=1)
                pts.append(q[inside])
            q = np.concatenate(pts)[:n]
            assert np.all(np.abs(90 - q[:, 1] * 180 / PANO.height) < 60)
            p, ok = equirect_point_to_perspective(q, view, PANO)
            assert ok.all()
            # point functions
            back = perspective_point_to_equirect(p, view, PANO)
            err = np.hypot(wrap_dx(back[:, 0], q[:, 0], PANO.width), back[:, 1] - q[:, 1])
            # remap tables: bilinear lookup of the source coordinate at p
            maps = build_projection_maps(view, PANO)
            cx = lon_to_x(view.theta_c, PANO.width)
            lon_rel = wrap_dx(maps.lon_map, cx, PANO.width)
            coords = np.stack([p[:, 1] - 0.5, p[:, 0] - 0.5])
            mx = map_coordinates(lon_rel, coords, order=1, mode="nearest") + cx
            my = map_coordinates(maps.lat_map, coords, order=1, mode="nearest")
            err_maps = np.hypot(wrap_dx(mx, q[:, 0], PANO.width), my - q[:, 1])
            worst = max(worst, err.max(), err_maps.max())
    assert worst <= 1.0, f"worst round-trip error {worst:.3f} px"
    t.check()


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_rotation_normalization():
    rng = np.random.default_rng(2)
    from panotrack.projection import ViewSpec

    with Timer(1) as t:
        for _ in range(1000):
            fov = rng.uniform(10, 170)
            view = ViewSpec(fov, rng.uniform(-180, 180), rng.uniform(-90, 90), 64, 64)
            R = rotation_matrix(view)
            assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-9
            assert abs(np.linalg.det(R) - 1) <= 1e-9
            T = math.tan(math.radians(fov) / 2)
            u, v = rng.uniform(0, 2 * T, 2)
            s = plane_to_sphere(u, v, T)
            assert abs(np.linalg.norm(s) - 1) <= 1e-9
            assert abs(np.linalg.norm(rotate_to_view(s, view)) - 1) <= 1e-9
            g = geographic_to_sphere(rng.uniform(-180, 180), rng.uniform(-90, 90))
            assert abs(np.linalg.norm(g) - 1) <= 1e-9
    t.check()


# -- 3 ------------------------------------------------------------------------

def _fuse_with_groups(det, frame=0):
    views = make_views(FUSION, PANO)
    reproj = []
    for i in range(len(views)):
        for d in filter_edge_boxes(det.detect(None, i, frame), FUSION):
            reproj += reproject_box(d, views[i], PANO, split_seam=False)
    return merge_boxes(reproj, FUSION, PANO, return_groups=True)


def _assign_to_truth(script, fused):
    """Fused boxes (seam parts rejoined) grouped by the truth object they overlap most."""
    W = script.width
    joined = merge_seam_detections(fused, W)
    truth = {o.id: (o.category, script.box(o, 0)) for o in script.objects}
    per_obj = defaultdict(list)
    for d in joined:
        best, best_v = None, 0.0
        for oid, (cat, box) in truth.items():
            v = seam_interval_iou(box, d.box, W)
            if cat == d.category and v > best_v:
                best, best_v = oid, v
        if best is not None:
            per_obj[best].append(best_v)
    return truth, per_obj


def test_criterion_03_fusion_oracle():
    rng = np.random.default_rng(3)
    n_small = n_small_ok = n_small_one = 0
    n_long = n_long_one = 0
    score_errs = []
    worst_iou = []
    with Timer(60) as t:
        for k in range(50):
            objs = []
            # small objects spread in longitude so they do not overlap
            slots = rng.permutation(8)
            for i in range(6):
                lon = -180 + 45 * slots[i] + rng.uniform(-10, 10)
                w, h = rng.uniform(3, 12), rng.uniform(3, 10)
                lat = rng.uniform(-50 + h / 2, 70 - h / 2)
                objs.append(ScriptedObject(i + 1, str(rng.choice(["car", "person", "truck"])), [Keyframe(0, lon, lat, w, h)]))
            # one long object across a view boundary, at a free slot
            b = 45 + 90 * int(rng.integers(0, 4)) + rng.uniform(-5, 5)
            objs.append(ScriptedObject(100, "bus", [Keyframe(0, b, rng.uniform(-25, 10), rng.uniform(30, 60), rng.uniform(6, 12))]))
            keep = [o for o in objs[:-1] if abs(wrap_dx(o.keyframes[0].lon, b, 360)) > 40] + [objs[-1]]
            script = SceneScript(PANO.width, PANO.height, 1, objects=keep)
            det = PerfectDetector(script, FUSION, view_scores=list(rng.uniform(0.3, 1.0, 4)))
            fused, groups = _fuse_with_groups(det)
            for d, g in zip(fused, groups):
                if len(g) > 1:
                    a = np.array([area(m.box) for m in g])
                    s = np.array([m.score for m in g])
                    score_errs.append(abs(d.score - float(a @ s / a.sum())))
            truth, per_obj = _assign_to_truth(script, fused)
            for oid, (cat, box) in truth.items():
                hits = per_obj.get(oid, [])
                if oid == 100:
                    n_long += 1
                    n_long_one += len(hits) == 1
                    continue
                n_small += 1
                n_small_one += len(hits) == 1
                ok = len(hits) == 1 and hits[0] >= 0.9
                n_small_ok += ok
                if not ok:
                    lon, lat = script.objects[[o.id for o in keep].index(oid)].keyframes[0].lon, None
                    worst_iou.append((round(max(hits, default=0), 2), round(float(lon), 1)))
    print(f"\nfusion: {n_small_ok}/{n_small} small objects with one box of IoU >= 0.9; "
          f"{n_small_one}/{n_small} with exactly one box; long objects merged {n_long_one}/{n_long}; "
          f"{len(score_errs)} merged groups, max score error {max(score_errs, default=0):.2e}")
    assert score_errs and max(score_errs) <= 1e-9
    assert n_long_one / n_long >= 0.95
    assert n_small_one == n_small, "objects without exactly one fused box"
    assert n_small_ok == n_small, f"IoU below 0.9 for (iou, lon): {sorted(worst_iou)[:10]}"
    t.check()


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_assignment_optimality():
    rng = np.random.default_rng(4)
    with Timer(30) as t:
        for _ in range(1000):
            m, n = rng.integers(1, 8, 2)
            c = rng.integers(0, 100, size=(m, n)).astype(float)
            a = hungarian_solve(c)
            total = sum(c[r, k] for r, k in a.matches)
            assert len(a.matches) == min(m, n)
            assert total == brute_force_assignment(c.tolist())[0]
    t.check()


# -- 5 ------------------------------------------------------------------------

def identity_errors(pred, truth):
    """ID switches plus predicted ids that cover more than one truth identity."""
    ev = clear_mot_events(pred, truth, class_aware=False)
    owners = defaultdict(set)
    for _, _, _, matches in ev:
        for g, h, _ in matches:
            owners[h].add(g)
    merges = sum(len(g) - 1 for g in owners.values())
    return compute_mot_metrics(pred, truth, class_aware=False).ids + merges


def test_criterion_05_category_support():
    rng = np.random.default_rng(5)
    f = random_features(rng, 2)
    # the rider's appearance is close to the pedestrian's
    rider = f[0] + 0.05 * f[1]
    rider /= np.linalg.norm(rider)
    script = SceneScript(2048, 1024, 60, objects=[
        ScriptedObject(1, "person", [Keyframe(0, -40, -5, 2, 6), Keyframe(29, -35, -5, 2, 6)], feature=f[0]),
        ScriptedObject(2, "bicycle", [Keyframe(30, -34.8, -5, 3, 5), Keyframe(59, -30, -5, 3, 5)], feature=rider),
    ])
    with Timer(10) as t:
        b = realize(script)
        truth = [b.frames[i] for i in range(script.frames)]
        dets = {i: b.detections(i) for i in range(script.frames)}
        res = {}
        for support in (True, False):
            out, tr = track_sequence(dets, TrackerConfig(pano_width=script.width, category_support=support))
            cross = sum(1 for e in tr.events if e[3] != e[4])
            res[support] = (cross, identity_errors(out, truth))
    print(f"\ncategory support: cross-category matches {res[True][0]} vs {res[False][0]}; "
          f"identity errors {res[True][1]} vs {res[False][1]}")
    assert res[True][0] == 0
    assert res[False][0] >= 1
    assert res[True][1] < res[False][1]
    t.check()


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_boundary_support():
    script = SceneScript(2048, 1024, 60, objects=[
        ScriptedObject(1, "car", [Keyframe(0, 160, -8, 12, 6), Keyframe(59, 200, -8, 12, 6)]),
        ScriptedObject(2, "truck", [Keyframe(0, -165, -6, 16, 8), Keyframe(59, -200, -6, 16, 8)]),
    ])
    with Timer(10) as t:
        truth = truth_frames(script)
        fused = fuse_pipeline(script)
        assert any(d.wraps_seam for ds in fused.values() for d in ds)
        res = {}
        for support in (True, False):
            out, _ = track_sequence(fused, TrackerConfig(pano_width=script.width, boundary_support=support))
            res[support] = (compute_mot_metrics(out, truth, pano_width=script.width), out)
    on, out = res[True]
    off, _ = res[False]
    print(f"\nboundary support: IDs {on.ids} with, {off.ids} without")
    assert on.ids == 0 and off.ids >= 1
    # split fragments come out as one object per truth object
    assert all(len(fa.objects) == len(truth[fa.frame].objects) for fa in out)
    assert len({o.id for fa in out for o in fa.objects}) == 2
    t.check()


# -- 7 ------------------------------------------------------------------------

def tracks_of(frames, ids=None):
    out = {}
    for fa in frames:
        for o in fa.objects:
            if ids is None or o.id in ids:
                out.setdefault(o.id, {})[fa.frame] = (o.category, o.box)
    return out


def frames_of(tracks, frames):
    return [
        FrameAnnotations(f, [AnnotatedObject(i, c_b[f][0], c_b[f][1]) for i, c_b in sorted(tracks.items()) if f in c_b])
        for f in frames
    ]


def test_criterion_07_end_to_end_perfect_detector():
    script = random_scene(np.random.default_rng(7), frames=200, n_objects=10)
    with Timer(120) as t:
        fused = fuse_pipeline(script)
        out, _ = track_sequence(fused, TrackerConfig(pano_width=script.width))
        truth = truth_frames(script)
        rep = compute_mot_metrics(out, truth, pano_width=script.width)
    print(f"\nend to end: MOTA {rep.mota:.4f}, IDF1 {rep.idf1:.4f}, MOTP {rep.motp:.4f}")
    assert rep.mota == 1.0 and rep.idf1 == 1.0
    t.check()

    # sub-fixtures of at most five tracks against the exhaustive oracle
    gt_all, hyp_all = tracks_of(truth), tracks_of(out)
    pairs = Counter((g, h) for _, _, _, m in clear_mot_events(out, truth) for g, h, _ in m)
    owner = {}
    for (g, h), _ in pairs.most_common():
        owner.setdefault(g, h)
    rng = np.random.default_rng(70)
    frames = list(range(script.frames))
    for trial in range(6):
        gids = sorted(rng.choice(sorted(gt_all), size=int(rng.integers(2, 6)), replace=False))
        gt = {g: gt_all[g] for g in gids}
        hyp = {owner[g]: dict(hyp_all[owner[g]]) for g in gids}
        if trial % 2:
            # swap two identities halfway and drop a stretch of one track
            a, b = list(hyp)[:2]
            for f in range(100, 200):
                ha, hb = hyp[a].pop(f, None), hyp[b].pop(f, None)
                if ha:
                    hyp[b][f] = ha
                if hb:
                    hyp[a][f] = hb
            for f in range(20, 60):
                hyp[a].pop(f, None)
        r = compute_mot_metrics(frames_of(hyp, frames), frames_of(gt, frames))
        assert r.idf1 == pytest.approx(exhaustive_idf1(gt, hyp), abs=1e-12)


# -- 8 ------------------------------------------------------------------------

def crossing_frame(l0, v, half_w, line, lead, side):
    """First integer frame at or after a box edge reaches the line, for lon(t) = l0 + v t."""
    sgn = 1 if side == "left" else -1
    edge = half_w if lead else -half_w
    # left side: x_max leads, x_min trails; mirrored on the right
    t = (line - l0 - sgn * edge) / v
    return math.ceil(t - 1e-9)


def overtake_suite(ghosts=0):
    objs, truth = [], []
    T = 240
    rng = np.random.default_rng(8)
    oid = 1
    for k in range(20):
        side = "left" if k % 2 == 0 else "right"
        # every crossing lasts well over 0.5 s at 30 fps
        w = float(rng.uniform(8, 12))
        speed = float(rng.uniform(0.3, 0.45))
        l0 = -150.0 if side == "left" else 150.0
        v = speed if side == "left" else -speed
        lat = float(rng.uniform(-12, -4))
        objs.append(ScriptedObject(oid, str(rng.choice(["car", "bus", "truck", "motorbike"])),
                                   [Keyframe(0, l0, lat, w, 5), Keyframe(T, l0 + v * T, lat, w, 5)]))
        line = -90.0 if side == "left" else 90.0
        truth.append((oid, side, crossing_frame(l0, v, w / 2, line, True, side),
                      crossing_frame(l0, v, w / 2, line, False, side)))
        oid += 1
    for k in range(5):
        # leading edge crosses, then the vehicle falls back
        s = 1 if k % 2 == 0 else -1
        objs.append(ScriptedObject(oid, "car", [Keyframe(0, -s * 140, -8, 10, 5), Keyframe(60, -s * 88, -8, 10, 5),
                                                Keyframe(120, -s * 140, -8, 10, 5)]))
        oid += 1
    for k in range(5):
        # full crossings by categories that are not motor vehicles
        s = 1 if k % 2 == 0 else -1
        objs.append(ScriptedObject(oid, ["person", "bicycle"][k % 2],
                                   [Keyframe(0, -s * 150, -6, 4, 8), Keyframe(T, -s * 30, -6, 4, 8)]))
        oid += 1
    for k in range(ghosts):
        # a slow approach, then a one-frame jump across the left line
        s = 1 if k % 2 == 0 else -1
        f0 = 10 + 20 * k
        objs.append(ScriptedObject(oid, "car", [Keyframe(f0, -s * 120, -10, 8, 5), Keyframe(f0 + 10, -s * 105, -10, 8, 5),
                                                Keyframe(f0 + 11, -s * 75, -10, 8, 5), Keyframe(f0 + 20, -s * 70, -10, 8, 5)]))
        oid += 1
    return SceneScript(2048, 1024, T + 1, objects=objs), truth


def test_criterion_08_overtake_fsm():
    with Timer(30) as t:
        script, truth = overtake_suite()
        b = realize(script)
        stream = [b.frames[f] for f in range(script.frames)]
        got = detect_overtakes(stream, BehaviourConfig(), script.width)
        assert len(got) == 20
        by_id = {r.track_id: r for r in got}
        for oid, side, start, end in truth:
            r = by_id[oid]
            assert r.side == side
            assert abs(r.start_frame - start) <= 1 and abs(r.end_frame - end) <= 1
        truth_recs = [r for r in b.overtakes]
        s = score_overtakes(got, truth_recs, frame_tolerance=1)
        assert s.precision == 1.0 and s.recall == 1.0

        gscript, _ = overtake_suite(ghosts=6)
        gb = realize(gscript)
        gstream = [gb.frames[f] for f in range(gscript.frames)]
        ids = {oid for oid, *_ in truth}
        plain = detect_overtakes(gstream, BehaviourConfig(), gscript.width)
        fp_plain = sum(r.track_id not in ids for r in plain)
        filtered = detect_overtakes(gstream, BehaviourConfig(min_duration=0.5, fps=gscript.fps), gscript.width)
        fp_filtered = sum(r.track_id not in ids for r in filtered)
    print(f"\novertakes: {len(got)} confirmed; ghost false positives {fp_plain} -> {fp_filtered} with 0.5 s minimum")
    assert fp_plain >= 1
    assert fp_filtered == 0
    assert {r.track_id for r in filtered} == ids
    t.check()


# -- 9 ------------------------------------------------------------------------

def test_criterion_09_metric_parity():
    from panotrack.boxes import Detection

    with Timer(5) as t:
        s = overtake_counts(44, 6, 6)
        assert s.f_score == pytest.approx(0.88, abs=1e-12)
        assert s.f_score == pytest.approx(f_score(44, 6, 6), abs=1e-12)

        gts = [(i, "car", (50 * i, 0, 50 * i + 30, 30)) for i in range(10)]
        truth = [FrameAnnotations(0, [AnnotatedObject(*g) for g in gts])]
        pred = [FrameAnnotations(0, [AnnotatedObject(*g) for g in gts[:9]])]
        assert compute_mot_metrics(pred, truth).mota == pytest.approx(0.9, abs=1e-12)

        rng = np.random.default_rng(9)
        for _ in range(30):
            preds, gtd, images = {}, {}, []
            for img in range(4):
                g = []
                for _ in range(rng.integers(1, 5)):
                    x, y = rng.uniform(0, 300, 2)
                    g.append((x, y, x + rng.uniform(5, 60), y + rng.uniform(5, 60)))
                p = []
                for box in g:
                    if rng.random() < 0.85:
                        bx = np.array(box) + rng.normal(0, 4, 4)
                        bx[2:] = np.maximum(bx[2:], bx[:2] + 1)
                        p.append((tuple(bx), float(rng.random())))
                for _ in range(rng.integers(0, 3)):
                    x, y = rng.uniform(0, 300, 2)
                    p.append(((x, y, x + 20, y + 20), float(rng.random())))
                gtd[img] = [Detection(bx, 1.0, "car") for bx in g]
                preds[img] = [Detection(bx, sc, "car") for bx, sc in p]
                images.append((p, g))
            assert abs(compute_ap(preds, gtd).ap - coco_ap_oracle(images)) <= 1e-9
    t.check()


# -- 10 -----------------------------------------------------------------------

def id_structure(out, truth, width):
    """Truth ids covered by every predicted id, as a set of frozensets of (frame, truth id)."""
    cover = defaultdict(set)
    for f, _, _, matches in clear_mot_events(out, truth, pano_width=width):
        for g, h, _ in matches:
            cover[h].add((f, g))
    return {frozenset(v) for v in cover.values()}


def _wrap_run(s, fused):
    truth = truth_frames(s)
    out, _ = track_sequence(fused, TrackerConfig(pano_width=s.width))
    rep = compute_mot_metrics(out, truth, pano_width=s.width)
    owner = {}
    for f, _, _, matches in clear_mot_events(out, truth, pano_width=s.width):
        for g, h, _ in matches:
            owner.setdefault(h, g)
    recs = detect_overtakes(out, BehaviourConfig(centre_lon=s.centre_lon), s.width)
    ot = sorted((owner.get(r.track_id), r.side, r.start_frame, r.end_frame) for r in recs)
    return id_structure(out, truth, s.width), rep.ids, ot


def test_criterion_10_wrap_invariance():
    rng = np.random.default_rng(10)
    base = random_scene(rng, frames=100, n_objects=6)
    feats = random_features(rng, 3)
    extra = [
        ScriptedObject(50, "car", [Keyframe(0, -150, -8, 10, 6), Keyframe(99, -40, -8, 10, 6)], feature=feats[0]),
        ScriptedObject(51, "truck", [Keyframe(0, 150, -5, 14, 8), Keyframe(99, 60, -5, 14, 8)], feature=feats[1]),
        ScriptedObject(52, "car", [Keyframe(0, 150, -3, 8, 5), Keyframe(99, 215, -3, 8, 5)], feature=feats[2]),
    ]
    script = SceneScript(base.width, base.height, base.frames, base.fps, base.objects + extra)
    shifted = script.shifted(37)
    with Timer(30) as t:
        # perfect panorama detections: the shift is an exact translation of the input
        exact = []
        for s in (script, shifted):
            b = realize(s)
            exact.append(_wrap_run(s, {f: b.detections(f) for f in range(s.frames)}))
        # through the fixed sub-views the input changes at the sub-pixel level
        fused = [_wrap_run(s, fuse_pipeline(s)) for s in (script, shifted)]
    (a_ids, a_n, a_ot), (b_ids, b_n, b_ot) = exact
    print(f"\nwrap invariance: IDs {a_n} vs {b_n}; overtakes {a_ot} vs {b_ot}")
    assert a_ot, "scene should contain overtakes"
    assert a_ids == b_ids
    assert a_n == b_n
    assert a_ot == b_ot
    (c_ids, c_n, c_ot), (d_ids, d_n, d_ot) = fused

    def partition(structure):
        return {frozenset(g for _, g in cover) for cover in structure}

    # coverage can differ by a frame where a box sits on a view boundary; identities may not
    assert partition(c_ids) == partition(d_ids) and c_n == d_n
    assert [r[:2] for r in c_ot] == [r[:2] for r in d_ot]
    assert all(abs(x[2] - y[2]) <= 1 and abs(x[3] - y[3]) <= 1 for x, y in zip(c_ot, d_ot))
    t.check()
