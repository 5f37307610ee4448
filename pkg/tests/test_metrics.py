import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panotrack.annotations import AnnotatedObject, FrameAnnotations
from panotrack.boxes import Detection
from panotrack.formats import (
    CocoDataset,
    MotRow,
    coco_from_frames,
    frames_to_mot,
    merge_split_track_ids,
    mot_to_frames,
    parse_mot_line,
    read_coco,
    read_mot,
    write_coco,
    write_mot,
)
from panotrack.metrics import compute_ap, compute_mot_metrics, size_class
from panotrack.oracles import coco_ap_oracle, exhaustive_idf1, interval_iou
from panotrack.report import dataset_report, write_report


def fa(frame, *objs):
    return FrameAnnotations(frame, [AnnotatedObject(i, c, b) for i, c, b in objs])


# -- MOT files ----------------------------------------------------------------

def test_parse_mot_line():
    r = parse_mot_line("1,6,100,200,50,80,1,3,1.0")
    assert (r.frame, r.id, r.box, r.category) == (1, 6, (100, 200, 150, 280), "car")


def test_parse_mot_errors():
    with pytest.raises(ValueError, match="x.mot:4"):
        parse_mot_line("1,6,100,200", "x.mot", 4)
    with pytest.raises(ValueError, match="unknown category id"):
        parse_mot_line("1,6,100,200,50,80,1,99,1.0")


def test_mot_round_trip(tmp_path):
    rows = [MotRow(1, 6, (100, 200, 150, 280), 1.0, "car"), MotRow(2, 7, (1.5, 2.25, 10, 20), 0.5, "traffic light", 0.3)]
    write_mot(tmp_path / "a.mot", rows)
    assert read_mot(tmp_path / "a.mot") == rows


def test_seam_box_written_as_two_rows_and_rejoined():
    frames = [fa(0, (3, "bus", (990, 10, 1030, 50)))]
    rows = frames_to_mot(frames, 1000)
    assert sorted(r.box for r in rows) == [(0, 10, 30, 50), (990, 10, 1000, 50)]
    (back,) = mot_to_frames(rows, 1000)
    assert back.objects[0].box == (990, 10, 1030, 50)


def test_same_id_twice_not_at_seam_rejected():
    rows = [MotRow(0, 1, (10, 0, 20, 5), 1, "car"), MotRow(0, 1, (40, 0, 50, 5), 1, "car")]
    with pytest.raises(ValueError, match="not a seam pair"):
        mot_to_frames(rows, 1000)


def _split_pair_rows(n=10):
    rows = []
    for f in range(n):
        rows.append(MotRow(f, 6, (0, 100, 40, 200), 1, "bus"))
        rows.append(MotRow(f, 11, (960, 105, 1000, 195), 1, "bus"))
        rows.append(MotRow(f, 2, (400, 100, 420, 140), 1, "car"))
    return rows


def test_merge_split_ids():
    rows, remap = merge_split_track_ids(_split_pair_rows(), 1000)
    assert remap == {11: 6}
    assert sum(r.id == 6 for r in rows) == 20
    assert not any(r.id == 11 for r in rows)
    # still two boxes per frame, which the reader joins
    assert all(len(f.objects) == 2 for f in mot_to_frames(rows, 1000))


def test_merge_split_ids_idempotent_and_noop():
    once, _ = merge_split_track_ids(_split_pair_rows(), 1000)
    twice, remap = merge_split_track_ids(once, 1000)
    assert twice == once and remap == {}
    plain = [MotRow(0, 1, (100, 0, 120, 5), 1, "car")]
    assert merge_split_track_ids(plain, 1000) == (plain, {})


def test_merge_split_ids_ambiguous():
    rows = _split_pair_rows(3) + [MotRow(1, 12, (970, 100, 1000, 200), 1, "bus")]
    with pytest.raises(ValueError, match=r"\[1\]"):
        merge_split_track_ids(rows, 1000)


# -- COCO files ---------------------------------------------------------------

def test_coco_round_trip(tmp_path):
    frames = [fa(0, (1, "car", (10, 20, 30, 40)), (2, "bus", (990, 0, 1020, 30))), fa(1)]
    ds = coco_from_frames(frames, 1000, 1000, 500)
    ds.extra["info"] = {"note": "kept"}
    ds.annotations[0].extra["attributes"] = {"occluded": True}
    write_coco(tmp_path / "a.json", ds)
    back = read_coco(tmp_path / "a.json")
    assert back.extra == {"info": {"note": "kept"}}
    assert back.annotations[0].extra == {"attributes": {"occluded": True}}
    got = back.to_frames(1000)
    assert [f.frame for f in got] == [0, 1]
    assert [(o.id, o.category, o.box) for o in got[0].objects] == [(1, "car", (10, 20, 30, 40)), (2, "bus", (990, 0, 1020, 30))]


def test_coco_unknown_category(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps({"annotations": [{"image_id": 0, "category_id": 5, "bbox": [0, 0, 1, 1]}]}))
    with pytest.raises(ValueError, match=r"annotations\[0\].*5"):
        read_coco(p)


def test_coco_results_list(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps([{"image_id": 3, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.4}]))
    ds = read_coco(p)
    assert ds.annotations[0].score == 0.4 and ds.annotations[0].category == "person"


# -- AP -----------------------------------------------------------------------

def P(box, score, cat="car"):
    return Detection(box, score, cat)


def G(box, cat="car"):
    return Detection(box, 1.0, cat)


def test_ap_perfect():
    r = compute_ap({0: [P((0, 0, 10, 10), 0.9)]}, {0: [G((0, 0, 10, 10))]})
    assert r.ap == 1 and r.ap50 == 1 and r.ap75 == 1


def test_ap_iou_06():
    # IoU 0.6: true positive at 0.50..0.60, false positive above
    pred, gt = (0, 0, 10, 10), (0, 0, 10, 6)
    assert interval_iou(pred, gt) == pytest.approx(0.6)
    r = compute_ap({0: [P(pred, 0.9)]}, {0: [G(gt)]})
    assert r.ap50 == 1 and r.ap75 == 0
    assert r.ap == pytest.approx(3 / 10)


def _fixture():
    preds = {
        0: [P((0, 0, 10, 10), 0.9), P((50, 50, 60, 60), 0.8), P((1, 1, 11, 11), 0.3)],
        1: [P((0, 0, 10, 12), 0.7), P((100, 100, 120, 120), 0.95)],
        2: [P((5, 5, 15, 15), 0.6), P((30, 30, 40, 41), 0.5)],
    }
    truth = {0: [G((0, 0, 10, 10)), G((50, 50, 61, 61))], 1: [G((0, 0, 10, 10))], 2: [G((30, 30, 40, 40)), G((70, 0, 80, 10))]}
    return preds, truth


def _oracle_images(preds, truth):
    return [([(p.box, p.score) for p in preds.get(i, [])], [g.box for g in truth.get(i, [])]) for i in sorted(set(preds) | set(truth))]


def test_ap_matches_oracle():
    preds, truth = _fixture()
    assert compute_ap(preds, truth).ap == pytest.approx(coco_ap_oracle(_oracle_images(preds, truth)), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_random_fixtures_match_oracle(seed):
    rng = np.random.default_rng(seed)
    preds, truth = {}, {}
    for img in range(3):
        gts = []
        for _ in range(rng.integers(1, 4)):
            x, y = rng.uniform(0, 200, 2)
            gts.append(G((x, y, x + rng.uniform(5, 40), y + rng.uniform(5, 40))))
        truth[img] = gts
        ps = []
        for g in gts:
            if rng.random() < 0.8:
                b = np.array(g.box) + rng.normal(0, 3, 4)
                b[2], b[3] = max(b[2], b[0] + 1), max(b[3], b[1] + 1)
                ps.append(P(tuple(b), float(rng.random())))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 200, 2)
            ps.append(P((x, y, x + 10, y + 10), float(rng.random())))
        preds[img] = ps
    assert compute_ap(preds, truth).ap == pytest.approx(coco_ap_oracle(_oracle_images(preds, truth)), abs=1e-9)


def test_ap_monotonicity():
    preds, truth = _fixture()
    base = compute_ap(preds, truth).ap
    more = {k: list(v) for k, v in preds.items()}
    more[2].append(P((70, 0, 80, 10), 0.99))
    assert compute_ap(more, truth).ap >= base
    worse = {k: list(v) for k, v in preds.items()}
    worse[0].append(P((500, 500, 510, 510), 0.01))
    assert compute_ap(worse, truth).ap <= base


def test_ap_size_classes():
    assert size_class(127 * 127) == "small"
    assert size_class(200 * 200) == "medium"
    assert size_class(400 * 400) == "large"
    r = compute_ap({0: [P((0, 0, 10, 10), 0.9)]}, {0: [G((0, 0, 10, 10)), G((0, 100, 200, 300))]})
    assert r.aps == 1 and r.apm == 0 and np.isnan(r.apl)


def test_ap_per_category_mean():
    r = compute_ap({0: [P((0, 0, 10, 10), 0.9)]}, {0: [G((0, 0, 10, 10)), G((50, 0, 60, 10), "bus")]})
    assert r.per_category == {"bus": 0.0, "car": 1.0}
    assert r.ap == 0.5


# -- MOT metrics --------------------------------------------------------------

def test_mot_perfect():
    truth = [fa(f, (1, "car", (10 * f, 0, 10 * f + 20, 20)), (2, "bus", (500, 0, 560, 40))) for f in range(10)]
    r = compute_mot_metrics(truth, truth)
    assert (r.mota, r.idf1, r.ids, r.motp) == (1, 1, 0, 0)
    assert (r.mt, r.pt, r.ml) == (2, 0, 0)


def test_mot_one_miss_of_ten():
    gts = [(i, "car", (50 * i, 0, 50 * i + 30, 30)) for i in range(10)]
    truth = [fa(0, *gts)]
    pred = [fa(0, *gts[:9])]
    assert compute_mot_metrics(pred, truth).mota == pytest.approx(0.9)


def swap_fixture():
    # two objects crossing; the prediction swaps identities halfway
    truth, pred = [], []
    for f in range(10):
        a, b = (10 * f, 0, 10 * f + 20, 20), (100 - 10 * f, 40, 120 - 10 * f, 60)
        truth.append(fa(f, (1, "car", a), (2, "car", b)))
        pred.append(fa(f, (7, "car", a), (8, "car", b)) if f < 5 else fa(f, (8, "car", a), (7, "car", b)))
    return pred, truth


def tracks_of(frames):
    out = {}
    for f in frames:
        for o in f.objects:
            out.setdefault(o.id, {})[f.frame] = (o.category, o.box)
    return out


def test_mot_id_swap():
    pred, truth = swap_fixture()
    r = compute_mot_metrics(pred, truth)
    assert r.ids == 2
    assert r.idf1 < 1
    assert r.idf1 == pytest.approx(exhaustive_idf1(tracks_of(truth), tracks_of(pred)))
    assert r.mota == pytest.approx(1 - 2 / 20)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_idf1_matches_oracle_on_random_fixtures(seed):
    rng = np.random.default_rng(seed)
    n_frames, n_gt = int(rng.integers(3, 12)), int(rng.integers(1, 5))
    cats = ["car", "bus"]
    truth, pred = [], []
    for f in range(n_frames):
        gobjs, pobjs, used = [], [], set()
        for g in range(n_gt):
            if rng.random() < 0.85:
                box = (100 * g + 2 * f, 0, 100 * g + 2 * f + 30, 30)
                gobjs.append((g + 1, cats[g % 2], box))
                if rng.random() < 0.8:
                    pid = int(rng.integers(1, 6))
                    if pid not in used:
                        used.add(pid)
                        jitter = rng.normal(0, 4, 4)
                        pb = tuple(np.array(box) + jitter)
                        pb = (pb[0], pb[1], max(pb[2], pb[0] + 1), max(pb[3], pb[1] + 1))
                        pobjs.append((pid, cats[g % 2], pb))
        truth.append(fa(f, *gobjs))
        pred.append(fa(f, *pobjs))
    r = compute_mot_metrics(pred, truth)
    assert r.idf1 == pytest.approx(exhaustive_idf1(tracks_of(truth), tracks_of(pred)), abs=1e-12)
    # MOTA is assembled from the separately counted events
    assert r.mota == pytest.approx(1 - (r.fp + r.fn + r.ids) / r.num_gt)
    assert r.mt + r.pt + r.ml == r.num_gt_tracks


def test_mot_class_aware():
    truth = [fa(0, (1, "car", (0, 0, 10, 10)))]
    pred = [fa(0, (1, "bus", (0, 0, 10, 10)))]
    r = compute_mot_metrics(pred, truth)
    assert r.fp == 1 and r.fn == 1


def test_mot_fragmentation_and_coverage():
    truth = [fa(f, (1, "car", (0, 0, 10, 10))) for f in range(10)]
    pred = [fa(f, (5, "car", (0, 0, 10, 10))) if f not in (3, 4) else fa(f) for f in range(10)]
    r = compute_mot_metrics(pred, truth)
    assert r.fm == 1 and r.ids == 0 and r.mt == 1


def test_mot_seam_aware_iou():
    truth = [fa(0, (1, "car", (990, 0, 1010, 10)))]
    pred = [fa(0, (2, "car", (992, 0, 1012, 10)))]
    assert compute_mot_metrics(pred, truth, pano_width=1000).mota == 1


def test_mot_duplicate_frames_rejected():
    with pytest.raises(ValueError):
        compute_mot_metrics([fa(0), fa(0)], [fa(0)])


# -- dataset report -----------------------------------------------------------

def test_report_one_box():
    r = dataset_report([fa(0, (1, "car", (10, 10, 20, 20)))], 100, 50)
    assert r.heat.sum() == 100 and r.heat.max() == 1
    assert r.category_counts["car"] == 1 and r.size_counts["small"] == 1


def test_report_empty():
    r = dataset_report([], 100, 50)
    assert r.heat.sum() == 0 and r.total_boxes == 0 and sum(r.size_counts.values()) == 0


def test_report_partition_and_seam(tmp_path):
    frames = [fa(0, (1, "car", (95, 0, 105, 10)), (2, "bus", (0, 0, 40, 40))), fa(1, (1, "car", (0, 0, 5, 5)))]
    r = dataset_report(frames, 100, 50)
    assert r.total_boxes == 3 == sum(r.size_counts.values())
    assert r.heat[:10, 95:].sum() == 50 and r.heat[:10, :5].sum() >= 50
    coarse = dataset_report(frames, 100, 50, cell=5)
    assert coarse.heat.shape == (10, 20) and coarse.heat.sum() == r.heat.sum()
    write_report(r, tmp_path / "rep")
    assert (tmp_path / "rep" / "categories.csv").read_text().startswith("category,boxes")
