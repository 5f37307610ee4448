"""Command-line driver: synth, fuse, track, overtakes, eval, report, print-config.

Every stage reads and writes plain files, so later stages can be re-run
(for example with ablation flags) without repeating earlier ones.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import behaviour, fusion, metrics
from .config import config_to_dict, load_config
from .detectors import ExternalDetector, PerfectDetector, load_detection_store
from .formats import (
    coco_from_frames,
    frames_to_mot,
    mot_to_frames,
    read_coco,
    read_mot,
    write_coco,
    write_mot,
)
from .projection import PanoramaGeometry
from .synthetic import SceneScript, random_scene, realize, render
from .tracker import track_sequence

log = logging.getLogger("panotrack")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
OVERTAKE_COLOUR = (255, 0, 0)
TRACK_COLOUR = (0, 255, 0)


# -- helpers ------------------------------------------------------------------

def list_frames(directory):
    """Sorted (frame index, path) pairs; the index is the last number in the name."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frames directory does not exist: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    out = []
    for i, p in enumerate(paths):
        nums = re.findall(r"\d+", p.stem)
        out.append((int(nums[-1]) if nums else i, p))
    idx = [f for f, _ in out]
    if len(set(idx)) != len(idx):
        raise ValueError(f"{d}: frame numbers in file names are not unique")
    return sorted(out)


def read_image(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as e:
        raise OSError(f"cannot read frame {path}: {e}") from None


def write_image(path, img):
    from PIL import Image

    Image.fromarray(img).save(path)


def _in_range(frames, frame_range):
    if frame_range is None:
        return list(frames)
    lo, hi = frame_range
    return [f for f in frames if lo <= f < hi]


def _mot_frames(path, width, frames=None):
    return mot_to_frames(read_mot(path), width, frames)


def _write_lines(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines))


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, args):
    out = Path(args.output or cfg.output or "synth")
    out.mkdir(parents=True, exist_ok=True)
    if args.scene:
        script = SceneScript.load(args.scene)
    else:
        rng = np.random.default_rng(args.seed)
        script = random_scene(rng, cfg.pano_width, cfg.pano_height, args.n_frames, args.n_objects, fps=cfg.fps)
    bundle = realize(script)
    frames = [bundle.frames[f] for f in range(script.frames)]
    script.save(out / "scene.json")
    write_mot(out / "truth.mot", frames_to_mot(frames, script.width))
    write_coco(out / "truth.coco.json", coco_from_frames(frames, script.width, script.width, script.height))
    _write_lines(out / "truth.overtakes", behaviour.format_overtakes(bundle.overtakes))
    if args.render:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for f in range(script.frames):
            write_image(fdir / f"frame_{f:06d}.png", render(script, f))
    log.info("wrote a %d-frame scene with %d objects to %s", script.frames, len(script.objects), out)
    return 0


def _make_detector(cfg, args):
    dc = cfg.detector
    if args.script:
        return PerfectDetector(SceneScript.load(args.script), cfg.fusion, dc.jitter, dc.drop, args.seed or dc.seed)
    if args.store:
        return load_detection_store(args.store)
    if dc.kind == "store":
        cfg.check_paths("detector.path")
        return load_detection_store(dc.path)
    if dc.kind == "external":
        if not dc.command:
            raise ValueError("detector.command is required for the external detector")
        return ExternalDetector(dc.command, dc.timeout)
    cfg.check_paths("detector.script")
    return PerfectDetector(SceneScript.load(dc.script), cfg.fusion, dc.jitter, dc.drop, dc.seed)


def cmd_fuse(cfg, args):
    detector = _make_detector(cfg, args)
    pano = PanoramaGeometry(cfg.pano_width, cfg.pano_height)
    frames_dir = args.frames or cfg.frames
    if frames_dir:
        frames = [(f, p) for f, p in list_frames(frames_dir)]
    elif isinstance(detector, PerfectDetector):
        frames = [(f, None) for f in range(detector.script.frames)]
    elif hasattr(detector, "frames"):
        frames = [(f, None) for f in detector.frames()]
    else:
        raise ValueError("no frames: pass --frames or use a detector that supplies its own")
    frames = [(f, p) for f, p in frames if f in set(_in_range([f for f, _ in frames], cfg.frame_range))]
    needs = getattr(detector, "needs_image", True)
    lines = []
    t_all = time.perf_counter()
    for f, path in frames:
        t0 = time.perf_counter()
        img = read_image(path) if (path is not None and needs) else None
        dets = fusion.fuse_frame(img, detector, cfg.fusion, pano, f)
        lines += fusion.format_fused(f, dets)
        log.info("frame %d: %d fused boxes in %.3f s", f, len(dets), time.perf_counter() - t0)
    dt = time.perf_counter() - t_all
    if frames:
        log.info("fused %d frames in %.2f s (%.2f FPS)", len(frames), dt, len(frames) / dt if dt else float("inf"))
    _write_lines(args.output or cfg.output or "fused.txt", lines)
    return 0


def cmd_track(cfg, args):
    path = args.detections or cfg.detections
    if path is None:
        raise ValueError("track needs --detections")
    if not Path(path).exists():
        raise FileNotFoundError(f"detections file does not exist: {path}")
    dets = fusion.parse_fused(Path(path).read_text().splitlines())
    tc = cfg.tracker
    if args.no_category_support:
        tc.category_support = False
    if args.no_boundary_support:
        tc.boundary_support = False
    if dets:
        lo, hi = min(dets), max(dets) + 1
        frame_ids = _in_range(range(lo, hi), cfg.frame_range)
    else:
        frame_ids = []
    if dets and not all(d.feature is not None for ds in dets.values() for d in ds):
        log.warning("detections carry no appearance features; the cascade uses IoU cost")
    t0 = time.perf_counter()
    out, _ = track_sequence(dets, tc, frames=frame_ids)
    dt = time.perf_counter() - t0
    if frame_ids:
        log.info("tracked %d frames in %.2f s (%.4f s per frame)", len(frame_ids), dt, dt / len(frame_ids))
    write_mot(args.output or cfg.output or "tracks.mot", frames_to_mot(out, cfg.pano_width))
    return 0


def _draw_overlay(img, objects, marked):
    from PIL import Image, ImageDraw

    im = Image.fromarray(img)
    draw = ImageDraw.Draw(im)
    W = im.width
    for o in objects:
        colour = OVERTAKE_COLOUR if o.id in marked else TRACK_COLOUR
        x1, y1, x2, y2 = o.box
        for dx in (0, -W):
            if x2 + dx > 0 and x1 + dx < W:
                draw.rectangle([x1 + dx, y1, x2 + dx - 1, y2 - 1], outline=colour, width=3)
    return np.asarray(im)


def cmd_overtakes(cfg, args):
    path = args.detections or cfg.detections
    if path is None:
        raise ValueError("overtakes needs --detections (a MOT track file)")
    stream = _mot_frames(path, cfg.pano_width)
    bc = cfg.behaviour
    if args.min_overtake_duration is not None:
        bc.min_duration = args.min_overtake_duration
    records, marks = behaviour.detect_overtakes(stream, bc, cfg.pano_width, annotate=True)
    out = Path(args.output or cfg.output or "overtakes.txt")
    _write_lines(out, behaviour.format_overtakes(records))
    log.info("%d confirmed overtakes", len(records))
    if args.overlay or cfg.overlay:
        frames_dir = args.frames or cfg.frames
        if not frames_dir:
            raise ValueError("overlay needs --frames")
        odir = out.parent / (out.stem + "_overlay")
        odir.mkdir(parents=True, exist_ok=True)
        by_frame = {fa.frame: fa.objects for fa in stream}
        for f, p in list_frames(frames_dir):
            img = _draw_overlay(read_image(p), by_frame.get(f, []), marks.get(f, set()))
            write_image(odir / f"frame_{f:06d}.png", img)
    return 0


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_eval(cfg, args):
    done = False
    lines = []
    if args.tracks:
        if not args.truth:
            raise ValueError("track evaluation needs --truth")
        truth = _mot_frames(args.truth, cfg.pano_width)
        t_frames = [fa.frame for fa in truth]
        pred = _mot_frames(args.tracks, cfg.pano_width)
        bad = [fa.frame for fa in pred if t_frames and not t_frames[0] <= fa.frame <= t_frames[-1]]
        if bad:
            raise ValueError(f"prediction frames {bad[:5]} lie outside the truth frame range")
        rep = metrics.compute_mot_metrics(pred, truth, pano_width=cfg.pano_width)
        lines += [",".join(rep.COLUMNS), ",".join(_fmt(v) for v in rep.row())]
        done = True
    if args.coco_pred:
        if not args.coco_truth:
            raise ValueError("detection evaluation needs --coco-truth")
        p, t = read_coco(args.coco_pred), read_coco(args.coco_truth)
        ap = metrics.compute_ap(p.detections_by_image(), t.detections_by_image())
        lines += ["AP,AP50,AP75,APs,APm,APl", ",".join(_fmt(v) for v in (ap.ap, ap.ap50, ap.ap75, ap.aps, ap.apm, ap.apl))]
        done = True
    if args.overtakes:
        if not args.truth_overtakes:
            raise ValueError("overtake evaluation needs --truth-overtakes")
        pred = behaviour.parse_overtakes(Path(args.overtakes).read_text().splitlines())
        truth = behaviour.parse_overtakes(Path(args.truth_overtakes).read_text().splitlines())
        s = behaviour.score_overtakes(pred, truth, args.frame_tolerance, match_side=True)
        lines += ["TP,FP,FN,precision,recall,F", ",".join(_fmt(v) for v in (s.tp, s.fp, s.fn, s.precision, s.recall, s.f_score))]
        done = True
    if not done:
        raise ValueError("nothing to evaluate: pass --tracks, --coco-pred or --overtakes")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(cfg, args):
    from .report import dataset_report, write_report

    if not args.truth:
        raise ValueError("report needs --truth (a MOT file)")
    frames = _mot_frames(args.truth, cfg.pano_width)
    rep = dataset_report(frames, cfg.pano_width, cfg.pano_height, args.cell)
    write_report(rep, args.output or cfg.output or "report")
    return 0


def cmd_print_config(cfg, args):
    sys.stdout.write(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "fuse": cmd_fuse,
    "track": cmd_track,
    "overtakes": cmd_overtakes,
    "eval": cmd_eval,
    "report": cmd_report,
    "print-config": cmd_print_config,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--frames", help="directory of panorama frames")
    common.add_argument("--detections", help="input detections or tracks")
    common.add_argument("--output", help="output file or directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="panotrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene with ground truth")
    s.add_argument("--scene", help="existing scene script to realize")
    s.add_argument("--n-frames", type=int, default=200)
    s.add_argument("--n-objects", type=int, default=10)
    s.add_argument("--render", action="store_true", help="also write PNG frames")

    s = sub.add_parser("fuse", parents=[common], help="detect on sub-views and fuse onto the panorama")
    s.add_argument("--store", help="detection store file (overrides the config)")
    s.add_argument("--script", help="scene script for the perfect detector (overrides the config)")

    s = sub.add_parser("track", parents=[common], help="track fused detections")
    s.add_argument("--no-category-support", action="store_true")
    s.add_argument("--no-boundary-support", action="store_true")

    s = sub.add_parser("overtakes", parents=[common], help="detect overtakes in a track file")
    s.add_argument("--min-overtake-duration", type=float, help="seconds; shorter overtakes are dropped")
    s.add_argument("--overlay", action="store_true", help="write annotated frames")

    s = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    s.add_argument("--truth", help="truth MOT file")
    s.add_argument("--tracks", help="predicted MOT file")
    s.add_argument("--coco-pred", help="predicted COCO file")
    s.add_argument("--coco-truth", help="truth COCO file")
    s.add_argument("--overtakes", help="predicted overtakes file")
    s.add_argument("--truth-overtakes", help="true overtakes file")
    s.add_argument("--frame-tolerance", type=int, default=0)

    s = sub.add_parser("report", parents=[common], help="dataset statistics of a MOT file")
    s.add_argument("--truth", help="MOT file to describe")
    s.add_argument("--cell", type=int, default=1, help="heat map block size")

    sub.add_parser("print-config", parents=[common], help="print the effective config as JSON")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError, fusion.DetectorError) as e:
        print(f"panotrack {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
