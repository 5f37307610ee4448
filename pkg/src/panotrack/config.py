"""Pipeline configuration: one JSON file covering every stage.

Unknown keys and wrong types are rejected with the offending path.  Run
``panotrack print-config`` for the full set of defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .behaviour import BehaviourConfig
from .fusion import FusionConfig
from .tracker import TrackerConfig

DETECTOR_KINDS = ("store", "external", "perfect")


@dataclass
class DetectorConfig:
    kind: str = "store"
    path: Optional[str] = None  # detection store file
    command: Optional[list] = None  # external detector argv
    script: Optional[str] = None  # scene script for the perfect detector
    timeout: float = 60.0
    jitter: float = 0.0
    drop: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"detector.kind must be one of {DETECTOR_KINDS}, got {self.kind!r}")
        need = {"store": "path", "external": "command", "perfect": "script"}[self.kind]
        given = [k for k in ("path", "command", "script") if getattr(self, k) is not None]
        if given and given != [need]:
            raise ValueError(f"detector.kind {self.kind!r} takes only detector.{need}, got {given}")


@dataclass
class PipelineConfig:
    pano_width: int = 5376
    pano_height: int = 2688
    fps: float = 30.0
    frames: Optional[str] = None  # directory of panorama images
    frame_range: Optional[list] = None  # [start, stop)
    detections: Optional[str] = None
    output: Optional[str] = None
    overlay: bool = False
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    behaviour: BehaviourConfig = field(default_factory=BehaviourConfig)

    def __post_init__(self):
        self.tracker.pano_width = self.pano_width
        self.behaviour.fps = self.fps
        if self.frame_range is not None:
            if len(self.frame_range) != 2 or self.frame_range[0] > self.frame_range[1]:
                raise ValueError("frame_range must be [start, stop) with start <= stop")

    def check_paths(self, *names):
        """Fail early when any of the named path fields is missing on disk."""
        for n in names:
            v = getattr(self, n) if "." not in n else getattr(self.detector, n.split(".")[1])
            if v is None:
                raise ValueError(f"config field {n!r} is required for this command")
            if not Path(v).exists():
                raise FileNotFoundError(f"{n}: path does not exist: {v}")


_SECTIONS = {"detector": DetectorConfig, "fusion": FusionConfig, "tracker": TrackerConfig, "behaviour": BehaviourConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for k, v in data.items():
        default = getattr(defaults, k)
        if isinstance(default, tuple):
            v = tuple(v)
        elif isinstance(default, frozenset):
            v = frozenset(v)
        elif isinstance(default, bool) and not isinstance(v, bool):
            raise ValueError(f"{where}.{k}: expected true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ValueError(f"{where}.{k}: expected a number")
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ValueError(f"{where}: {e}") from None


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ValueError("config: expected an object")
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    sections = {k: _build(c, data.get(k, {}), k) for k, c in _SECTIONS.items()}
    cfg = _build(PipelineConfig, top, "config") if top else PipelineConfig()
    for k, v in sections.items():
        setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(data)


def _jsonable(v):
    if isinstance(v, (tuple, frozenset, set)):
        return sorted(v) if isinstance(v, (frozenset, set)) else list(v)
    return v


def config_to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {g.name: _jsonable(getattr(v, g.name)) for g in dataclasses.fields(v)}
        else:
            out[f.name] = _jsonable(v)
    return out
