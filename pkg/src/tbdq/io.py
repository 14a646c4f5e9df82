"""MOTChallenge text files, on-disk sequence layout and YAML run configs."""

from __future__ import annotations

import dataclasses
import io
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from .associator.model import AssociatorConfig
from .baseline import GreedyConfig
from .core import BoundingBox, clip_box
from .detsim import (
    Detection,
    FrameObservation,
    GroundTruthSequence,
    NoiseConfig,
    ObjectState,
    OracleDetector,
    SceneConfig,
)
from .lifecycle import LifecycleConfig, OutputRecord
from .metrics import FrameData, frame_data
from .training.loop import TrainConfig

SCHEMA_VERSION = 1
N_FIELDS = 10


class MotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        if self.bb_width < 0 or self.bb_height < 0:
            raise ValueError(f"negative box size {self.bb_width}x{self.bb_height}")

    def cxcywh(self) -> np.ndarray:
        return np.array(
            [self.bb_left + self.bb_width / 2, self.bb_top + self.bb_height / 2, self.bb_width, self.bb_height]
        )


def format_number(v: float) -> str:
    """Shortest text that parses back to ``v``; integral values carry no decimal part."""
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"cannot write non-finite value {v}")
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _parse_line(line: str, lineno: int, path) -> MotRecord:
    parts = line.split(",")
    if len(parts) != N_FIELDS:
        raise MotFormatError(f"{path}:{lineno}: expected {N_FIELDS} fields, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise MotFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise MotFormatError(f"{path}:{lineno}: non-finite value")
    if not (vals[0].is_integer() and vals[1].is_integer()):
        raise MotFormatError(f"{path}:{lineno}: frame and id must be integers")
    if vals[0] < 1:
        raise MotFormatError(f"{path}:{lineno}: frame must be >= 1")
    if vals[4] < 0 or vals[5] < 0:
        raise MotFormatError(f"{path}:{lineno}: negative width/height")
    return MotRecord(int(vals[0]), int(vals[1]), *vals[2:])


def read_mot(path) -> list[MotRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            records.append(_parse_line(line, lineno, path))
    return records


def write_mot(records: Iterable[MotRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.frame, r.id))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for r in rows:
            vals = [r.frame, r.id, r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf, r.x, r.y, r.z]
            fh.write(",".join(format_number(v) for v in vals) + "\n")


def _pixels(box: np.ndarray, width: int, height: int, ndigits: int = 3) -> tuple[float, float, float, float]:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    return (
        round((cx - w / 2) * width, ndigits),
        round((cy - h / 2) * height, ndigits),
        round(w * width, ndigits),
        round(h * height, ndigits),
    )


def records_to_mot(records: Iterable[OutputRecord], width: int, height: int) -> list[MotRecord]:
    """Tracker output (0-based frames, normalized boxes) to MOT rows (1-based, pixels)."""
    return [
        MotRecord(r.frame + 1, r.id, *_pixels(r.box, width, height), conf=round(float(r.score), 6)) for r in records
    ]


def gt_to_mot(seq: GroundTruthSequence) -> list[MotRecord]:
    cfg = seq.config
    return [
        MotRecord(t + 1, o.identity, *_pixels(o.box.as_array(), cfg.img_width, cfg.img_height), conf=1.0)
        for t, frame in enumerate(seq.frames)
        for o in frame
        if o.visible
    ]


def mot_to_sequence(records: Iterable[MotRecord]) -> dict[int, FrameData]:
    """MOT rows grouped into the per-frame (ids, cxcywh) mapping, keyed by 0-based frame."""
    grouped: dict[int, tuple[list, list]] = {}
    for r in records:
        ids, boxes = grouped.setdefault(r.frame - 1, ([], []))
        ids.append(r.id)
        boxes.append(r.cxcywh())
    return {f: frame_data(ids, boxes) for f, (ids, boxes) in sorted(grouped.items())}


# -- sequence directories -----------------------------------------------------
#
# <dir>/gt.txt        visible ground truth, MOT format
# <dir>/det.txt       detections (id -1), MOT format, one line per detection
# <dir>/sidecar.npz   per-detection contents, per-frame global features and
#                     positions, full object states and appearance vectors

GT_FILE = "gt.txt"
DET_FILE = "det.txt"
SIDECAR_FILE = "sidecar.npz"


def save_sequence(directory, seq: GroundTruthSequence, observations: list[FrameObservation]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = seq.config
    write_mot(gt_to_mot(seq), directory / GT_FILE)

    det_rows, contents = [], []
    for t, obs in enumerate(observations):
        # det.txt rows and sidecar contents share one order (the stable sort in write_mot keeps it)
        for det in sorted(obs.detections, key=lambda d: -d.score):
            px = _pixels(det.box.as_array(), cfg.img_width, cfg.img_height)
            det_rows.append(MotRecord(t + 1, -1, *px, conf=round(det.score, 6)))
            contents.append(det.content)
    write_mot(det_rows, directory / DET_FILE)

    states = np.array(
        [
            [t, o.identity, *o.box.as_array(), float(o.visible), o.visibility]
            for t, frame in enumerate(seq.frames)
            for o in frame
        ]
    ).reshape(-1, 8)
    app_ids = np.array(sorted(seq.appearance), dtype=np.int64)
    d_feat = observations[0].features.shape[1] if observations else 0
    _save_npz(
        directory / SIDECAR_FILE,
        det_contents=np.array(contents, dtype=np.float64).reshape(len(contents), -1),
        features=np.stack([o.features for o in observations]) if observations else np.zeros((0, 0, d_feat)),
        positions=np.stack([o.positions for o in observations]) if observations else np.zeros((0, 0, d_feat)),
        states=states,
        app_ids=app_ids,
        app_vectors=np.array([seq.appearance[i] for i in app_ids]).reshape(len(app_ids), -1),
        seed=np.array(seq.seed),
        n_frames=np.array(len(seq.frames)),
        scene=np.array(yaml.safe_dump(_to_plain(cfg), sort_keys=True)),
    )


def _save_npz(path, **arrays) -> None:
    """``np.savez_compressed`` with fixed member timestamps, so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_sequence(directory) -> tuple[GroundTruthSequence, list[FrameObservation]]:
    """Inverse of :func:`save_sequence`.

    Detection boxes and scores are read from ``det.txt``; the sidecar only adds
    the per-detection content vectors (in file order) and the global features.
    """
    directory = Path(directory)
    side = directory / SIDECAR_FILE
    if not side.exists():
        raise FileNotFoundError(f"missing {side}")
    with np.load(side) as z:
        data = {k: z[k] for k in z.files}
    scene = _build(SceneConfig, yaml.safe_load(str(data["scene"])))
    n_frames = int(data["n_frames"])
    frames: list[list[ObjectState]] = [[] for _ in range(n_frames)]
    for t, ident, cx, cy, w, h, vis, visibility in data["states"]:
        frames[int(t)].append(ObjectState(int(ident), BoundingBox(cx, cy, w, h), bool(vis), float(visibility)))
    appearance = {int(i): v for i, v in zip(data["app_ids"], data["app_vectors"])}
    seq = GroundTruthSequence(frames, appearance, int(data["seed"]), scene)

    rows = read_mot(directory / DET_FILE)
    contents = data["det_contents"]
    if len(rows) != len(contents):
        raise MotFormatError(f"{directory / DET_FILE}: {len(rows)} detections but {len(contents)} sidecar contents")
    scale = np.array([scene.img_width, scene.img_height, scene.img_width, scene.img_height], dtype=np.float64)
    per_frame: list[list[Detection]] = [[] for _ in range(n_frames)]
    for r, content in zip(rows, contents):
        if r.frame > n_frames:
            raise MotFormatError(f"{directory / DET_FILE}: frame {r.frame} beyond sequence length {n_frames}")
        box = clip_box(r.cxcywh() / scale)
        per_frame[r.frame - 1].append(Detection(BoundingBox.from_array(box), float(np.clip(r.conf, 0.0, 1.0)), content))
    obs = [FrameObservation(per_frame[t], data["features"][t], data["positions"][t]) for t in range(n_frames)]
    return seq, obs


def sequence_dirs(root) -> list[Path]:
    """Sequence directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"no such directory: {root}")
    if (root / SIDECAR_FILE).exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / SIDECAR_FILE).exists())
    if not dirs:
        raise FileNotFoundError(f"no sequences under {root}")
    return dirs


# -- run configuration --------------------------------------------------------


@dataclass
class DetectorConfig:
    # appearance width comes from the scene, feature width from the associator
    grid: tuple[int, int] = (8, 8)

    def __post_init__(self):
        self.grid = tuple(self.grid)


@dataclass
class RunConfig:
    seed: int = 0
    n_sequences: int = 4
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    associator: AssociatorConfig = field(default_factory=AssociatorConfig)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: GreedyConfig = field(default_factory=GreedyConfig)
    paths: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _to_plain(self)

    def make_detector(self) -> OracleDetector:
        return OracleDetector(self.associator.input_dim, self.scene.d_app, self.detector.grid, self.associator.temperature)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        return _build(cls, data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_NESTED = {
    "scene": SceneConfig,
    "noise": NoiseConfig,
    "detector": DetectorConfig,
    "associator": AssociatorConfig,
    "lifecycle": LifecycleConfig,
    "train": TrainConfig,
    "baseline": GreedyConfig,
}


def _build(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is RunConfig and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v or {})
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return RunConfig.from_dict(data or {})
