"""Synthetic scenes and an oracle detector standing in for a frozen pretrained one.

The detector emits, per frame, detection boxes with confidence scores and
content vectors, plus a coarse grid of global feature tokens with their 2D
sine encodings. Content vectors mix a persistent per-identity appearance
latent (noised per frame) with location features of the detected box, which
is what ROI-pooled backbone features or DETR decoder embeddings carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, encode_box_position, encode_grid_positions, iou_matrix

MOTIONS = ("linear", "sinusoidal", "crossing")

# fixed seed for the "frozen" detector projections
_DETECTOR_WEIGHT_SEED = 20240611


@dataclass
class SceneConfig:
    n_objects_min: int = 3
    n_objects_max: int = 6
    n_frames: int = 30
    motion: str = "linear"
    occlusion_rate: float = 0.0
    max_occlusion_len: int = 4
    size_min: float = 0.08
    size_max: float = 0.16
    speed_min: float = 0.004
    speed_max: float = 0.012
    late_entry_prob: float = 0.0
    d_app: int = 16
    img_width: int = 1920
    img_height: int = 1080

    def __post_init__(self):
        if self.n_frames <= 0:
            raise ValueError("n_frames must be positive")
        if self.n_objects_min <= 0 or self.n_objects_max < self.n_objects_min:
            raise ValueError("object count range must be positive and ordered")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion family {self.motion!r}")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("occlusion_rate must be in [0, 1)")


@dataclass
class NoiseConfig:
    box_jitter: float = 0.004
    miss_prob: float = 0.02
    fp_rate: float = 0.3
    app_noise: float = 0.3
    invisible_detect_prob: float = 0.0
    true_score_ab: tuple[float, float] = (8.0, 2.0)
    fp_score_ab: tuple[float, float] = (2.0, 5.0)
    geometry_gain: float = 1.0


@dataclass
class ObjectState:
    identity: int
    box: BoundingBox
    visible: bool
    visibility: float = 1.0


@dataclass
class GroundTruthSequence:
    frames: list[list[ObjectState]]
    appearance: dict[int, np.ndarray]
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    def __len__(self) -> int:
        return len(self.frames)

    def visible(self, t: int) -> list[ObjectState]:
        return [o for o in self.frames[t] if o.visible]

    def lifespans(self) -> dict[int, tuple[int, int]]:
        spans: dict[int, tuple[int, int]] = {}
        for t, objs in enumerate(self.frames):
            for o in objs:
                first, _ = spans.get(o.identity, (t, t))
                spans[o.identity] = (first, t)
        return spans


@dataclass
class Detection:
    box: BoundingBox
    score: float
    content: np.ndarray


@dataclass
class FrameObservation:
    detections: list[Detection]
    features: np.ndarray  # (n_tokens, d_model)
    positions: np.ndarray  # (n_tokens, d_model)

    def __post_init__(self):
        if self.features.shape != self.positions.shape:
            raise ValueError("global features and positions must have identical shape")
        for det in self.detections:
            if not 0.0 <= det.score <= 1.0:
                raise ValueError(f"score out of range: {det.score}")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([d.box.as_array() for d in self.detections]).reshape(-1, 4)

    @property
    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)

    @property
    def contents(self) -> np.ndarray:
        d = self.features.shape[1]
        return np.array([det.content for det in self.detections]).reshape(-1, d)


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions back into ``[lo, hi]`` as if bouncing off the walls."""
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def _trajectories(cfg: SceneConfig, n_obj: int, rng: np.random.Generator):
    t = np.arange(cfg.n_frames, dtype=np.float64)
    sizes = rng.uniform(cfg.size_min, cfg.size_max, size=(n_obj, 2))
    centres = np.zeros((n_obj, cfg.n_frames, 2))

    def velocity():
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        angle = rng.uniform(0, 2 * np.pi)
        return speed * np.array([np.cos(angle), np.sin(angle)])

    start = 0
    if cfg.motion == "crossing":
        for a in range(0, n_obj - 1, 2):
            b = a + 1
            sizes[b] = sizes[a]
            meet = rng.uniform(0.3, 0.7, size=2)
            t_meet = rng.integers(cfg.n_frames // 3, max(cfg.n_frames // 3 + 1, 2 * cfg.n_frames // 3))
            va = velocity()
            turn = rng.uniform(2 * np.pi / 3, 4 * np.pi / 3)
            rot = np.array([[np.cos(turn), -np.sin(turn)], [np.sin(turn), np.cos(turn)]])
            vb = rot @ va
            centres[a] = meet + (t - t_meet)[:, None] * va
            centres[b] = meet + (t - t_meet)[:, None] * vb
        start = n_obj - (n_obj % 2)
    for i in range(start, n_obj):
        p0 = rng.uniform(0.15, 0.85, size=2)
        v = velocity()
        path = p0 + t[:, None] * v
        if cfg.motion == "sinusoidal":
            amp = rng.uniform(0.02, 0.06)
            omega = rng.uniform(0.15, 0.4)
            phase = rng.uniform(0, 2 * np.pi)
            normal = np.array([-v[1], v[0]]) / (np.linalg.norm(v) + 1e-12)
            path = path + amp * np.sin(omega * t + phase)[:, None] * normal
        centres[i] = path
    for i in range(n_obj):
        half = sizes[i] / 2
        centres[i, :, 0] = _reflect(centres[i, :, 0], half[0], 1 - half[0])
        centres[i, :, 1] = _reflect(centres[i, :, 1], half[1], 1 - half[1])
    return centres, sizes


def _covered_fraction(box: np.ndarray, front: np.ndarray) -> float:
    """Fraction of ``box`` covered by any of the ``front`` boxes (union, rasterized)."""
    if len(front) == 0:
        return 0.0
    n = 24
    x1, y1 = box[0] - box[2] / 2, box[1] - box[3] / 2
    xs = x1 + (np.arange(n) + 0.5) / n * box[2]
    ys = y1 + (np.arange(n) + 0.5) / n * box[3]
    gx, gy = np.meshgrid(xs, ys)
    covered = np.zeros_like(gx, dtype=bool)
    for f in front:
        covered |= (np.abs(gx - f[0]) <= f[2] / 2) & (np.abs(gy - f[1]) <= f[3] / 2)
    return float(covered.mean())


def generate_sequence(config: SceneConfig, seed: int) -> GroundTruthSequence:
    """Sample a ground-truth scene. Deterministic for a fixed ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    centres, sizes = _trajectories(config, n_obj, rng)
    appearance = {i + 1: rng.standard_normal(config.d_app) for i in range(n_obj)}

    births = np.zeros(n_obj, dtype=int)
    for i in range(n_obj):
        if i > 0 and config.n_frames > 2 and rng.random() < config.late_entry_prob:
            births[i] = rng.integers(1, max(2, config.n_frames // 2))
    if config.motion == "crossing":
        births[: n_obj - (n_obj % 2)] = 0

    hidden = np.zeros((n_obj, config.n_frames), dtype=bool)
    if config.occlusion_rate > 0:
        for i in range(n_obj):
            t = births[i]
            while t < config.n_frames:
                if t > births[i] and rng.random() < config.occlusion_rate:
                    length = int(rng.integers(1, config.max_occlusion_len + 1))
                    hidden[i, t : t + length] = True
                    t += length + 1
                else:
                    t += 1

    frames: list[list[ObjectState]] = []
    for t in range(config.n_frames):
        alive = [i for i in range(n_obj) if births[i] <= t]
        boxes = {i: np.array([*centres[i, t], *sizes[i]]) for i in alive}
        objs = []
        for i in alive:
            box = boxes[i]
            visibility = 1.0
            if config.occlusion_rate > 0:
                # larger cy is closer to the camera
                front = np.array([boxes[j] for j in alive if j != i and boxes[j][1] > box[1]]).reshape(-1, 4)
                visibility = 1.0 - _covered_fraction(box, front)
            visible = not hidden[i, t] and visibility >= 0.5
            objs.append(
                ObjectState(
                    identity=i + 1,
                    box=BoundingBox.from_array(box),
                    visible=visible,
                    visibility=visibility if visible else 0.0,
                )
            )
        frames.append(objs)
    return GroundTruthSequence(frames=frames, appearance=appearance, seed=seed, config=config)


class OracleDetector:
    """Emulates a frozen detector: fixed random projections, seeded noise per call."""

    def __init__(self, d_model: int = 64, d_app: int = 16, grid: tuple[int, int] = (8, 8), temperature: float = 20.0):
        if d_model <= 0 or d_model % 16:
            raise ValueError(f"detector width must be a positive multiple of 16, got {d_model}")
        self.d_model = d_model
        self.d_app = d_app
        self.grid = grid
        self.temperature = temperature
        wrng = np.random.default_rng(_DETECTOR_WEIGHT_SEED)
        w_app = wrng.standard_normal((d_model, d_app))
        self.w_app = np.linalg.qr(w_app)[0] if d_app <= d_model else w_app / np.sqrt(d_app)
        g, _ = np.linalg.qr(wrng.standard_normal((d_model, d_model)))
        self.w_geo = g
        self.occupancy_dir = wrng.standard_normal(d_model) / np.sqrt(d_model) * 2.0
        self.background = wrng.standard_normal(d_model) / np.sqrt(d_model) * 0.5
        self.positions = encode_grid_positions(grid[0], grid[1], d_model, temperature)

    def geometry(self, box: np.ndarray) -> np.ndarray:
        """Location features: coarse sine code of the box plus its centred coordinates."""
        half = self.d_model // 2
        geo = np.zeros(self.d_model)
        geo[:half] = encode_box_position(box, half, self.temperature) / np.sqrt(2.0)
        geo[half : half + 4] = 4.0 * (np.asarray(box) - 0.5)
        return self.w_geo @ geo

    def _content(self, app: np.ndarray, box: np.ndarray, noise: NoiseConfig) -> np.ndarray:
        return self.w_app @ app + noise.geometry_gain * self.geometry(box)

    def _global_features(self, frame: list[ObjectState], appearance, rng) -> np.ndarray:
        gh, gw = self.grid
        cells = gh * gw
        cy = (np.arange(gh) + 0.5) / gh
        cx = (np.arange(gw) + 0.5) / gw
        gy, gx = np.meshgrid(cy, cx, indexing="ij")
        gx, gy = gx.ravel(), gy.ravel()
        pooled = np.zeros((cells, self.d_app))
        weight = np.zeros(cells)
        for o in frame:
            if not o.visible:
                continue
            b = o.box
            # overlap of each cell with the box, as a fraction of the cell
            ox = np.clip(np.minimum(gx + 0.5 / gw, b.cx + b.w / 2) - np.maximum(gx - 0.5 / gw, b.cx - b.w / 2), 0, None) * gw
            oy = np.clip(np.minimum(gy + 0.5 / gh, b.cy + b.h / 2) - np.maximum(gy - 0.5 / gh, b.cy - b.h / 2), 0, None) * gh
            cover = ox * oy
            pooled += cover[:, None] * appearance[o.identity][None, :]
            weight += cover
        occupancy = np.clip(weight, 0.0, 1.0)
        pooled = pooled / np.maximum(weight, 1.0)[:, None]
        feats = pooled @ self.w_app.T + occupancy[:, None] * self.occupancy_dir[None, :] + self.background[None, :]
        feats += 0.05 * rng.standard_normal(feats.shape)
        return feats

    def detect(self, frame: list[ObjectState], appearance: dict[int, np.ndarray], noise: NoiseConfig, seed) -> FrameObservation:
        rng = np.random.default_rng(seed)
        dets: list[Detection] = []
        for o in frame:
            p_emit = 1.0 - noise.miss_prob if o.visible else noise.invisible_detect_prob
            if rng.random() >= p_emit:
                continue
            box = o.box.as_array() + noise.box_jitter * rng.standard_normal(4)
            box = _valid_box(box)
            app = appearance[o.identity] + noise.app_noise * rng.standard_normal(self.d_app)
            vis = o.visibility if o.visible else 0.3
            score = float(rng.beta(*noise.true_score_ab)) * vis
            dets.append(Detection(BoundingBox.from_array(box), score, self._content(app, box, noise)))
        n_fp = rng.poisson(noise.fp_rate) if noise.fp_rate > 0 else 0
        for _ in range(n_fp):
            w, h = rng.uniform(0.05, 0.18, size=2)
            box = _valid_box(np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h]))
            app = rng.standard_normal(self.d_app)
            score = float(rng.beta(*noise.fp_score_ab))
            dets.append(Detection(BoundingBox.from_array(box), score, self._content(app, box, noise)))
        # detector output order carries no identity information
        order = rng.permutation(len(dets))
        dets = [dets[i] for i in order]
        return FrameObservation(dets, self._global_features(frame, appearance, rng), self.positions.copy())


def _valid_box(box: np.ndarray) -> np.ndarray:
    box = box.copy()
    box[2:] = np.clip(box[2:], 1e-3, 1.0)
    box[:2] = np.clip(box[:2], 0.0, 1.0)
    return box


def detect(
    frame: list[ObjectState],
    appearance: dict[int, np.ndarray],
    noise: NoiseConfig,
    seed,
    d_model: int = 64,
    grid: tuple[int, int] = (8, 8),
) -> FrameObservation:
    d_app = len(next(iter(appearance.values()))) if appearance else 16
    return OracleDetector(d_model, d_app, grid).detect(frame, appearance, noise, seed)


def observe_sequence(seq: GroundTruthSequence, noise: NoiseConfig, seed: int, detector: OracleDetector) -> list[FrameObservation]:
    return [detector.detect(frame, seq.appearance, noise, (seed, t)) for t, frame in enumerate(seq.frames)]


def crossing_frames(seq: GroundTruthSequence, threshold: float = 0.5) -> list[tuple[int, int, int]]:
    """Frames where two objects overlap with IoU above ``threshold`` (brute-force scan)."""
    hits = []
    for t, objs in enumerate(seq.frames):
        if len(objs) < 2:
            continue
        m = iou_matrix(np.array([o.box.as_array() for o in objs]), np.array([o.box.as_array() for o in objs]))
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                if m[i, j] > threshold:
                    hits.append((t, objs[i].identity, objs[j].identity))
    return hits
