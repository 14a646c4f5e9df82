"""Learned-vs-IoU association study on held-out crossing sequences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import torch

from .associator.model import Associator, AssociatorConfig
from .baseline import GreedyConfig, greedy_track
from .detsim import NoiseConfig, OracleDetector, SceneConfig, generate_sequence, observe_sequence
from .lifecycle import LifecycleConfig
from .metrics import MetricsReport, combine, evaluate, frame_data, sequence_from_records
from .tracker import TBDQTracker
from .training.loop import TrainConfig, TrainingSample, train


def study_scene(**overrides) -> SceneConfig:
    base = dict(
        n_frames=30,
        motion="crossing",
        n_objects_min=4,
        n_objects_max=6,
        occlusion_rate=0.03,
        speed_min=0.006,
        speed_max=0.015,
    )
    base.update(overrides)
    return SceneConfig(**base)


def study_noise(**overrides) -> NoiseConfig:
    base = dict(box_jitter=0.005, miss_prob=0.05, fp_rate=0.3)
    base.update(overrides)
    return NoiseConfig(**base)


@dataclass
class StudyConfig:
    scene: SceneConfig = field(default_factory=study_scene)
    noise: NoiseConfig = field(default_factory=study_noise)
    associator: AssociatorConfig = field(default_factory=AssociatorConfig)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    baseline: GreedyConfig = field(default_factory=GreedyConfig)
    n_train: int = 40
    train_steps: int = 1200
    lr: float = 1e-3
    p_i: float = 0.1
    p_d: float = 0.1
    train_frames: Optional[int] = None  # shorter training sequences, e.g. one clip
    fixed_detections: bool = False
    test_seeds: tuple[int, ...] = tuple(range(1000, 1020))

    def train_config(self, seed: int) -> TrainConfig:
        epochs = max(1, self.train_steps // self.n_train)
        # same shape as the default schedule: one drop late in training
        return TrainConfig(
            epochs=epochs,
            lr=self.lr,
            lr_milestones=(max(1, round(epochs * 10 / 12)),),
            p_i=self.p_i,
            p_d=self.p_d,
            resample_detections=not self.fixed_detections,
            seed=seed,
        )


@dataclass
class StudyResult:
    seed: int
    tbdq: MetricsReport
    baseline: MetricsReport
    train_seconds: float


def ground_truth(seq) -> dict:
    return {
        t: frame_data([o.identity for o in f if o.visible], [o.box.as_array() for o in f if o.visible])
        for t, f in enumerate(seq.frames)
    }


def train_study_model(cfg: StudyConfig, seed: int, detector: Optional[OracleDetector] = None) -> tuple[Associator, float]:
    detector = detector or OracleDetector(cfg.associator.input_dim, cfg.scene.d_app)
    scene = cfg.scene if cfg.train_frames is None else replace(cfg.scene, n_frames=cfg.train_frames)
    data = []
    for s in range(cfg.n_train):
        seq = generate_sequence(scene, 10 * seed + 5000 + s)
        obs = observe_sequence(seq, cfg.noise, 10 * seed + 7000 + s, detector) if cfg.fixed_detections else None
        data.append(TrainingSample(seq, obs))
    torch.manual_seed(seed)
    model = Associator(cfg.associator)
    t0 = time.time()
    train(model, data, cfg.train_config(seed), detector, cfg.noise)
    return model, time.time() - t0


def evaluate_study(
    model: Optional[Associator], cfg: StudyConfig, detector: Optional[OracleDetector] = None
) -> tuple[Optional[MetricsReport], MetricsReport]:
    """Combined reports for (TBDQ, IoU baseline) over the held-out sequences."""
    detector = detector or OracleDetector(cfg.associator.input_dim, cfg.scene.d_app)
    learned, base = [], []
    for s in cfg.test_seeds:
        seq = generate_sequence(cfg.scene, s)
        obs = observe_sequence(seq, cfg.noise, s, detector)
        gt = ground_truth(seq)
        base.append(evaluate(gt, sequence_from_records(greedy_track(obs, cfg.baseline))))
        if model is not None:
            learned.append(evaluate(gt, sequence_from_records(TBDQTracker(model, cfg.lifecycle).run(obs))))
    return (combine(learned) if model is not None else None), combine(base)


def run_study(cfg: StudyConfig, seed: int) -> StudyResult:
    model, secs = train_study_model(cfg, seed)
    learned, base = evaluate_study(model, cfg)
    return StudyResult(seed, learned, base, secs)
