"""IoU-only tracking-by-detection reference (no motion model, no appearance)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import iou_matrix
from .detsim import FrameObservation
from .lifecycle import OutputRecord


@dataclass
class GreedyConfig:
    iou_gate: float = 0.3
    max_age: int = 20
    det_threshold: float = 0.3
    tau_e: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_gate < 1.0:
            raise ValueError("iou_gate must be in (0, 1)")
        if self.max_age < 0:
            raise ValueError("max_age must be non-negative")


@dataclass
class _Track:
    id: int
    box: np.ndarray
    age: int = 0


@dataclass
class IoUTracker:
    cfg: GreedyConfig = field(default_factory=GreedyConfig)

    def __post_init__(self):
        self.tracks: list[_Track] = []
        self.next_id = 1
        self.frame_index = 0

    def step(self, obs: FrameObservation) -> list[OutputRecord]:
        keep = obs.scores >= self.cfg.det_threshold
        boxes, scores = obs.boxes[keep], obs.scores[keep]
        matched_t: set[int] = set()
        matched_d: set[int] = set()
        records = []
        if self.tracks and len(boxes):
            ious = iou_matrix(np.array([t.box for t in self.tracks]), boxes)
            rows, cols = linear_sum_assignment(ious, maximize=True)
            for r, c in zip(rows, cols):
                if ious[r, c] >= self.cfg.iou_gate:
                    trk = self.tracks[r]
                    trk.box, trk.age = boxes[c], 0
                    matched_t.add(r)
                    matched_d.add(c)
                    records.append(OutputRecord(self.frame_index, trk.id, boxes[c], float(scores[c])))
        survivors = []
        for i, trk in enumerate(self.tracks):
            if i not in matched_t:
                trk.age += 1
            if trk.age <= self.cfg.max_age:
                survivors.append(trk)
        self.tracks = survivors
        for c in range(len(boxes)):
            if c not in matched_d and scores[c] >= self.cfg.tau_e:
                self.tracks.append(_Track(self.next_id, boxes[c]))
                records.append(OutputRecord(self.frame_index, self.next_id, boxes[c], float(scores[c])))
                self.next_id += 1
        self.frame_index += 1
        return sorted(records, key=lambda r: r.id)


def greedy_track(observations: list[FrameObservation], cfg: GreedyConfig | None = None) -> list[OutputRecord]:
    tracker = IoUTracker(cfg or GreedyConfig())
    out: list[OutputRecord] = []
    for obs in observations:
        out.extend(tracker.step(obs))
    return out
