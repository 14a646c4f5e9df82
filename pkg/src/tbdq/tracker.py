"""Running a trained associator over a sequence of observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .associator.inputs import prepare_frame
from .associator.model import Associator
from .detsim import FrameObservation
from .lifecycle import LifecycleConfig, OutputRecord, Prediction, TrackManager


@dataclass
class AttentionDump:
    frame: int
    track_ids: list[int]
    bii_det: np.ndarray  # (n_det, n_det + n_track), head-averaged
    bii_track: np.ndarray  # (n_track, n_det + n_track)


@dataclass
class TBDQTracker:
    model: Associator
    cfg: LifecycleConfig = field(default_factory=LifecycleConfig)
    record_attention: bool = False

    def __post_init__(self):
        self.model.eval()
        self.manager = TrackManager(self.cfg)
        self.attention: list[AttentionDump] = []
        self.frame_index = 0

    def reset(self) -> None:
        self.manager = TrackManager(self.cfg)
        self.attention = []
        self.frame_index = 0

    @torch.no_grad()
    def step(self, obs: FrameObservation) -> list[OutputRecord]:
        dtype = next(self.model.parameters()).dtype
        inputs = prepare_frame(obs, self.model.cfg, dtype)
        live = self.manager.live()
        d = self.model.cfg.d_model
        tc = torch.as_tensor(np.array([t.content for t in live]).reshape(-1, d), dtype=dtype)
        tb = torch.as_tensor(np.array([t.box for t in live]).reshape(-1, 4), dtype=dtype)
        th = torch.as_tensor(np.array([t.history for t in live]).reshape(-1, d), dtype=dtype)
        out = self.model.forward_frame(
            inputs.det_raw, inputs.det_boxes, tc, tb, th, inputs.noisy_raw, inputs.features, inputs.positions
        )
        scores = out.scores.numpy().astype(np.float64)
        boxes = out.boxes.numpy().astype(np.float64)
        emb = out.embeddings.numpy().astype(np.float64)
        preds = [
            Prediction(boxes[i], float(scores[i]), emb[i], "track" if i < len(live) else "detection")
            for i in range(len(scores))
        ]
        if self.record_attention and live and len(inputs.kept):
            self.attention.append(
                AttentionDump(
                    self.frame_index,
                    [t.id for t in live],
                    out.attention["bii_det"].mean(0).numpy(),
                    out.attention["bii_track"].mean(0).numpy(),
                )
            )
        records = self.manager.step(preds, self.frame_index)
        self.frame_index += 1
        return records

    def run(self, observations: list[FrameObservation]) -> list[OutputRecord]:
        self.reset()
        records: list[OutputRecord] = []
        for obs in observations:
            records.extend(self.step(obs))
        return records
