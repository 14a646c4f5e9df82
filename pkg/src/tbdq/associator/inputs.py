"""Turning a detector observation into associator tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..detsim import FrameObservation
from .model import AssociatorConfig


@dataclass
class FrameInputs:
    kept: np.ndarray  # indices into the observation's detections
    det_raw: torch.Tensor
    det_boxes: torch.Tensor
    det_scores: np.ndarray
    noisy_raw: torch.Tensor  # candidate hard negatives, highest score first
    features: torch.Tensor
    positions: torch.Tensor


def prepare_frame(obs: FrameObservation, cfg: AssociatorConfig, dtype=torch.float32) -> FrameInputs:
    scores = obs.scores
    kept = np.flatnonzero(scores >= cfg.tau_q)
    pool = np.flatnonzero(scores < cfg.tau_q) if cfg.noisy_pool == "rejected" else np.arange(len(scores))
    pool = pool[np.argsort(-scores[pool], kind="stable")]
    contents = obs.contents
    boxes = obs.boxes
    return FrameInputs(
        kept=kept,
        det_raw=torch.as_tensor(contents[kept], dtype=dtype),
        det_boxes=torch.as_tensor(boxes[kept], dtype=dtype),
        det_scores=scores[kept],
        noisy_raw=torch.as_tensor(contents[pool], dtype=dtype),
        features=torch.as_tensor(obs.features, dtype=dtype),
        positions=torch.as_tensor(obs.positions, dtype=dtype),
    )
