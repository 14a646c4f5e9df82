"""Query bookkeeping around the associator: filtering, hard negatives, history."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..core import BoundingBox, encode_box_position


@dataclass
class ObjectQuery:
    content: np.ndarray
    box: BoundingBox
    score: float
    kind: Literal["detection", "track"] = "detection"

    def full(self, temperature: float = 20.0) -> np.ndarray:
        """Content plus the sine encoding of the *current* box (never cached)."""
        return self.content + encode_box_position(self.box, len(self.content), temperature)


def filter_detection_queries(dets: list[ObjectQuery], tau_q: float) -> tuple[list[ObjectQuery], list[ObjectQuery]]:
    """Split detections into ``score >= tau_q`` and the rest, preserving order."""
    kept, rejected = [], []
    for q in dets:
        if q.kind != "detection":
            raise ValueError("filter_detection_queries expects detection queries only")
        (kept if q.score >= tau_q else rejected).append(q)
    return kept, rejected


def build_noisy_queries(rejected: list[ObjectQuery], m: int, d_model: int) -> np.ndarray:
    """Contents of the ``m`` highest-scoring rejected queries, zero-padded to ``m`` rows."""
    out = np.zeros((m, d_model))
    if m == 0:
        return out
    ranked = sorted(rejected, key=lambda q: -q.score)[:m]
    for i, q in enumerate(ranked):
        out[i] = q.content
    return out


def noisy_indices(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the top-``m`` scores, descending; stable for ties."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:m]


def update_history(current, previous, w: float):
    """EMA of track content: birth copies the current value, later steps blend with weight ``w``."""
    if not 0.0 < w <= 1.0:
        raise ValueError(f"EMA weight must be in (0, 1], got {w}")
    if previous is None:
        return current.clone() if hasattr(current, "clone") else np.array(current, dtype=np.float64, copy=True)
    if tuple(current.shape) != tuple(previous.shape):
        raise ValueError(f"history shape {tuple(previous.shape)} does not match {tuple(current.shape)}")
    return w * current + (1.0 - w) * previous
