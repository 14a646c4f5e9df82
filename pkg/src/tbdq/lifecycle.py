"""Inference-time tracklet management.

A tracklet stays active while its decoded score is at least ``tau_n``; below
that it turns inactive with its box and history frozen, and after ``T``
consecutive inactive frames it is removed. Detection-query predictions
scoring at least ``tau_e`` open new tracklets.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .associator.queries import update_history
from .core import iou_matrix


class TrackState(str, enum.Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"
    REMOVED = "removed"


@dataclass
class LifecycleConfig:
    tau_n: float = 0.5
    max_inactive: int = 20
    tau_e: float = 0.5
    ema_weight: float = 0.7
    dedup_iou: Optional[float] = None  # guard rail against duplicate births, off by default

    def __post_init__(self):
        if not 0.0 < self.tau_n < 1.0:
            raise ValueError("tau_n must be in (0, 1)")
        if self.max_inactive < 1:
            raise ValueError("max_inactive must be >= 1")
        if not 0.0 < self.tau_e < 1.0:
            raise ValueError("tau_e must be in (0, 1)")
        if not 0.0 < self.ema_weight <= 1.0:
            raise ValueError("ema_weight must be in (0, 1]")


@dataclass
class Prediction:
    box: np.ndarray
    score: float
    embedding: np.ndarray
    source: str  # "track" or "detection"


@dataclass
class Tracklet:
    id: int
    state: TrackState
    content: np.ndarray
    box: np.ndarray
    history: np.ndarray
    score: float
    birth_frame: int
    miss_count: int = 0


@dataclass
class OutputRecord:
    frame: int
    id: int
    box: np.ndarray
    score: float


def _check_alignment(live: list[Tracklet], predictions: list[Prediction]) -> None:
    n = len(live)
    if len(predictions) < n:
        raise ValueError(f"{len(predictions)} predictions for {n} live tracklets")
    if any(p.source != "track" for p in predictions[:n]) or any(p.source != "detection" for p in predictions[n:]):
        raise ValueError("predictions must be ordered as track queries followed by detection queries")


def step_lifecycle(
    tracklets: list[Tracklet],
    predictions: list[Prediction],
    frame_index: int,
    cfg: LifecycleConfig,
    next_id: int,
) -> tuple[list[Tracklet], list[OutputRecord], int]:
    """Advance every tracklet by one frame.

    ``predictions`` must line up with :func:`propagate_queries` of ``tracklets``
    followed by the frame's detection queries. Returns the updated tracklets
    (including ones removed this frame), the active output records and the
    next free id.
    """
    live = [t for t in tracklets if t.state != TrackState.REMOVED]
    live.sort(key=lambda t: t.id)
    _check_alignment(live, predictions)
    out: list[Tracklet] = []
    for trk, pred in zip(live, predictions):
        if pred.score >= cfg.tau_n:
            out.append(
                Tracklet(
                    id=trk.id,
                    state=TrackState.ACTIVE,
                    content=pred.embedding,
                    box=pred.box,
                    history=update_history(pred.embedding, trk.history, cfg.ema_weight),
                    score=pred.score,
                    birth_frame=trk.birth_frame,
                )
            )
        else:
            misses = trk.miss_count + 1
            out.append(
                Tracklet(
                    id=trk.id,
                    state=TrackState.REMOVED if misses >= cfg.max_inactive else TrackState.INACTIVE,
                    content=trk.content,
                    box=trk.box,
                    history=trk.history,
                    score=pred.score,
                    birth_frame=trk.birth_frame,
                    miss_count=misses,
                )
            )
    active_boxes = np.array([t.box for t in out if t.state == TrackState.ACTIVE]).reshape(-1, 4)
    for pred in predictions[len(live):]:
        if pred.score < cfg.tau_e:
            continue
        if cfg.dedup_iou is not None and len(active_boxes):
            if iou_matrix(pred.box[None], active_boxes).max() >= cfg.dedup_iou:
                continue
        out.append(
            Tracklet(
                id=next_id,
                state=TrackState.ACTIVE,
                content=pred.embedding,
                box=pred.box,
                history=update_history(pred.embedding, None, cfg.ema_weight),
                score=pred.score,
                birth_frame=frame_index,
            )
        )
        active_boxes = np.vstack([active_boxes, pred.box[None]])
        next_id += 1
    records = [OutputRecord(frame_index, t.id, t.box, t.score) for t in out if t.state == TrackState.ACTIVE]
    return out, records, next_id


def propagate_queries(tracklets: list[Tracklet]) -> list[Tracklet]:
    """Non-removed tracklets in id order; inactive ones carry their frozen content and box."""
    return sorted((t for t in tracklets if t.state != TrackState.REMOVED), key=lambda t: t.id)


@dataclass
class TrackManager:
    cfg: LifecycleConfig = field(default_factory=LifecycleConfig)
    tracklets: list[Tracklet] = field(default_factory=list)
    next_id: int = 1

    def live(self) -> list[Tracklet]:
        return propagate_queries(self.tracklets)

    def step(self, predictions: list[Prediction], frame_index: int) -> list[OutputRecord]:
        updated, records, self.next_id = step_lifecycle(self.tracklets, predictions, frame_index, self.cfg, self.next_id)
        self.tracklets = [t for t in updated if t.state != TrackState.REMOVED]
        return records
