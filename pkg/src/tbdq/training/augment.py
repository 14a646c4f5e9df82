"""Track-query insertion/dropout directives for a training clip."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FrameDirective:
    drop: np.ndarray  # bool per track-query slot, in slot order
    insert: bool

    def dropped(self, n_slots: int) -> np.ndarray:
        return self.drop[:n_slots]


def augment_clip(n_frames: int, p_i: float, p_d: float, seed, max_slots: int = 64) -> list[FrameDirective]:
    """Per-frame directives: drop each live track slot with ``p_d``, insert a negative with ``p_i``.

    Directives depend only on ``(n_frames, p_i, p_d, seed, max_slots)``.
    """
    if not (0.0 <= p_i < 1.0 and 0.0 <= p_d <= 1.0):
        raise ValueError("augmentation probabilities out of range")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_frames):
        drop = rng.random(max_slots) < p_d
        insert = bool(rng.random() < p_i)
        out.append(FrameDirective(drop, insert))
    return out
