"""Label assignment for clip-wise training.

Track queries keep the identity they were bound to; identities without a
track query are matched to detection-query predictions by a minimum-cost
bipartite matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..core import cxcywh_to_xyxy

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class Assignment:
    n_queries: int
    n_tracks: int
    pred_to_gt: dict[int, int] = field(default_factory=dict)

    def target_of(self, idx: int) -> Optional[int]:
        return self.pred_to_gt.get(idx)

    @property
    def newborn(self) -> dict[int, int]:
        return {p: g for p, g in self.pred_to_gt.items() if p >= self.n_tracks}


def _giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, bx = cxcywh_to_xyxy(a)[:, None], cxcywh_to_xyxy(b)[None]
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    ew = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    eh = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def matching_cost(pred_logits: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray, w: LossWeights) -> np.ndarray:
    """``(n_pred, n_gt)`` cost: focal class cost + weighted L1 + weighted (1 - GIoU)."""
    p = 1.0 / (1.0 + np.exp(-np.asarray(pred_logits, dtype=np.float64)))
    neg = (1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * -np.log(1 - p + 1e-8)
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(p + 1e-8)
    cls = (pos - neg)[:, None]
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    giou = _giou_matrix(pred_boxes, gt_boxes)
    return w.cls * cls + w.l1 * l1 + w.giou * (1.0 - giou)


def min_cost_matching(cost: np.ndarray) -> list[tuple[int, int]]:
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def assign_labels(
    pred_logits: np.ndarray,
    pred_boxes: np.ndarray,
    carried: list[Optional[int]],
    gt_frame: dict[int, np.ndarray],
    weights: LossWeights = LossWeights(),
) -> Assignment:
    """Bind predictions of one frame to ground-truth identities.

    ``carried[i]`` is the identity bound to track query ``i`` (``None`` for an
    inserted negative). ``gt_frame`` maps visible identities to cxcywh boxes.
    """
    n_tracks = len(carried)
    bound = [g for g in carried if g is not None]
    if len(bound) != len(set(bound)):
        raise ValueError("an identity is bound to more than one track query")
    asg = Assignment(n_queries=len(pred_logits), n_tracks=n_tracks)
    for i, g in enumerate(carried):
        if g is not None and g in gt_frame:
            asg.pred_to_gt[i] = g
    newborn = sorted(g for g in gt_frame if g not in set(bound))
    n_det = len(pred_logits) - n_tracks
    if newborn and n_det > 0:
        gt_boxes = np.array([gt_frame[g] for g in newborn])
        cost = matching_cost(pred_logits[n_tracks:], pred_boxes[n_tracks:], gt_boxes, weights)
        for r, c in min_cost_matching(cost):
            asg.pred_to_gt[n_tracks + r] = newborn[c]
    return asg
