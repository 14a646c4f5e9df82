"""Clip-level loss with collective averaging over matched objects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from ..core import paired_giou_t
from .assign import FOCAL_ALPHA, FOCAL_GAMMA, Assignment, LossWeights


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    p = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * loss


@dataclass
class FrameTerms:
    cls: Tensor
    l1: Tensor
    giou: Tensor
    n_matched: int


def frame_terms(logits: Tensor, boxes: Tensor, asg: Assignment, gt_frame: dict[int, np.ndarray]) -> FrameTerms:
    """Summed (not averaged) focal, L1 and 1-GIoU terms for one frame."""
    targets = torch.zeros_like(logits)
    idx = sorted(asg.pred_to_gt)
    if idx:
        targets[idx] = 1.0
    cls = sigmoid_focal_loss(logits, targets).sum()
    if not idx:
        zero = logits.sum() * 0.0
        return FrameTerms(cls, zero, zero, 0)
    src = boxes[idx]
    tgt = torch.as_tensor(np.array([gt_frame[asg.pred_to_gt[i]] for i in idx]), dtype=boxes.dtype)
    l1 = (src - tgt).abs().sum()
    giou = (1.0 - paired_giou_t(src, tgt)).sum()
    return FrameTerms(cls, l1, giou, len(idx))


def compute_loss(
    frames: list[tuple[Tensor, Tensor]],
    assignments: list[Assignment],
    gt_frames: list[dict[int, np.ndarray]],
    weights: LossWeights = LossWeights(),
    aux: list[tuple[Tensor, Tensor] | None] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Total clip loss and a per-term breakdown.

    ``frames`` holds ``(logits, boxes)`` per frame; ``aux`` the same for the
    alignment-stage outputs (``None`` where that stage was skipped). All terms
    are divided by the number of matched objects over the whole clip.
    """
    main = [frame_terms(lg, bx, a, g) for (lg, bx), a, g in zip(frames, assignments, gt_frames)]
    n = sum(t.n_matched for t in main)
    denom = float(max(n, 1))

    def total(terms: list[FrameTerms]) -> tuple[Tensor, Tensor, Tensor]:
        cls = torch.stack([t.cls for t in terms]).sum() if terms else torch.zeros(())
        l1 = torch.stack([t.l1 for t in terms]).sum() if terms else torch.zeros(())
        giou = torch.stack([t.giou for t in terms]).sum() if terms else torch.zeros(())
        return cls, l1, giou

    cls, l1, giou = total(main)
    loss = (weights.cls * cls + weights.l1 * l1 + weights.giou * giou) / denom
    aux_loss = torch.zeros((), dtype=loss.dtype)
    if aux is not None:
        aux_terms = [frame_terms(p[0], p[1], a, g) for p, a, g in zip(aux, assignments, gt_frames) if p is not None]
        if aux_terms:
            a_cls, a_l1, a_giou = total(aux_terms)
            aux_loss = (weights.cls * a_cls + weights.l1 * a_l1 + weights.giou * a_giou) / denom
    loss = loss + aux_loss
    breakdown = {
        "total": float(loss.detach()),
        "cls": float(weights.cls * cls.detach() / denom),
        "l1": float(weights.l1 * l1.detach() / denom),
        "giou": float(weights.giou * giou.detach() / denom),
        "aux": float(aux_loss.detach()),
        "matched": n,
    }
    return loss, breakdown
