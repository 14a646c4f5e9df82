"""Box algebra and sinusoidal position encodings.

Boxes are normalized ``(cx, cy, w, h)`` in ``[0, 1]``. Scalar helpers work on
:class:`BoundingBox`; the ``*_t`` variants operate on torch tensors of shape
``(..., 4)`` and are what the associator uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_TEMPERATURE = 20.0
BOX_EPS = 1e-5


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0, 1]: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size outside (0, 1]: {self}")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)

    @property
    def area(self) -> float:
        return self.w * self.h


def clip_box(arr, min_size: float = 1e-3) -> np.ndarray:
    """Clamp a cxcywh array so it describes a valid :class:`BoundingBox`."""
    out = np.asarray(arr, dtype=np.float64).copy()
    out[..., 2:] = np.clip(out[..., 2:], min_size, 1.0)
    out[..., :2] = np.clip(out[..., :2], 0.0, 1.0)
    return out


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def giou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return max(-1.0, min(1.0, inter / union - (enclose - union) / enclose))


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(boxes, -1, 0)
    return np.stack([0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` / ``(m, 4)`` cxcywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    axy = cxcywh_to_xyxy(a)[:, None, :]
    bxy = cxcywh_to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(axy[..., 2], bxy[..., 2]) - np.maximum(axy[..., 0], bxy[..., 0]), 0, None)
    ih = np.clip(np.minimum(axy[..., 3], bxy[..., 3]) - np.maximum(axy[..., 1], bxy[..., 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.clip(np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0), 0.0, 1.0)


def _check_dims(d_model: int, parts: int) -> int:
    if d_model <= 0 or d_model % (2 * parts) != 0:
        raise ValueError(f"d_model={d_model} must be a positive multiple of {2 * parts}")
    return d_model // parts


def _frequencies(n: int, temperature: float) -> np.ndarray:
    i = np.arange(n)
    return temperature ** (2 * (i // 2) / n)


def sine_embed(coords: np.ndarray, n: int, temperature: float) -> np.ndarray:
    """Interleaved sin/cos encoding of each scalar in ``coords`` into ``n`` dims."""
    coords = np.asarray(coords, dtype=np.float64)
    phase = coords[..., None] * (2 * math.pi) / _frequencies(n, temperature)
    out = np.empty_like(phase)
    out[..., 0::2] = np.sin(phase[..., 0::2])
    out[..., 1::2] = np.cos(phase[..., 1::2])
    return out


def encode_box_position(
    box: BoundingBox | np.ndarray, d_model: int, temperature: float = DEFAULT_TEMPERATURE
) -> np.ndarray:
    """Concatenated per-coordinate sine encodings of ``(cx, cy, w, h)``.

    Accepts a single box or an ``(..., 4)`` array; output has ``d_model`` trailing dims.
    """
    n = _check_dims(d_model, 4)
    arr = box.as_array() if isinstance(box, BoundingBox) else np.asarray(box, dtype=np.float64)
    emb = sine_embed(arr, n, temperature)
    return emb.reshape(*arr.shape[:-1], d_model)


def encode_grid_positions(
    grid_h: int, grid_w: int, d_model: int, temperature: float = DEFAULT_TEMPERATURE
) -> np.ndarray:
    """2D sine encoding of cell centres, row-major, ``(grid_h * grid_w, d_model)``."""
    n = _check_dims(d_model, 2)
    ys, xs = np.meshgrid((np.arange(grid_h) + 0.5) / grid_h, (np.arange(grid_w) + 0.5) / grid_w, indexing="ij")
    centres = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    return sine_embed(centres, n, temperature).reshape(-1, d_model)


# -- torch variants -----------------------------------------------------------


def sine_embed_t(boxes: torch.Tensor, d_model: int, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Torch twin of :func:`encode_box_position`; ``boxes`` is ``(..., k)`` with k in {2, 4}."""
    k = boxes.shape[-1]
    n = _check_dims(d_model, k)
    i = torch.arange(n, dtype=boxes.dtype, device=boxes.device)
    freq = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / n)
    phase = boxes[..., None] * (2 * math.pi) / freq
    emb = torch.stack((phase[..., 0::2].sin(), phase[..., 1::2].cos()), dim=-1).flatten(-2)
    return emb.flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = BOX_EPS) -> torch.Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def box_cxcywh_to_xyxy_t(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def generalized_box_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for cxcywh tensors ``(n, 4)`` x ``(m, 4)``."""
    a = box_cxcywh_to_xyxy_t(a)
    b = box_cxcywh_to_xyxy_t(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_c = torch.min(a[:, None, :2], b[None, :, :2])
    rb_c = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return inter / union - (enclose - union) / enclose


def paired_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU for equally sized cxcywh tensors ``(n, 4)``."""
    a = box_cxcywh_to_xyxy_t(a)
    b = box_cxcywh_to_xyxy_t(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    wh_c = torch.max(a[:, 2:], b[:, 2:]) - torch.min(a[:, :2], b[:, :2])
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (enclose - union) / enclose
