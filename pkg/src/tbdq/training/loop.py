"""Clip-wise end-to-end training."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..associator.inputs import prepare_frame
from ..associator.model import Associator, FrameOutput, save_checkpoint
from ..associator.queries import update_history
from ..detsim import FrameObservation, GroundTruthSequence, NoiseConfig, ObjectState, OracleDetector
from .assign import Assignment, LossWeights, assign_labels
from .augment import augment_clip
from .loss import compute_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    clip_length: int = 9
    lr: float = 1.2e-4
    lr_milestones: tuple[int, ...] = (6, 10)
    lr_drop: float = 10.0
    epochs: int = 12
    weight_decay: float = 1e-4
    loss_cls: float = 2.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    p_i: float = 0.1
    p_d: float = 0.1
    max_stride: int = 3
    grad_clip: float = 0.1
    clips_per_sequence: int = 1
    resample_detections: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if not (0.0 <= self.p_i < 1.0 and 0.0 <= self.p_d < 1.0):
            raise ValueError("p_i and p_d must be in [0, 1)")
        self.lr_milestones = tuple(self.lr_milestones)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.loss_cls, self.loss_l1, self.loss_giou)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used during 0-based ``epoch``: dropped by ``lr_drop`` at each milestone."""
    drops = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr / cfg.lr_drop**drops


@dataclass
class TrainingSample:
    sequence: GroundTruthSequence
    observations: Optional[list[FrameObservation]] = None


@dataclass
class _Slot:
    content: torch.Tensor
    box: torch.Tensor
    history: torch.Tensor
    identity: Optional[int]  # None for an inserted negative


@dataclass
class ClipResult:
    loss: torch.Tensor
    breakdown: dict
    assignments: list[Assignment]
    outputs: list[FrameOutput]


def sample_clip(length: int, clip_length: int, max_stride: int, rng: np.random.Generator) -> list[int]:
    """Frame indices of a random contiguous clip with random stride; stride falls back to 1."""
    strides = [s for s in range(1, max_stride + 1) if (clip_length - 1) * s + 1 <= length]
    if not strides:
        raise ValueError(f"sequence of length {length} cannot hold a clip of {clip_length}")
    stride = int(rng.choice(strides))
    span = (clip_length - 1) * stride + 1
    start = int(rng.integers(0, length - span + 1))
    return list(range(start, start + span, stride))


def run_clip(
    model: Associator,
    frames: list[tuple[list[ObjectState], FrameObservation]],
    cfg: TrainConfig,
    aug_seed=0,
    fixed_assignments: Optional[list[Assignment]] = None,
    detach_boxes: bool = True,
) -> ClipResult:
    """Forward a clip with label assignment; gradients flow through track contents over time.

    Propagated track boxes are detached unless ``detach_boxes`` is off, which
    makes the loss an ordinary differentiable function of the parameters
    (used by gradient checks).
    """
    dtype = next(model.parameters()).dtype
    d = model.cfg.d_model
    w = model.cfg.ema_weight
    directives = augment_clip(len(frames), cfg.p_i, cfg.p_d, aug_seed)
    hold = (lambda b: b.detach()) if detach_boxes else (lambda b: b)
    slots: list[_Slot] = []
    outputs, assignments, gts, aux = [], [], [], []
    for k, (objs, obs) in enumerate(frames):
        inputs = prepare_frame(obs, model.cfg, dtype)
        drop = directives[k].dropped(len(slots))
        slots = [s for s, dr in zip(slots, drop) if not (dr and s.identity is not None)]
        if slots:
            tc = torch.stack([s.content for s in slots])
            tb = torch.stack([s.box for s in slots])
            th = torch.stack([s.history for s in slots])
        else:
            tc, tb, th = (torch.zeros((0, d), dtype=dtype), torch.zeros((0, 4), dtype=dtype), torch.zeros((0, d), dtype=dtype))
        out = model.forward_frame(inputs.det_raw, inputs.det_boxes, tc, tb, th, inputs.noisy_raw, inputs.features, inputs.positions)
        gt = {o.identity: o.box.as_array() for o in objs if o.visible}
        carried = [s.identity for s in slots]
        if fixed_assignments is not None:
            asg = fixed_assignments[k]
        else:
            asg = assign_labels(out.logits.detach().numpy(), out.boxes.detach().numpy(), carried, gt, cfg.weights)
        outputs.append(out)
        assignments.append(asg)
        gts.append(gt)
        aux.append((out.aux_logits, out.aux_boxes) if out.aux_logits is not None else None)

        present = {o.identity for o in objs}
        nxt: list[_Slot] = []
        for i, s in enumerate(slots):
            if s.identity is None or s.identity not in present:
                continue
            if s.identity in gt:
                emb = out.embeddings[i]
                nxt.append(_Slot(emb, hold(out.boxes[i]), update_history(emb, s.history, w), s.identity))
            else:
                nxt.append(s)
        for p, g in sorted(asg.newborn.items()):
            emb = out.embeddings[p]
            nxt.append(_Slot(emb, hold(out.boxes[p]), update_history(emb, None, w), g))
        if directives[k].insert:
            bg = [p for p in range(len(slots), out.logits.shape[0]) if p not in asg.pred_to_gt]
            if bg:
                p = max(bg, key=lambda j: float(out.logits[j].detach()))
                emb = out.embeddings[p]
                nxt.append(_Slot(emb, hold(out.boxes[p]), update_history(emb, None, w), None))
        slots = nxt
    loss, breakdown = compute_loss([(o.logits, o.boxes) for o in outputs], assignments, gts, cfg.weights, aux)
    return ClipResult(loss, breakdown, assignments, outputs)


@dataclass
class TrainResult:
    model: Associator
    curve: list[dict] = field(default_factory=list)

    @property
    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.curve:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def train(
    model: Associator,
    dataset: list[TrainingSample],
    cfg: TrainConfig,
    detector: Optional[OracleDetector] = None,
    noise: Optional[NoiseConfig] = None,
    out_dir: Optional[Path] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train ``model`` in place. Deterministic for a fixed ``cfg.seed`` in a single thread."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    detector = detector or OracleDetector(model.cfg.input_dim)
    noise = noise or NoiseConfig()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    model.train()
    step = 0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = lr_at_epoch(cfg, epoch)
        order = [i for i in rng.permutation(len(dataset)) for _ in range(cfg.clips_per_sequence)]
        for idx in order:
            sample = dataset[idx]
            seq = sample.sequence
            frame_ids = sample_clip(len(seq), cfg.clip_length, cfg.max_stride, rng)
            if sample.observations is not None and not cfg.resample_detections:
                obs = [sample.observations[t] for t in frame_ids]
            else:
                det_seed = int(rng.integers(2**31))
                obs = [detector.detect(seq.frames[t], seq.appearance, noise, (det_seed, t)) for t in frame_ids]
            frames = [(seq.frames[t], o) for t, o in zip(frame_ids, obs)]
            res = run_clip(model, frames, cfg, aug_seed=int(rng.integers(2**31)))
            if not torch.isfinite(res.loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            res.loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            row = {"epoch": epoch, "step": step, **{k: res.breakdown[k] for k in ("total", "cls", "l1", "giou", "aux")}}
            result.curve.append(row)
            step += 1
        ep_loss = result.epoch_losses[-1] if result.curve else math.nan
        log.info("epoch %d lr %.2e loss %.4f (%.1fs)", epoch, lr_at_epoch(cfg, epoch), ep_loss, time.time() - t0)
        if callback is not None:
            callback(epoch, ep_loss)
    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "checkpoint.pt", extra={"train": cfg.__dict__})
        write_loss_curve(result.curve, out_dir / "loss_curve.csv")
    return result


def write_loss_curve(curve: list[dict], path) -> None:
    fields = ["epoch", "step", "total", "cls", "l1", "giou", "aux"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in curve:
            writer.writerow(row)
