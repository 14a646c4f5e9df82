"""Debug figures: per-frame box overlays and BII attention heatmaps (PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .metrics import FrameData  # noqa: E402
from .tracker import AttentionDump  # noqa: E402

_CMAP = plt.get_cmap("tab20")


def _draw(ax, frame: Optional[FrameData], dashed: bool, label: bool) -> None:
    if frame is None:
        return
    ids, boxes = frame
    for i, (cx, cy, w, h) in zip(ids, boxes):
        color = "0.5" if dashed else _CMAP(int(i) % 20)
        ax.add_patch(
            Rectangle((cx - w / 2, cy - h / 2), w, h, fill=False, lw=1.0 if dashed else 1.6, ls="--" if dashed else "-", ec=color)
        )
        if label:
            ax.text(cx - w / 2, cy - h / 2, str(int(i)), color=color, fontsize=7, va="bottom")


def plot_overlays(
    results: Mapping[int, FrameData],
    gt: Optional[Mapping[int, FrameData]],
    out_dir,
    width: float,
    height: float,
    frames: Optional[Iterable[int]] = None,
) -> list[Path]:
    """One PNG per frame: ground truth dashed grey, results coloured by track id.

    Boxes are cxcywh in the same units as ``width``/``height`` (pixels for MOT files).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = set(results) | set(gt or {})
    frames = sorted(keys) if frames is None else list(frames)
    written = []
    for f in frames:
        fig, ax = plt.subplots(figsize=(6.4, 6.4 * height / width))
        ax.set_xlim(0, width)
        ax.set_ylim(height, 0)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
        _draw(ax, (gt or {}).get(f), dashed=True, label=False)
        _draw(ax, results.get(f), dashed=False, label=True)
        ax.set_title(f"frame {f + 1}", fontsize=9)
        path = out_dir / f"frame_{f + 1:05d}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def plot_attention(dumps: Iterable[AttentionDump], out_dir) -> list[Path]:
    """Heatmaps of head-averaged BII weights, one PNG per recorded frame.

    Left: detection queries over [detections; tracks]. Right: track queries over
    [detections; histories].
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for d in dumps:
        n_t = len(d.track_ids)
        n_d = d.bii_det.shape[0]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        panels = (
            (axes[0], d.bii_det, [f"d{j}" for j in range(n_d)], [f"d{j}" for j in range(n_d)] + [f"t{i}" for i in d.track_ids]),
            (axes[1], d.bii_track, [f"t{i}" for i in d.track_ids], [f"d{j}" for j in range(n_d)] + [f"h{i}" for i in d.track_ids]),
        )
        for ax, w, rows, cols in panels:
            im = ax.imshow(w, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
            ax.set_yticks(range(len(rows)), rows, fontsize=7)
            ax.set_xticks(range(len(cols)), cols, fontsize=7, rotation=90)
        axes[0].set_title("detection update", fontsize=9)
        axes[1].set_title("track update", fontsize=9)
        fig.colorbar(im, ax=axes, fraction=0.03)
        fig.suptitle(f"frame {d.frame + 1}  ({n_t} tracks)", fontsize=9)
        path = out_dir / f"attention_{d.frame + 1:05d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
