"""Tracking metrics: CLEAR (MOTA/FP/FN/IDSW), IDF1 and HOTA (DetA/AssA).

Sequences are given as ``{frame: (ids, boxes)}`` with ``boxes`` in cxcywh
(any consistent unit; only IoU is used). Frames absent from a mapping are
treated as empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import iou_matrix

HOTA_ALPHAS = np.arange(0.05, 0.99, 0.05)
CLEAR_THRESHOLD = 0.5
_EPS = np.finfo(float).eps

FrameData = tuple[np.ndarray, np.ndarray]
Sequence = Mapping[int, FrameData]


def frame_data(ids: Iterable[int], boxes) -> FrameData:
    ids = np.asarray(list(ids), dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return ids, boxes


def _check_unique(ids: np.ndarray, what: str, frame=None) -> None:
    if len(np.unique(ids)) != len(ids):
        raise ValueError(f"duplicate {what} ids in frame {frame}: {ids.tolist()}")


def match_frame(
    gt_ids: np.ndarray,
    gt_boxes: np.ndarray,
    pr_ids: np.ndarray,
    pr_boxes: np.ndarray,
    alpha: float = CLEAR_THRESHOLD,
) -> list[tuple[int, int]]:
    """Maximum-cardinality, then maximum-total-IoU matching among pairs with IoU >= ``alpha``.

    Returns ``(gt_index, pred_index)`` pairs into the given arrays. Rows and
    columns are sorted by id before solving so ties resolve by id order.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    gt_ids, pr_ids = np.asarray(gt_ids), np.asarray(pr_ids)
    _check_unique(gt_ids, "ground-truth")
    _check_unique(pr_ids, "predicted")
    if len(gt_ids) == 0 or len(pr_ids) == 0:
        return []
    go = np.argsort(gt_ids, kind="stable")
    po = np.argsort(pr_ids, kind="stable")
    ious = iou_matrix(np.asarray(gt_boxes)[go], np.asarray(pr_boxes)[po])
    valid = ious >= alpha - 1e-12
    if not valid.any():
        return []
    # cardinality dominates: each valid pair is worth more than any IoU total
    bonus = float(min(len(go), len(po)) + 1)
    score = np.where(valid, bonus + ious, 0.0)
    rows, cols = linear_sum_assignment(score, maximize=True)
    return sorted((int(go[r]), int(po[c])) for r, c in zip(rows, cols) if valid[r, c])


@dataclass
class ClearResult:
    MOTA: float
    FP: int
    FN: int
    IDSW: int
    GT: int
    TP: int
    mota_defined: bool = True


def clear_metrics(gt: Sequence, pred: Sequence, alpha: float = CLEAR_THRESHOLD) -> ClearResult:
    fp = fn = idsw = n_gt = tp = 0
    last: dict[int, int] = {}
    for f in sorted(set(gt) | set(pred)):
        g_ids, g_boxes = gt.get(f, frame_data([], []))
        p_ids, p_boxes = pred.get(f, frame_data([], []))
        matches = match_frame(g_ids, g_boxes, p_ids, p_boxes, alpha) if len(g_ids) and len(p_ids) else []
        n_gt += len(g_ids)
        tp += len(matches)
        fn += len(g_ids) - len(matches)
        fp += len(p_ids) - len(matches)
        for gi, pj in matches:
            g, p = int(g_ids[gi]), int(p_ids[pj])
            if g in last and last[g] != p:
                idsw += 1
            last[g] = p
    if n_gt == 0:
        return ClearResult(math.nan, fp, fn, idsw, 0, tp, mota_defined=False)
    return ClearResult(1.0 - (fp + fn + idsw) / n_gt, fp, fn, idsw, n_gt, tp)


@dataclass
class IdentityResult:
    IDF1: float
    IDTP: int
    IDFP: int
    IDFN: int


def _trajectory_overlap(gt: Sequence, pred: Sequence, alpha: float):
    g_all = sorted({int(i) for ids, _ in gt.values() for i in ids})
    p_all = sorted({int(i) for ids, _ in pred.values() for i in ids})
    gi = {g: k for k, g in enumerate(g_all)}
    pi = {p: k for k, p in enumerate(p_all)}
    overlap = np.zeros((len(g_all), len(p_all)))
    g_len = np.zeros(len(g_all))
    p_len = np.zeros(len(p_all))
    for f in sorted(set(gt) | set(pred)):
        g_ids, g_boxes = gt.get(f, frame_data([], []))
        p_ids, p_boxes = pred.get(f, frame_data([], []))
        _check_unique(g_ids, "ground-truth", f)
        _check_unique(p_ids, "predicted", f)
        for g in g_ids:
            g_len[gi[int(g)]] += 1
        for p in p_ids:
            p_len[pi[int(p)]] += 1
        if len(g_ids) and len(p_ids):
            ious = iou_matrix(g_boxes, p_boxes)
            for a, b in zip(*np.nonzero(ious >= alpha - 1e-12)):
                overlap[gi[int(g_ids[a])], pi[int(p_ids[b])]] += 1
    return g_all, p_all, overlap, g_len, p_len


def idf1(gt: Sequence, pred: Sequence, alpha: float = CLEAR_THRESHOLD) -> IdentityResult:
    """Global one-to-one trajectory matching maximizing co-detected frames."""
    _, _, overlap, g_len, p_len = _trajectory_overlap(gt, pred, alpha)
    idtp = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        idtp = int(round(overlap[rows, cols].sum()))
    idfn = int(g_len.sum()) - idtp
    idfp = int(p_len.sum()) - idtp
    denom = 2 * idtp + idfp + idfn
    return IdentityResult(2 * idtp / denom if denom else 1.0, idtp, idfp, idfn)


@dataclass
class HotaResult:
    HOTA: float
    DetA: float
    AssA: float
    hota_alpha: np.ndarray
    deta_alpha: np.ndarray
    assa_alpha: np.ndarray
    tp_alpha: np.ndarray
    fn_alpha: np.ndarray
    fp_alpha: np.ndarray
    ass_sum_alpha: np.ndarray  # sum over TPs of per-pair association IoU, for combining
    empty: bool = False


def _hota_from_counts(tp, fn, fp, ass_sum) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    deta = tp / np.maximum(1.0, tp + fn + fp)
    assa = ass_sum / np.maximum(1.0, tp)
    return np.sqrt(deta * assa), deta, assa


def hota(gt: Sequence, pred: Sequence, alphas: np.ndarray = HOTA_ALPHAS) -> HotaResult:
    g_all = sorted({int(i) for ids, _ in gt.values() for i in ids})
    p_all = sorted({int(i) for ids, _ in pred.values() for i in ids})
    n_a = len(alphas)
    n_gt_dets = sum(len(v[0]) for v in gt.values())
    n_pr_dets = sum(len(v[0]) for v in pred.values())
    if n_gt_dets == 0 and n_pr_dets == 0:
        ones = np.ones(n_a)
        z = np.zeros(n_a)
        return HotaResult(1.0, 1.0, 1.0, ones, ones, ones, z, z, z, z, empty=True)
    if n_gt_dets == 0 or n_pr_dets == 0:
        z = np.zeros(n_a)
        tp = np.zeros(n_a)
        fn = np.full(n_a, float(n_gt_dets))
        fp = np.full(n_a, float(n_pr_dets))
        return HotaResult(0.0, 0.0, 0.0, z, z, z, tp, fn, fp, z.copy())
    gi = {g: k for k, g in enumerate(g_all)}
    pi = {p: k for k, p in enumerate(p_all)}
    frames = sorted(set(gt) | set(pred))

    # global alignment between identities, from soft per-frame IoU overlaps
    potential = np.zeros((len(g_all), len(p_all)))
    g_count = np.zeros(len(g_all))
    p_count = np.zeros(len(p_all))
    cache = {}
    for f in frames:
        g_ids, g_boxes = gt.get(f, frame_data([], []))
        p_ids, p_boxes = pred.get(f, frame_data([], []))
        _check_unique(g_ids, "ground-truth", f)
        _check_unique(p_ids, "predicted", f)
        gx = np.array([gi[int(i)] for i in g_ids], dtype=int)
        px = np.array([pi[int(i)] for i in p_ids], dtype=int)
        sim = iou_matrix(g_boxes, p_boxes)
        cache[f] = (gx, px, sim)
        g_count[gx] += 1
        p_count[px] += 1
        if sim.size:
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            soft = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > _EPS)
            potential[np.ix_(gx, px)] += soft
    alignment = potential / np.maximum(_EPS, g_count[:, None] + p_count[None, :] - potential)

    tp = np.zeros(n_a)
    fn = np.zeros(n_a)
    fp = np.zeros(n_a)
    matches = np.zeros((n_a, len(g_all), len(p_all)))
    for f in frames:
        gx, px, sim = cache[f]
        if len(gx) == 0 or len(px) == 0:
            fn += len(gx)
            fp += len(px)
            continue
        score = alignment[np.ix_(gx, px)] * sim
        rows, cols = linear_sum_assignment(score, maximize=True)
        for a, alpha in enumerate(alphas):
            ok = sim[rows, cols] >= alpha - _EPS
            r, c = rows[ok], cols[ok]
            n = len(r)
            tp[a] += n
            fn[a] += len(gx) - n
            fp[a] += len(px) - n
            matches[a, gx[r], px[c]] += 1
    ass_sum = np.zeros(n_a)
    for a in range(n_a):
        m = matches[a]
        ass_iou = m / np.maximum(1.0, g_count[:, None] + p_count[None, :] - m)
        ass_sum[a] = (m * ass_iou).sum()
    h, d, s = _hota_from_counts(tp, fn, fp, ass_sum)
    return HotaResult(float(h.mean()), float(d.mean()), float(s.mean()), h, d, s, tp, fn, fp, ass_sum)


@dataclass
class MetricsReport:
    HOTA: float
    DetA: float
    AssA: float
    MOTA: float
    IDF1: float
    FP: int
    FN: int
    IDSW: int
    GT: int
    IDTP: int = 0
    IDFP: int = 0
    IDFN: int = 0
    hota_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    deta_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    assa_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flags: list[str] = field(default_factory=list)
    _hota_counts: tuple = field(default=(), repr=False)
    _clear_tp: int = field(default=0, repr=False)

    SUMMARY_FIELDS = ("HOTA", "DetA", "AssA", "MOTA", "IDF1", "FP", "FN", "IDSW", "GT")

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS}


def evaluate(gt: Sequence, pred: Sequence) -> MetricsReport:
    c = clear_metrics(gt, pred)
    i = idf1(gt, pred)
    h = hota(gt, pred)
    flags = []
    if not c.mota_defined:
        flags.append("mota_undefined_no_gt")
    if h.empty:
        flags.append("hota_empty_convention")
    return MetricsReport(
        HOTA=h.HOTA,
        DetA=h.DetA,
        AssA=h.AssA,
        MOTA=c.MOTA,
        IDF1=i.IDF1,
        FP=c.FP,
        FN=c.FN,
        IDSW=c.IDSW,
        GT=c.GT,
        IDTP=i.IDTP,
        IDFP=i.IDFP,
        IDFN=i.IDFN,
        hota_alpha=h.hota_alpha,
        deta_alpha=h.deta_alpha,
        assa_alpha=h.assa_alpha,
        flags=flags,
        _hota_counts=(h.tp_alpha, h.fn_alpha, h.fp_alpha, h.ass_sum_alpha),
        _clear_tp=c.TP,
    )


def combine(reports: list[MetricsReport]) -> MetricsReport:
    """Pool several sequences the way benchmark kits do: sum counts, then recompute ratios."""
    if not reports:
        raise ValueError("nothing to combine")
    fp = sum(r.FP for r in reports)
    fn = sum(r.FN for r in reports)
    idsw = sum(r.IDSW for r in reports)
    n_gt = sum(r.GT for r in reports)
    idtp = sum(r.IDTP for r in reports)
    idfp = sum(r.IDFP for r in reports)
    idfn = sum(r.IDFN for r in reports)
    counts = [r._hota_counts for r in reports if r._hota_counts and "hota_empty_convention" not in r.flags]
    if counts:
        tp, hfn, hfp, ass = (sum(c[k] for c in counts) for k in range(4))
        h, d, a = _hota_from_counts(tp, hfn, hfp, ass)
    else:
        h = d = a = np.ones(len(HOTA_ALPHAS))
    denom = 2 * idtp + idfp + idfn
    return MetricsReport(
        HOTA=float(h.mean()),
        DetA=float(d.mean()),
        AssA=float(a.mean()),
        MOTA=1.0 - (fp + fn + idsw) / n_gt if n_gt else math.nan,
        IDF1=2 * idtp / denom if denom else 1.0,
        FP=fp,
        FN=fn,
        IDSW=idsw,
        GT=n_gt,
        IDTP=idtp,
        IDFP=idfp,
        IDFN=idfn,
        hota_alpha=h,
        deta_alpha=d,
        assa_alpha=a,
        flags=[] if n_gt else ["mota_undefined_no_gt"],
    )


def sequence_from_records(records, key_frame="frame", key_id="id", key_box="box") -> dict[int, FrameData]:
    """Group records (objects or dicts with frame/id/box) into the per-frame mapping."""
    grouped: dict[int, tuple[list, list]] = {}
    for r in records:
        get = r.get if isinstance(r, dict) else lambda k, _r=r: getattr(_r, k)
        ids, boxes = grouped.setdefault(int(get(key_frame)), ([], []))
        ids.append(int(get(key_id)))
        boxes.append(np.asarray(get(key_box), dtype=np.float64))
    return {f: frame_data(ids, boxes) for f, (ids, boxes) in grouped.items()}


def format_table(rows: dict[str, MetricsReport]) -> str:
    cols = MetricsReport.SUMMARY_FIELDS
    name_w = max([len("tracker")] + [len(k) for k in rows])
    head = "tracker".ljust(name_w) + "".join(c.rjust(9) for c in cols)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        cells = []
        for c in cols:
            v = getattr(rep, c)
            cells.append(f"{100 * v:9.2f}" if isinstance(v, float) else f"{v:9d}")
        lines.append(name.ljust(name_w) + "".join(cells))
    return "\n".join(lines)
