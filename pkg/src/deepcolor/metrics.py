"""Instance segmentation metrics: Dice, symmetric best Dice, |DiC|, foreground IoU, AP50.

Conventions where the usual definitions are silent:
  * dice of two empty sets is 1;
  * best_dice(P, Q) is 1 when both are empty and 0 when exactly one is;
  * ap50 is 1 when there is neither ground truth nor prediction, 0 when only one side is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    total = a.size + b.size
    if total == 0:
        return 1.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    return 2.0 * inter / total


def _overlaps(p_sets: Sequence[np.ndarray], q_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Intersection counts, pred x gt."""
    out = np.zeros((len(p_sets), len(q_sets)))
    if not p_sets or not q_sets:
        return out
    q_all = np.concatenate([np.asarray(q, dtype=np.int64) for q in q_sets])
    if np.unique(q_all).size != q_all.size:
        for i, p in enumerate(p_sets):
            for j, q in enumerate(q_sets):
                out[i, j] = np.intersect1d(p, q, assume_unique=True).size
        return out
    size = max(int(q_all.max()) if q_all.size else 0,
               max((int(np.max(p)) for p in p_sets if len(p)), default=0)) + 1
    owner = np.full(size, -1, dtype=np.int64)
    for j, q in enumerate(q_sets):
        owner[np.asarray(q, dtype=np.int64)] = j
    for i, p in enumerate(p_sets):
        o = owner[np.asarray(p, dtype=np.int64)]
        out[i] = np.bincount(o[o >= 0], minlength=len(q_sets))
    return out


def dice_matrix(p_sets: Sequence[np.ndarray], q_sets: Sequence[np.ndarray]) -> np.ndarray:
    ov = _overlaps(p_sets, q_sets)
    sp = np.array([len(p) for p in p_sets], dtype=float)
    sq = np.array([len(q) for q in q_sets], dtype=float)
    denom = sp[:, None] + sq[None, :]
    return np.divide(2.0 * ov, denom, out=np.ones_like(ov), where=denom > 0)


def _best_from_matrix(d: np.ndarray) -> float:
    if d.shape[0] == 0:
        return 1.0 if d.shape[1] == 0 else 0.0
    if d.shape[1] == 0:
        return 0.0
    return float(d.max(axis=1).mean())


def best_dice(p_sets: Sequence[np.ndarray], q_sets: Sequence[np.ndarray]) -> float:
    """Mean over ``p`` of the best Dice against any ``q``."""
    return _best_from_matrix(dice_matrix(p_sets, q_sets))


def sbd(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    d = dice_matrix(pred, gt)
    return min(_best_from_matrix(d), _best_from_matrix(d.T))


def sbd_from_overlaps(ov: np.ndarray, pred_sizes: np.ndarray, gt_sizes: np.ndarray) -> float:
    """SBD given a precomputed overlap-count matrix (pred x gt)."""
    denom = pred_sizes[:, None] + gt_sizes[None, :]
    d = np.divide(2.0 * ov, denom, out=np.ones_like(ov, dtype=float), where=denom > 0)
    return min(_best_from_matrix(d), _best_from_matrix(d.T))


def dic(pred_count: int, gt_count: int) -> int:
    return abs(int(pred_count) - int(gt_count))


def foreground_iou(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    p = np.asarray(pred_labels) > 0
    g = np.asarray(gt_labels) > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def iou_matrix(p_sets: Sequence[np.ndarray], q_sets: Sequence[np.ndarray]) -> np.ndarray:
    ov = _overlaps(p_sets, q_sets)
    sp = np.array([len(p) for p in p_sets], dtype=float)
    sq = np.array([len(q) for q in q_sets], dtype=float)
    union = sp[:, None] + sq[None, :] - ov
    return np.divide(ov, union, out=np.zeros_like(ov), where=union > 0)


def undersegmentation_events(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], thr: float = 0.25) -> int:
    """Number of predicted instances that cover two or more ground-truth instances at IoU >= ``thr`` each."""
    if not len(pred) or not len(gt):
        return 0
    return int(((iou_matrix(pred, gt) >= thr).sum(axis=1) >= 2).sum())


def match_detections(scores: Sequence[float], ious: np.ndarray, thr: float = 0.5) -> np.ndarray:
    """Greedy matching in descending confidence; returns a TP flag per prediction in sorted order."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        if ious.shape[1] == 0:
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            tp[rank] = True
    return tp


def average_precision(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve.

    ``tp`` flags must be in descending-score order (as returned by
    :func:`match_detections`).
    """
    n_pred = len(tp)
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    if n_pred == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap50(pred: Sequence[np.ndarray], scores: Sequence[float], gt: Sequence[np.ndarray]) -> float:
    tp = match_detections(scores, iou_matrix(pred, gt))
    return average_precision(np.sort(np.asarray(scores, dtype=float))[::-1], tp, len(gt))


def pooled_ap50(images: Sequence[tuple[Sequence[np.ndarray], Sequence[float], Sequence[np.ndarray]]]) -> float:
    """AP50 over a dataset: matching per image, ranking pooled across images."""
    all_scores, all_tp, n_gt = [], [], 0
    for pred, scores, gt in images:
        scores = np.asarray(scores, dtype=float)
        tp = match_detections(scores, iou_matrix(pred, gt))
        all_scores.append(scores[np.argsort(-scores, kind="stable")])
        all_tp.append(tp)
        n_gt += len(gt)
    if not all_scores:
        return 1.0
    s = np.concatenate(all_scores)
    t = np.concatenate(all_tp)
    order = np.argsort(-s, kind="stable")
    return average_precision(s[order], t[order], n_gt)


@dataclass
class EvalReport:
    names: list[str] = field(default_factory=list)
    sbd: list[float] = field(default_factory=list)
    dic: list[int] = field(default_factory=list)
    fg_iou: list[float] = field(default_factory=list)
    ap50: float = 0.0

    @property
    def mean_sbd(self) -> float:
        return float(np.mean(self.sbd)) if self.sbd else 0.0

    @property
    def mean_abs_dic(self) -> float:
        return float(np.mean(self.dic)) if self.dic else 0.0

    @property
    def mean_fg_iou(self) -> float:
        return float(np.mean(self.fg_iou)) if self.fg_iou else 0.0

    def summary(self) -> dict:
        return {"images": len(self.names), "mean_sbd": self.mean_sbd, "mean_abs_dic": self.mean_abs_dic,
                "fg_iou": self.mean_fg_iou, "ap50": self.ap50}


def _sets(labels: np.ndarray) -> list[np.ndarray]:
    flat = np.asarray(labels).reshape(-1)
    order = np.argsort(flat, kind="stable")
    ids, starts = np.unique(flat[order], return_index=True)
    bounds = list(starts[1:]) + [flat.size]
    return [np.sort(order[s:e]) for k, s, e in zip(ids, starts, bounds) if k > 0]


def evaluate(pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray],
             confidences: Optional[Sequence[Sequence[float]]] = None,
             names: Optional[Sequence[str]] = None) -> EvalReport:
    """Evaluate label maps pairwise. Missing confidences count as 1.0 for every instance."""
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"{len(pred_maps)} predictions vs {len(gt_maps)} ground-truth maps")
    rep = EvalReport()
    ap_items = []
    for i, (p, g) in enumerate(zip(pred_maps, gt_maps)):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"image {i}: prediction {p.shape} and ground truth {g.shape} differ")
        ps, gs = _sets(p), _sets(g)
        rep.names.append(names[i] if names is not None else f"{i:04d}")
        rep.sbd.append(sbd(ps, gs))
        rep.dic.append(dic(len(ps), len(gs)))
        rep.fg_iou.append(foreground_iou(p, g))
        sc = list(confidences[i]) if confidences is not None else [1.0] * len(ps)
        if len(sc) != len(ps):
            raise ValueError(f"image {i}: {len(sc)} confidences for {len(ps)} instances")
        ap_items.append((ps, sc, gs))
    rep.ap50 = pooled_ap50(ap_items)
    return rep
