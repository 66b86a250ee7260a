"""Halo construction, dynamic color assignment and the pseudo-ground-truth log-loss.

Colors are 1-based as in the color maps: color ``c`` lives in channel
``c - 1`` of a probability map, and color 1 is background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import LOG_EPS, Tensor


class LossConfigError(ValueError):
    code = "E_CONFIG"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 21.0
    halo_weight: float = 7.0
    colors: int = 9
    class_color_sets: Optional[Mapping[str, frozenset]] = None
    halo_metric: str = "euclidean"
    background_weight: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise LossConfigError(f"margin must be >= 0, got {self.margin}")
        if self.halo_weight < 0:
            raise LossConfigError(f"halo_weight must be >= 0, got {self.halo_weight}")
        if self.colors < 2:
            raise LossConfigError(f"colors must be >= 2, got {self.colors}")
        if self.halo_metric not in ("euclidean", "chebyshev"):
            raise LossConfigError(f"halo_metric must be 'euclidean' or 'chebyshev', got {self.halo_metric!r}")
        if self.background_weight < 0:
            raise LossConfigError(f"background_weight must be >= 0, got {self.background_weight}")
        if self.class_color_sets is not None:
            sets = {k: frozenset(int(c) for c in v) for k, v in self.class_color_sets.items()}
            used: set[int] = set()
            for cls, s in sets.items():
                if not s:
                    raise LossConfigError(f"class {cls!r} has an empty color set")
                bad = [c for c in s if c < 2 or c > self.colors]
                if bad:
                    raise LossConfigError(f"class {cls!r} uses colors {sorted(bad)} outside 2..{self.colors}")
                if used & s:
                    raise LossConfigError(f"class color sets overlap on colors {sorted(used & s)}")
                used |= s
            object.__setattr__(self, "class_color_sets", sets)

    @property
    def mu(self) -> float:
        return self.halo_weight


def allowed_colors_for(instance_class, cfg: LossConfig) -> tuple[int, ...]:
    if cfg.class_color_sets is None:
        return tuple(range(2, cfg.colors + 1))
    try:
        return tuple(sorted(cfg.class_color_sets[instance_class]))
    except KeyError:
        raise LossConfigError(f"unknown instance class {instance_class!r}") from None


# -- halo -------------------------------------------------------------------


def distance_to_mask(mask: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Exact distance from every pixel to the nearest ``True`` pixel of ``mask``.

    Separable two-pass transform: nearest set pixel within each column, then
    the row-wise lower envelope. Euclidean distances are returned as squared
    values; Chebyshev as plain values. Pixels with no set pixel get ``inf``.
    """
    h, w = mask.shape
    rows = np.arange(h)
    cols = np.arange(w)
    col_d = np.abs(rows[:, None] - rows[None, :]).astype(float)  # (i, i')
    g = np.where(mask[None, :, :], col_d[:, :, None], np.inf).min(axis=1)  # (i, j)
    row_d = np.abs(cols[:, None] - cols[None, :]).astype(float)  # (j, j')
    if metric == "euclidean":
        return (g[:, None, :] ** 2 + row_d[None, :, :] ** 2).min(axis=2)
    if metric == "chebyshev":
        return np.maximum(g[:, None, :], row_d[None, :, :]).min(axis=2)
    raise ValueError(f"unknown metric {metric!r}")


def dilate(mask: np.ndarray, m: float, metric: str = "euclidean") -> np.ndarray:
    """Dilation by a disc (euclidean) or square (chebyshev) of radius ``m``."""
    mask = np.asarray(mask, dtype=bool)
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    if not mask.any():
        return mask.copy()
    r = int(np.floor(m))
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - r, 0), min(ys.max() + r + 1, mask.shape[0])
    x0, x1 = max(xs.min() - r, 0), min(xs.max() + r + 1, mask.shape[1])
    d = distance_to_mask(mask[y0:y1, x0:x1], metric)
    thr = m * m if metric == "euclidean" else m
    out = np.zeros_like(mask)
    out[y0:y1, x0:x1] = d <= thr
    return out


def compute_halo(labels: np.ndarray, k: int, m: float, metric: str = "euclidean") -> np.ndarray:
    """Pixels within distance ``m`` of instance ``k`` but outside it, clipped to the image.

    Pixels of other instances are kept.
    """
    labels = np.asarray(labels)
    inst = labels == k
    if k <= 0 or not inst.any():
        raise KeyError(f"instance id {k} not present in label map")
    return dilate(inst, m, metric) & ~inst


# -- assignment -------------------------------------------------------------


def coloring_scores(logp: np.ndarray, log1m: np.ndarray, inst: np.ndarray,
                    halo: np.ndarray, mu: float) -> np.ndarray:
    """Objective value for every color (index = channel) of one instance.

    ``logp``/``log1m`` are the clipped ``log y`` and ``log(1 - y)`` maps, (C, H, W).
    """
    n_in = inst.sum()
    if n_in == 0:
        raise ValueError("empty instance")
    s = logp[:, inst].sum(axis=1) / n_in
    n_h = halo.sum()
    if n_h and mu:
        s = s + mu * log1m[:, halo].sum(axis=1) / n_h
    return s


def _logs(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    yc = np.clip(y, LOG_EPS, 1.0 - LOG_EPS)
    return np.log(yc), np.log1p(-yc)


def assign_color(y: np.ndarray, instance_pixels: np.ndarray, halo: np.ndarray, mu: float,
                 allowed_colors: Sequence[int]) -> int:
    """Color (1-based) maximizing the coloring objective over ``allowed_colors``; ties go to the lowest."""
    y = np.asarray(y, dtype=float)
    allowed = sorted(int(c) for c in allowed_colors)
    if not allowed:
        raise ValueError("empty allowed color set")
    if allowed[0] < 2 or allowed[-1] > y.shape[0]:
        raise ValueError(f"allowed colors {allowed} outside 2..{y.shape[0]}")
    logp, log1m = _logs(y)
    scores = coloring_scores(logp, log1m, np.asarray(instance_pixels, bool), np.asarray(halo, bool), mu)
    sub = scores[np.array(allowed) - 1]
    return allowed[int(np.argmax(sub))]


@dataclass
class ImageTargets:
    """Per-image halos, cached because they depend only on the labels."""

    labels: np.ndarray
    ids: np.ndarray
    masks: np.ndarray  # (K, H, W) bool
    halos: np.ndarray  # (K, H, W) bool
    classes: Optional[list] = None


def prepare_targets(labels: np.ndarray, cfg: LossConfig,
                    instance_classes: Optional[Mapping[int, object]] = None) -> ImageTargets:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be (H, W), got shape {labels.shape}")
    if labels.size and labels.min() < 0:
        raise ValueError("labels contain negative ids")
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if ids.size and ids[-1] != ids.size:
        missing = sorted(set(range(1, int(ids[-1]) + 1)) - set(ids.tolist()))
        raise ValueError(f"instance ids {missing} have no pixels")
    masks = labels[None] == ids[:, None, None]
    halos = np.stack([dilate(mk, cfg.margin, cfg.halo_metric) & ~mk for mk in masks]) if ids.size \
        else np.zeros((0,) + labels.shape, bool)
    classes = None
    if instance_classes is not None:
        classes = [instance_classes[int(k)] for k in ids]
    return ImageTargets(labels, ids, masks, halos, classes)


def assign_colors(y: np.ndarray, targets: ImageTargets, cfg: LossConfig) -> np.ndarray:
    """Vector of chosen colors, entry ``k - 1`` for instance ``k``."""
    c = y.shape[0]
    if c != cfg.colors:
        raise ValueError(f"probability map has {c} channels, config expects {cfg.colors}")
    if not targets.ids.size:
        return np.zeros(0, dtype=int)
    logp, log1m = _logs(y)
    flat_p = logp.reshape(c, -1)
    flat_1m = log1m.reshape(c, -1)
    masks = targets.masks.reshape(len(targets.ids), -1).astype(float)
    halos = targets.halos.reshape(len(targets.ids), -1).astype(float)
    inner = masks @ flat_p.T / masks.sum(axis=1, keepdims=True)
    n_h = halos.sum(axis=1, keepdims=True)
    outer = np.divide(halos @ flat_1m.T, n_h, out=np.zeros_like(inner), where=n_h > 0)
    scores = inner + cfg.halo_weight * outer if cfg.halo_weight else inner
    if targets.classes is None:
        # argmax over colors 2..C; np.argmax keeps the lowest index on ties
        return np.argmax(scores[:, 1:], axis=1) + 2
    out = np.empty(len(targets.ids), dtype=int)
    for i, cls in enumerate(targets.classes):
        allowed = np.array(allowed_colors_for(cls, cfg))
        out[i] = allowed[int(np.argmax(scores[i, allowed - 1]))]
    return out


def loss_maps(targets: ImageTargets, assignment: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel target channel and weight realizing the log-loss for a fixed assignment."""
    target = np.zeros(targets.labels.shape, dtype=np.intp)
    weight = np.where(targets.labels == 0, cfg.background_weight, 0.0)
    for i, mk in enumerate(targets.masks):
        target[mk] = assignment[i] - 1
        weight[mk] = 1.0 / mk.sum()
    return target, weight


def coloring_step_loss(y: Tensor, labels, cfg: LossConfig,
                       instance_classes: Optional[Mapping[int, object]] = None,
                       assignment: Optional[np.ndarray] = None,
                       targets: Optional[ImageTargets] = None) -> tuple[Tensor, np.ndarray]:
    """Log-loss of ``y`` (C,H,W) against freshly colored instances.

    The assignment is recomputed from ``y`` unless given, and is treated as a
    constant when differentiating.
    """
    y = T.as_tensor(y)
    if y.ndim != 3:
        raise T.ShapeError(f"coloring_step_loss: y must be (C,H,W), got {y.shape}")
    if targets is None:
        targets = prepare_targets(labels, cfg, instance_classes)
    if targets.labels.shape != y.shape[1:]:
        raise T.ShapeError(f"labels {targets.labels.shape} and probabilities {y.shape[1:]} differ in size")
    if assignment is None:
        assignment = assign_colors(y.data, targets, cfg)
    target, weight = loss_maps(targets, np.asarray(assignment), cfg)
    return T.weighted_nll(y, target, weight), assignment


def batch_coloring_loss(y: Tensor, targets: Sequence[ImageTargets], cfg: LossConfig
                        ) -> tuple[Tensor, list[np.ndarray]]:
    """Sum of per-image losses for a batch ``y`` (N,C,H,W), in a single graph node."""
    if y.ndim != 4 or y.shape[0] != len(targets):
        raise T.ShapeError(f"batch_coloring_loss: y {y.shape} vs {len(targets)} label maps")
    assignments = [assign_colors(y.data[i], t, cfg) for i, t in enumerate(targets)]
    maps = [loss_maps(t, a, cfg) for t, a in zip(targets, assignments)]
    target = np.stack([m[0] for m in maps])
    weight = np.stack([m[1] for m in maps])
    return T.weighted_nll(y, target, weight), assignments


def color_histogram(assignments: Sequence[np.ndarray], colors: int) -> np.ndarray:
    """Instance counts per color; entry ``c`` counts color ``c`` (entries 0 and 1 stay zero)."""
    hist = np.zeros(colors + 1, dtype=int)
    for a in assignments:
        np.add.at(hist, np.asarray(a, dtype=int), 1)
    return hist
