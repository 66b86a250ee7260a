"""Cheap (tau, rho) selection on cached probability maps.

Everything that does not depend on the thresholds is computed once per
image: the argmax map, its components, the same-color distance matrix and
the component x ground-truth overlap counts. A grid point then only needs a
size mask, a union-find over small matrices and an SBD on summed overlaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as M
from . import postprocess as P


@dataclass
class CachedImage:
    sizes: np.ndarray
    dist: np.ndarray
    overlaps: np.ndarray  # components x gt
    gt_sizes: np.ndarray

    @classmethod
    def build(cls, y: np.ndarray, gt_labels: np.ndarray, connectivity: int = 4,
              merge_metric: str = "min_set_distance") -> "CachedImage":
        z = P.hard_assign(y)
        comps = P.connected_components(z, connectivity)
        gt_sets = M._sets(gt_labels)
        return cls(
            sizes=np.array([c.size for c in comps], dtype=float),
            dist=P.pairwise_distances(comps, z.shape[1], merge_metric),
            overlaps=M._overlaps([c.pixels for c in comps], gt_sets),
            gt_sizes=np.array([len(g) for g in gt_sets], dtype=float),
        )

    def evaluate(self, tau: float, rho: float) -> tuple[float, int]:
        """(SBD, instance count) for one grid point."""
        keep = np.flatnonzero(self.sizes >= tau)
        if keep.size == 0:
            return M.sbd_from_overlaps(np.zeros((0, self.gt_sizes.size)), np.zeros(0), self.gt_sizes), 0
        groups = P.merge_groups(self.dist[np.ix_(keep, keep)], rho)
        ov = np.stack([self.overlaps[keep[g]].sum(axis=0) for g in groups])
        sz = np.array([self.sizes[keep[g]].sum() for g in groups])
        return M.sbd_from_overlaps(ov, sz, self.gt_sizes), len(groups)


@dataclass
class SweepResult:
    taus: np.ndarray
    rhos: np.ndarray
    mean_sbd: np.ndarray  # (len(taus), len(rhos))
    mean_count: np.ndarray
    mean_abs_dic: np.ndarray
    best: tuple[float, float] = field(default=(0, 0.0))
    best_sbd: float = 0.0

    def sbd_at(self, tau: float, rho: float) -> float:
        i = int(np.flatnonzero(self.taus == tau)[0])
        j = int(np.flatnonzero(self.rhos == rho)[0])
        return float(self.mean_sbd[i, j])

    def best_for_rho(self, rho: float) -> float:
        j = int(np.flatnonzero(self.rhos == rho)[0])
        return float(self.mean_sbd[:, j].max())

    def rows(self):
        for i, t in enumerate(self.taus):
            for j, r in enumerate(self.rhos):
                yield t, r, self.mean_sbd[i, j], self.mean_abs_dic[i, j], self.mean_count[i, j]


def sweep(probs: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray], taus: Sequence[float],
          rhos: Sequence[float], connectivity: int = 4,
          merge_metric: str = "min_set_distance") -> SweepResult:
    """Grid of mean SBD. The best point maximizes SBD; ties prefer smaller rho, then smaller tau."""
    if len(probs) != len(gt_maps):
        raise ValueError(f"{len(probs)} probability maps vs {len(gt_maps)} label maps")
    if not len(taus) or not len(rhos):
        raise ValueError("empty tau or rho grid")
    caches = [CachedImage.build(y, g, connectivity, merge_metric) for y, g in zip(probs, gt_maps)]
    taus = np.unique(np.asarray(taus, dtype=float))
    rhos = np.unique(np.asarray(rhos, dtype=float))
    sbd = np.zeros((taus.size, rhos.size))
    cnt = np.zeros_like(sbd)
    dic = np.zeros_like(sbd)
    for i, t in enumerate(taus):
        for j, r in enumerate(rhos):
            vals = [c.evaluate(t, r) for c in caches]
            sbd[i, j] = np.mean([v[0] for v in vals]) if vals else 0.0
            cnt[i, j] = np.mean([v[1] for v in vals]) if vals else 0.0
            dic[i, j] = np.mean([abs(v[1] - c.gt_sizes.size) for v, c in zip(vals, caches)]) if vals else 0.0
    best = None
    for j in range(rhos.size):
        for i in range(taus.size):
            if best is None or sbd[i, j] > sbd[best]:
                best = (i, j)
    res = SweepResult(taus, rhos, sbd, cnt, dic)
    res.best = (float(taus[best[0]]), float(rhos[best[1]]))
    res.best_sbd = float(sbd[best])
    return res
