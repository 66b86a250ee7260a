"""Test-time instance extraction from a color probability map.

Pipeline: argmax coloring -> connected components -> size filter ->
same-color proximity merging -> confidence scoring. Pixel sets are sorted
arrays of flat (row-major) indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

BACKGROUND = 1


@dataclass(frozen=True)
class PostConfig:
    tau: int = 0
    rho: float = 0.0
    merge_metric: str = "min_set_distance"
    connectivity: int = 4

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.merge_metric not in ("min_set_distance", "hausdorff"):
            raise ValueError(f"merge_metric must be 'min_set_distance' or 'hausdorff', got {self.merge_metric!r}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")


@dataclass
class Component:
    color: int
    pixels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.pixels.size)


@dataclass
class Instance:
    pixels: np.ndarray
    color: int
    confidence: Optional[float] = None

    @property
    def size(self) -> int:
        return int(self.pixels.size)


@dataclass
class InstanceSet:
    shape: tuple[int, int]
    instances: list[Instance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def to_label_map(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int64)
        flat = out.reshape(-1)
        for i, inst in enumerate(self.instances, start=1):
            flat[inst.pixels] = i
        return out

    @classmethod
    def from_label_map(cls, labels: np.ndarray) -> "InstanceSet":
        labels = np.asarray(labels)
        flat = labels.reshape(-1)
        order = np.argsort(flat, kind="stable")
        ids, starts = np.unique(flat[order], return_index=True)
        bounds = list(starts[1:]) + [flat.size]
        insts = [Instance(np.sort(order[s:e]), 0) for k, s, e in zip(ids, starts, bounds) if k > 0]
        return cls(tuple(labels.shape), insts)


def hard_assign(y: np.ndarray) -> np.ndarray:
    """Per-pixel 1-based argmax color; ties resolve to the lowest color."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected (C, H, W) probabilities, got shape {y.shape}")
    return np.argmax(y, axis=0) + 1


class _UnionFind:
    """Union-find whose root is always the smallest element of the set."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra < rb:
            self.parent[rb] = ra
        elif rb < ra:
            self.parent[ra] = rb


def connected_components(z: np.ndarray, connectivity: int = 4,
                         background: int = BACKGROUND) -> list[Component]:
    """Maximal same-color connected regions of ``z`` excluding ``background``.

    Works on horizontal runs: runs in adjacent rows with the same color are
    joined when their column spans touch (4-connectivity) or touch
    diagonally (8-connectivity). Components come out ordered by their
    smallest flat pixel index.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    z = np.asarray(z)
    h, w = z.shape
    if z.size == 0:
        return []
    flat = z.reshape(-1)
    change = np.ones(flat.size, dtype=bool)
    change[1:] = flat[1:] != flat[:-1]
    change[::w] = True
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], flat.size)
    keep = flat[starts] != background
    starts, ends = starts[keep], ends[keep]
    colors = flat[starts]
    rows = starts // w
    c0 = starts - rows * w
    c1 = ends - rows * w
    n = starts.size
    uf = _UnionFind(n)
    slack = 1 if connectivity == 8 else 0
    row_first = np.searchsorted(rows, np.arange(h + 1))
    for r in range(h - 1):
        a0, a1 = row_first[r], row_first[r + 1]
        b0, b1 = row_first[r + 1], row_first[r + 2]
        if a0 == a1 or b0 == b1:
            continue
        # runs b in the next row with c1[b] > c0[a] - slack and c0[b] < c1[a] + slack
        lo = b0 + np.searchsorted(c1[b0:b1], c0[a0:a1] - slack, side="right")
        hi = b0 + np.searchsorted(c0[b0:b1], c1[a0:a1] + slack, side="left")
        for a, bl, bh in zip(range(a0, a1), lo.tolist(), hi.tolist()):
            for b in range(bl, bh):
                if colors[a] == colors[b]:
                    uf.union(a, b)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    out = []
    for root in sorted(groups):
        pix = np.concatenate([np.arange(starts[i], ends[i]) for i in groups[root]])
        pix.sort()
        out.append(Component(int(colors[root]), pix))
    return out


def filter_small(components: Sequence[Component], tau: int) -> tuple[list[Component], np.ndarray]:
    """Drop components with fewer than ``tau`` pixels; also return the dropped pixels."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    kept = [c for c in components if c.size >= tau]
    dropped = [c.pixels for c in components if c.size < tau]
    return kept, (np.sort(np.concatenate(dropped)) if dropped else np.zeros(0, dtype=np.int64))


def _coords(pixels: np.ndarray, width: int) -> np.ndarray:
    return np.stack([pixels // width, pixels % width], axis=1).astype(float)


def set_distance(a: np.ndarray, b: np.ndarray, width: int, metric: str = "min_set_distance") -> float:
    """Euclidean distance between two pixel sets: closest pair, or symmetric Hausdorff."""
    d = cdist(_coords(a, width), _coords(b, width))
    if metric == "min_set_distance":
        return float(d.min())
    if metric == "hausdorff":
        return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
    raise ValueError(f"unknown merge metric {metric!r}")


def pairwise_distances(components: Sequence[Component], width: int,
                       metric: str = "min_set_distance") -> np.ndarray:
    """Distance matrix between same-color components; ``inf`` across colors."""
    n = len(components)
    d = np.full((n, n), np.inf)
    coords = [_coords(c.pixels, width) for c in components]
    for i in range(n):
        d[i, i] = 0.0
        for j in range(i + 1, n):
            if components[i].color != components[j].color:
                continue
            pd = cdist(coords[i], coords[j])
            if metric == "min_set_distance":
                v = pd.min()
            else:
                v = max(pd.min(axis=1).max(), pd.min(axis=0).max())
            d[i, j] = d[j, i] = v
    return d


def merge_groups(dist: np.ndarray, rho: float) -> list[list[int]]:
    """Transitive closure of ``dist < rho`` as index groups ordered by smallest member."""
    n = dist.shape[0]
    uf = _UnionFind(n)
    if rho > 0:
        ii, jj = np.nonzero(np.triu(dist < rho, k=1))
        for i, j in zip(ii.tolist(), jj.tolist()):
            uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    return [groups[r] for r in sorted(groups)]


def merge_nearby(components: Sequence[Component], rho: float, metric: str = "min_set_distance",
                 width: Optional[int] = None) -> list[Component]:
    """Union same-color components closer than ``rho`` (strictly), transitively.

    ``width`` is the image width used to decode flat indices into coordinates.
    """
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    components = list(components)
    if rho == 0 or len(components) < 2:
        return components
    if width is None:
        raise ValueError("merge_nearby needs the image width to measure distances")
    groups = merge_groups(pairwise_distances(components, width, metric), rho)
    return [Component(components[g[0]].color, np.sort(np.concatenate([components[i].pixels for i in g])))
            for g in groups]


def score_instances(y: np.ndarray, components: Sequence[Component]) -> list[Instance]:
    """Confidence = mean probability of the instance's color over its pixels."""
    y = np.asarray(y)
    flat = y.reshape(y.shape[0], -1)
    out = []
    for c in components:
        if c.size == 0:
            raise ValueError("cannot score an empty instance")
        if not 1 <= c.color <= y.shape[0]:
            raise ValueError(f"color {c.color} is not a channel of the probability map")
        out.append(Instance(c.pixels, c.color, float(flat[c.color - 1, c.pixels].mean())))
    return out


def segment(y: np.ndarray, cfg: PostConfig = PostConfig()) -> InstanceSet:
    y = np.asarray(y)
    z = hard_assign(y)
    comps = connected_components(z, cfg.connectivity)
    comps, _ = filter_small(comps, cfg.tau)
    comps = merge_nearby(comps, cfg.rho, cfg.merge_metric, width=z.shape[1])
    return InstanceSet(tuple(z.shape), score_instances(y, comps))
