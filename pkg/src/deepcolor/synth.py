"""Deterministic synthetic scenes and the training-time augmentation.

Three scene kinds:
  blobs     filled ellipses with a dome-shaped additive intensity; later
            instances occlude earlier ones where they overlap
  rods      capsules at random orientations, packed so they may touch
  occluded  separated blobs cut by background-valued bars, so at least one
            ground-truth instance is split into disconnected pieces
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .rng import make_rng


class GenerationError(RuntimeError):
    code = "E_GENERATE"


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "blobs"
    height: int = 64
    width: int = 64
    kmin: int = 3
    kmax: int = 8
    size_min: float = 4.0
    size_max: float = 10.0
    min_gap: float = 0.0
    max_overlap: float = 0.3
    min_visible: float = 0.6
    noise: float = 0.05
    channels: int = 1
    bar_width: int = 2
    touch: float = 0.0
    seed: int = 0
    max_retries: int = 200

    def validate(self) -> "SceneConfig":
        if self.kind not in ("blobs", "rods", "occluded"):
            raise ValueError(f"kind must be blobs, rods or occluded, got {self.kind!r}")
        if self.kmin < 1 or self.kmax < self.kmin:
            raise ValueError(f"need 1 <= kmin <= kmax, got [{self.kmin}, {self.kmax}]")
        if self.height < 4 or self.width < 4:
            raise ValueError(f"image too small: {self.height}x{self.width}")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError(f"need 0 < size_min <= size_max, got [{self.size_min}, {self.size_max}]")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.noise < 0 or self.min_gap < 0 or not 0 <= self.max_overlap <= 1 or not 0 <= self.touch <= 1:
            raise ValueError("noise, min_gap must be >= 0; max_overlap and touch in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        fields = cls.__dataclass_fields__
        out = {}
        for k, v in d.items():
            if k in fields:
                out[k] = type(fields[k].default)(v) if not isinstance(fields[k].default, str) else str(v)
        return cls(**out)


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64, 0 = background

    @property
    def count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(float)


def _ellipse(yy, xx, cy, cx, a, b, theta) -> np.ndarray:
    """Normalized squared radius; <= 1 inside the ellipse."""
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2


def _capsule(yy, xx, cy, cx, half_len, radius, theta) -> np.ndarray:
    """Normalized distance to the capsule axis; <= 1 inside."""
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    t = np.clip(dx * c + dy * s, -half_len, half_len)
    px, py = dx - t * c, dy - t * s
    return np.sqrt(px * px + py * py) / radius


def _gap_ok(mask: np.ndarray, occupied: np.ndarray, gap: float) -> bool:
    if gap <= 0:
        return True
    if not occupied.any():
        return True
    d = ndimage.distance_transform_edt(~occupied)
    return bool(d[mask].min() > gap)


def _touches(mask: np.ndarray, occupied: np.ndarray) -> bool:
    return bool((ndimage.binary_dilation(mask) & occupied).any())


def _is_connected(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask)
    return n == 1


def _finish(cfg: SceneConfig, rng: np.random.Generator, labels: np.ndarray,
            profile: np.ndarray) -> Sample:
    base = rng.uniform(0.05, 0.15)
    img = base + profile
    if cfg.channels == 3:
        tint = rng.uniform(0.7, 1.0, size=3)
        img = tint[:, None, None] * img[None]
    else:
        img = img[None]
    if cfg.noise:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return Sample(np.clip(img, 0.0, 1.0), labels.astype(np.int64))


def _draw_count(cfg: SceneConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.kmin, cfg.kmax + 1))


def _blobs(cfg: SceneConfig, rng: np.random.Generator, allow_overlap: bool) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    yy, xx = _grid(h, w)
    k = _draw_count(cfg, rng)
    labels = np.zeros((h, w), dtype=np.int64)
    profile = np.zeros((h, w))
    shapes: list[np.ndarray] = []
    for idx in range(1, k + 1):
        for _ in range(cfg.max_retries):
            a = rng.uniform(cfg.size_min, cfg.size_max)
            b = rng.uniform(max(cfg.size_min * 0.6, a * 0.5), a)
            if 2 * b >= min(h, w):
                continue
            theta = rng.uniform(0.0, math.pi)
            cy = rng.uniform(b, h - b)
            cx = rng.uniform(b, w - b)
            r2 = _ellipse(yy, xx, cy, cx, a, b, theta)
            mask = r2 <= 1.0
            if mask.sum() < 4:
                continue
            occupied = labels > 0
            inter = (mask & occupied).sum() / mask.sum()
            if allow_overlap:
                if inter > cfg.max_overlap:
                    continue
            elif inter > 0:
                continue
            if not _gap_ok(mask, occupied, cfg.min_gap):
                continue
            trial = labels.copy()
            trial[mask] = idx
            if allow_overlap and not all(
                    (trial == j).sum() >= cfg.min_visible * s.sum() and _is_connected(trial == j)
                    for j, s in enumerate(shapes + [mask], start=1)):
                continue
            labels = trial
            shapes.append(mask)
            amp = rng.uniform(0.35, 0.6)
            profile += np.where(mask, amp * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0)) ** 0.5, 0.0)
            break
        else:
            raise GenerationError(f"could not place instance {idx} of {k} after {cfg.max_retries} tries "
                                  f"({cfg.kind}, {h}x{w}, size {cfg.size_min}-{cfg.size_max})")
    return labels, profile


def _rods(cfg: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    yy, xx = _grid(h, w)
    k = _draw_count(cfg, rng)
    labels = np.zeros((h, w), dtype=np.int64)
    profile = np.zeros((h, w))
    for idx in range(1, k + 1):
        want_touch = idx > 1 and rng.uniform() < cfg.touch
        ring = None
        if want_touch:
            occ = labels > 0
            ring = np.argwhere(ndimage.binary_dilation(occ) & ~occ)
        for _ in range(cfg.max_retries):
            radius = rng.uniform(max(1.5, cfg.size_min / 2.5), max(2.0, cfg.size_min / 1.5))
            half_len = rng.uniform(cfg.size_min, cfg.size_max)
            theta = rng.uniform(0.0, math.pi)
            if ring is not None and len(ring):
                # put a ring pixel just inside the new rod's rim so the two rods touch
                qy, qx = ring[int(rng.integers(0, len(ring)))]
                t = rng.uniform(-half_len, half_len)
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                ux, uy = math.cos(theta), math.sin(theta)
                cx = qx - t * ux + side * uy * 0.8 * radius
                cy = qy - t * uy - side * ux * 0.8 * radius
            else:
                cy = rng.uniform(radius, h - radius)
                cx = rng.uniform(radius, w - radius)
            d = _capsule(yy, xx, cy, cx, half_len, radius, theta)
            mask = d <= 1.0
            if mask.sum() < 6 or (mask & (labels > 0)).any():
                continue
            if not _gap_ok(mask, labels > 0, cfg.min_gap):
                continue
            labels[mask] = idx
            amp = rng.uniform(0.4, 0.6)
            profile += np.where(mask, amp * np.sqrt(np.clip(1.0 - d * d, 0.0, 1.0)), 0.0)
            break
        else:
            raise GenerationError(f"could not place rod {idx} of {k} after {cfg.max_retries} tries")
    return labels, profile


def _occlude(cfg: SceneConfig, rng: np.random.Generator, labels: np.ndarray,
             profile: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cut the largest instance (and maybe others) with bars across their middle."""
    h, w = labels.shape
    yy, xx = _grid(h, w)
    ids = np.arange(1, labels.max() + 1)
    sizes = np.array([(labels == i).sum() for i in ids])
    n_cut = 1 + int(rng.integers(0, max(1, len(ids) // 2)))
    victims = ids[np.argsort(-sizes, kind="stable")][:n_cut]
    for v in victims:
        ys, xs = np.nonzero(labels == v)
        cy, cx = ys.mean(), xs.mean()
        cov = np.cov(np.stack([xs, ys])) if ys.size > 1 else np.eye(2)
        evals, evecs = np.linalg.eigh(cov)
        major = evecs[:, np.argmax(evals)]
        # the bar runs across the minor direction, i.e. its normal is the major axis
        dist = np.abs((xx - cx) * major[0] + (yy - cy) * major[1])
        along = np.abs(-(xx - cx) * major[1] + (yy - cy) * major[0])
        reach = 2.0 * math.sqrt(evals.min()) + 3.0
        bar = (dist <= cfg.bar_width / 2.0) & (along <= reach)
        labels = np.where(bar, 0, labels)
        profile = np.where(bar, 0.0, profile)
    # instances that lost all pixels disappear; compact ids
    return _compact(labels), profile


def _compact(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
    lut[ids] = np.arange(1, ids.size + 1)
    return lut[labels]


def generate(config: SceneConfig, index: int) -> Sample:
    """Scene ``index`` of the dataset described by ``config``; pure in (config, index)."""
    cfg = config.validate()
    rng = make_rng(cfg.seed, "scene", cfg.kind, index)
    if cfg.kind == "blobs":
        labels, profile = _blobs(cfg, rng, allow_overlap=cfg.max_overlap > 0)
    elif cfg.kind == "rods":
        labels, profile = _rods(cfg, rng)
    else:
        for _ in range(cfg.max_retries):
            labels, profile = _blobs(replace(cfg, max_overlap=0.0, min_gap=max(cfg.min_gap, 2.0)),
                                     rng, allow_overlap=False)
            labels, profile = _occlude(cfg, rng, labels, profile)
            if labels.max() >= 1 and any(not _is_connected(labels == i) for i in range(1, labels.max() + 1)):
                break
        else:
            raise GenerationError("occluded scene: no instance could be split by a bar")
    return _finish(cfg, rng, labels, profile)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    patch: Optional[tuple[int, int]] = None
    rotate: bool = True
    flip: bool = True


@dataclass(frozen=True)
class Transform:
    top: int = 0
    left: int = 0
    angle: float = 0.0
    flip_h: bool = False
    flip_v: bool = False


def draw_transform(rng: np.random.Generator, shape: tuple[int, int], cfg: AugmentConfig) -> Transform:
    h, w = shape
    ph, pw = cfg.patch or (h, w)
    if ph > h or pw > w:
        raise ValueError(f"patch {ph}x{pw} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    angle = float(rng.uniform(0.0, 360.0)) if cfg.rotate else 0.0
    fh = bool(rng.integers(0, 2)) if cfg.flip else False
    fv = bool(rng.integers(0, 2)) if cfg.flip else False
    return Transform(top, left, angle, fh, fv)


def apply_transform(sample: Sample, t: Transform, patch: Optional[tuple[int, int]] = None) -> Sample:
    """Crop, rotate about the patch center, flip; labels use nearest-neighbour resampling."""
    img, lab = sample.image, sample.labels
    h, w = lab.shape
    ph, pw = patch or (h, w)
    if ph > h or pw > w:
        raise ValueError(f"patch {ph}x{pw} larger than image {h}x{w}")
    img = img[:, t.top:t.top + ph, t.left:t.left + pw]
    lab = lab[t.top:t.top + ph, t.left:t.left + pw]
    angle = t.angle % 360.0
    if angle:
        quarter = angle / 90.0
        if quarter == int(quarter):
            img = np.rot90(img, int(quarter), axes=(1, 2))
            lab = np.rot90(lab, int(quarter))
        else:
            fill = float(np.median(img))
            img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=fill)
            lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=0)
    if t.flip_h:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    if t.flip_v:
        img, lab = img[:, ::-1, :], lab[::-1, :]
    lab = _compact(np.ascontiguousarray(lab)) if lab.size else np.ascontiguousarray(lab)
    return Sample(np.ascontiguousarray(np.clip(img, 0.0, 1.0)), lab)


def augment(sample: Sample, seed, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Random crop, rotation and flips. ``seed`` is an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(int(seed), "augment")
    t = draw_transform(rng, sample.labels.shape, cfg)
    return apply_transform(sample, t, cfg.patch)
