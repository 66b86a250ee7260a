"""On-disk dataset layout.

    <root>/images/NNNN.pgm   (or .png for RGB)
    <root>/labels/NNNN.pgm   16-bit instance ids, 0 = background
    <root>/manifest.txt      key = value lines: the scene config and count
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imageio as IO
from .config import format_kv, parse_kv
from .synth import Sample, SceneConfig, generate

IMAGE_SUFFIXES = (".pgm", ".png")


class DatasetError(ValueError):
    code = "E_DATASET"


def write(root, samples: Sequence[Sample], scene: Optional[SceneConfig] = None) -> list[str]:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"{i:04d}"
        suffix = ".pgm" if s.image.shape[0] == 1 else ".png"
        IO.write_image(root / "images" / (name + suffix), s.image)
        IO.write_labels(root / "labels" / (name + ".pgm"), s.labels)
        names.append(name)
    meta = dict(scene.to_dict()) if scene is not None else {}
    meta["count"] = len(samples)
    (root / "manifest.txt").write_text(format_kv(meta))
    return names


def generate_to(root, scene: SceneConfig, count: int) -> list[str]:
    return write(root, [generate(scene, i) for i in range(count)], scene)


def image_files(path) -> list[Path]:
    """Image files of a dataset root (its ``images/`` dir) or of a flat directory."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such directory")
    d = path / "images" if (path / "images").is_dir() else path
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"{d}: no .pgm or .png images")
    return files


def label_files(path) -> dict[str, Path]:
    """Label maps keyed by stem, from ``<path>/labels`` or ``path`` itself."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such directory")
    d = path / "labels" if (path / "labels").is_dir() else path
    return {p.stem: p for p in sorted(d.glob("*.pgm"))}


def load(root, require_labels: bool = True) -> tuple[list[str], list[np.ndarray], list[Optional[np.ndarray]]]:
    files = image_files(root)
    labels = label_files(root) if require_labels else {}
    names, images, maps = [], [], []
    for f in files:
        names.append(f.stem)
        images.append(IO.read_image(f))
        if require_labels:
            if f.stem not in labels:
                raise DatasetError(f"{f}: no matching label map")
            lab = IO.read_labels(labels[f.stem])
            if lab.shape != images[-1].shape[1:]:
                raise DatasetError(f"{f.stem}: image {images[-1].shape[1:]} and labels {lab.shape} differ")
            maps.append(lab)
        else:
            maps.append(None)
    return names, images, maps


def load_samples(root) -> list[Sample]:
    _, images, maps = load(root)
    return [Sample(img, _contiguous(lab)) for img, lab in zip(images, maps)]


def _contiguous(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int64)
    lut[ids] = np.arange(1, ids.size + 1)
    return lut[labels]


def read_manifest(root) -> dict[str, str]:
    p = Path(root) / "manifest.txt"
    return parse_kv(p.read_text()) if p.exists() else {}
