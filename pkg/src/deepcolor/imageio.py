"""Binary PGM (P5) reading/writing, PNG for RGB, and overlay rendering.

PGM samples are 8-bit when maxval < 256, otherwise 16-bit big-endian, per
the Netpbm definition. Label maps are always written as 16-bit PGM.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAX_DIM = 1 << 16


class ImageFormatError(ValueError):
    code = "E_FORMAT"


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments."""
    pos = 2
    out: list[int] = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"malformed PGM header near byte {start}")
        out.append(int(buf[start:pos]))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("malformed PGM header: missing whitespace before raster")
    return out, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    """Raw integer samples of a P5 file as uint8 or uint16 (H, W)."""
    return _read_pgm(path)[0]


def _read_pgm(path: PathLike) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    (w, h, maxval), off = _tokens(buf, 3)
    if not (0 < w < MAX_DIM and 0 < h < MAX_DIM):
        raise ImageFormatError(f"{path}: dimensions {w}x{h} out of range")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - off < need:
        raise ImageFormatError(f"{path}: raster truncated ({len(buf) - off} of {need} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    if arr.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: sample exceeds maxval {maxval}")
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path: PathLike, arr: np.ndarray, maxval: int | None = None) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ImageFormatError(f"PGM needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    if not (0 < w < MAX_DIM and 0 < h < MAX_DIM):
        raise ImageFormatError(f"dimensions {w}x{h} out of range")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ImageFormatError("PGM samples must lie in [0, 65535]")
    if maxval is None:
        maxval = 255 if arr.dtype == np.uint8 else 65535
    if arr.size and arr.max() > maxval:
        raise ImageFormatError(f"sample {arr.max()} exceeds maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def write_image(path: PathLike, image: np.ndarray, bits: int = 8) -> None:
    """Write a float image in [0, 1], (C, H, W) or (H, W). Grayscale -> PGM, RGB -> PNG."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    if img.ndim == 2:
        write_pgm(path, q.astype(np.uint8 if bits == 8 else np.uint16), maxval)
    elif img.ndim == 3 and img.shape[0] == 3:
        if bits != 8:
            raise ImageFormatError("RGB images are written as 8-bit PNG")
        write_png(path, np.moveaxis(q.astype(np.uint8), 0, -1))
    else:
        raise ImageFormatError(f"unsupported image shape {img.shape}")


def read_image(path: PathLike) -> np.ndarray:
    """Float image (C, H, W) in [0, 1] from PGM or PNG."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        from PIL import Image
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L") if im.mode in ("L", "I;16", "I") else im.convert("RGB"))
        if arr.ndim == 2:
            return (arr / 255.0)[None]
        return np.moveaxis(arr / 255.0, -1, 0)
    raw, maxval = _read_pgm(p)
    return (raw / float(maxval))[None]


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.max() > 65535:
        raise ImageFormatError(f"instance id {labels.max()} exceeds 65535")
    if labels.size and labels.min() < 0:
        raise ImageFormatError("negative instance id")
    write_pgm(path, labels.astype(np.uint16), 65535)


def read_labels(path: PathLike) -> np.ndarray:
    return read_pgm(path).astype(np.int64)


def write_png(path: PathLike, rgb: np.ndarray) -> None:
    from PIL import Image
    rgb = np.asarray(rgb, dtype=np.uint8)
    Image.fromarray(rgb, mode="RGB" if rgb.ndim == 3 else "L").save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im)


# Fixed palette: index 0 is background (transparent black: the image shows
# through), indices 1.. are opaque colors, cycling after the table end.
PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
], dtype=np.uint8)


def palette_color(index: int) -> np.ndarray:
    if index <= 0:
        return PALETTE[0]
    return PALETTE[1 + (index - 1) % (len(PALETTE) - 1)]


def render_overlay(image: np.ndarray, segmentation, alpha: float = 0.6, background: int = 0) -> np.ndarray:
    """RGB uint8 overlay of a segmentation on an image.

    ``segmentation`` is an InstanceSet (instance ``i`` gets palette entry
    ``i + 1``) or an integer map (label map or hard color map; pixels equal
    to ``background`` are left uncolored, others get palette entry ``value``).
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = np.moveaxis(img, 0, -1)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    base = np.clip(img, 0.0, 1.0) * 255.0
    h, w = base.shape[:2]
    index = np.zeros((h, w), dtype=np.int64)
    if hasattr(segmentation, "instances"):
        flat = index.reshape(-1)
        for i, inst in enumerate(segmentation.instances, start=1):
            flat[inst.pixels] = i
    else:
        seg = np.asarray(segmentation)
        if seg.shape != (h, w):
            raise ImageFormatError(f"segmentation {seg.shape} does not match image {h}x{w}")
        index = np.where(seg == background, 0, seg)
    colors = np.stack([palette_color(int(i)) for i in range(int(index.max()) + 1)]).astype(float)
    fg = index > 0
    out = base.copy()
    out[fg] = (1.0 - alpha) * base[fg] + alpha * colors[index[fg]]
    return np.rint(out).astype(np.uint8)
