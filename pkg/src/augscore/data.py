"""Datasets: synthetic shape renderer, CIFAR-10 binary loader, export format.

All images live in memory as float arrays [N, H, W, C] with values in [0, 1].
The synthetic generator renders one anti-aliased shape per image from a
signed-distance function, with round-robin class labels so every class is
equally represented.  The export format quantizes pixels to bytes, so a
load/export cycle is byte-stable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng

SHAPE_NAMES = ("circle", "square", "triangle", "cross")


class DataError(Exception):
    """Unreadable or malformed dataset input."""


@dataclass
class LabeledDataset:
    images: np.ndarray   # [N, H, W, C] in [0, 1]
    labels: np.ndarray   # [N] int
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] not in (1, 3):
            raise DataError(f"images must be [N,H,W,C], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels must be one per image")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise DataError("labels must lie in [0, class_count)")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count)


# ------------------------------------------------------------- synth shapes

def _shape_sdf(name, rx, ry, r):
    """Signed distance (pixels) to the named shape in rotated local coords."""
    if name == "circle":
        return np.hypot(rx, ry) - r
    if name == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) - 0.9 * r
    if name == "triangle":
        d1 = ry - 0.5 * r
        d2 = 0.8660254 * rx - 0.5 * ry - 0.5 * r
        d3 = -0.8660254 * rx - 0.5 * ry - 0.5 * r
        return np.maximum(d1, np.maximum(d2, d3))
    if name == "cross":
        bar1 = np.maximum(np.abs(rx) - r, np.abs(ry) - 0.35 * r)
        bar2 = np.maximum(np.abs(rx) - 0.35 * r, np.abs(ry) - r)
        return np.minimum(bar1, bar2)
    raise ValueError(f"unknown shape {name!r}")


def synth_shapes(n: int, resolution: int = 32, class_count: int = 4,
                 seed: int = 0) -> LabeledDataset:
    """Render n images, one shape each, labels assigned round-robin.

    Shape geometry (center, size, rotation) and foreground/background colors
    are drawn per sample from the stream (seed, i), so the dataset is a pure
    function of its arguments.  Colors sit in a mid-to-bright band with a
    guaranteed luma gap between figure and ground.
    """
    if not 1 <= class_count <= len(SHAPE_NAMES):
        raise ValueError(f"class_count must be in [1, {len(SHAPE_NAMES)}]")
    if n < 1 or resolution < 1:
        raise ValueError("n and resolution must be at least 1")
    coords = np.arange(resolution, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, resolution, resolution, 3))
    labels = np.arange(n, dtype=np.int64) % class_count
    for i in range(n):
        rng = Rng(seed, 0x5A9E, i)
        draws = rng.uniform(10)
        cx = resolution * (0.5 + (draws[0] - 0.5) * 0.24)
        cy = resolution * (0.5 + (draws[1] - 0.5) * 0.24)
        r = resolution * (0.18 + draws[2] * 0.14)
        theta = draws[3] * 2.0 * math.pi
        bg_luma = 0.2 + draws[4] * 0.25
        fg_luma = bg_luma + 0.25 + draws[5] * 0.45
        ct, st = math.cos(theta), math.sin(theta)
        px, py = xx - cx, yy - cy
        rx = ct * px + st * py
        ry = -st * px + ct * py
        d = _shape_sdf(SHAPE_NAMES[labels[i]], rx, ry, r)
        cover = np.clip(0.5 - d, 0.0, 1.0)[:, :, None]
        bg = np.clip(bg_luma + (draws[6:9] - 0.5) * 0.16, 0.02, 0.98)
        fg = np.clip(fg_luma + (rng.uniform(3) - 0.5) * 0.16, 0.02, 0.98)
        images[i] = bg + cover * (fg - bg)
    return LabeledDataset(images, labels, class_count)


# ------------------------------------------------------------ export format

_HEADER = struct.Struct("<4I")   # n, resolution, channels, class_count


def export_dataset(ds: LabeledDataset, path) -> None:
    """Write header, label bytes, then pixel bytes (round(p * 255))."""
    n, h, w, c = ds.images.shape
    if h != w:
        raise DataError("export requires square images")
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(n, h, c, ds.class_count))
        f.write(ds.labels.astype(np.uint8).tobytes())
        f.write(pixels.tobytes())


def load_exported(path) -> LabeledDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such dataset file: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    n, res, c, class_count = _HEADER.unpack_from(blob)
    if c not in (1, 3) or class_count < 1 or res < 1:
        raise DataError(f"{path}: bad header (res={res}, c={c}, "
                        f"classes={class_count})")
    want = _HEADER.size + n + n * res * res * c
    if len(blob) != want:
        raise DataError(f"{path}: expected {want} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, dtype=np.uint8, count=n,
                           offset=_HEADER.size).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        raise DataError(f"{path}: label out of range")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size + n)
    images = pixels.reshape(n, res, res, c).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, class_count)


# ------------------------------------------------------------ CIFAR-10 bins

def load_cifar10(paths) -> LabeledDataset:
    """Read CIFAR-10 binary batches (3073-byte records, channel-planar)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, label_chunks = [], []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise DataError(f"no such file: {p}")
        blob = p.read_bytes()
        if len(blob) % 3073 != 0:
            raise DataError(f"{p}: size {len(blob)} is not a multiple of 3073")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
        label_chunks.append(rec[:, 0].astype(np.int64))
        planes = rec[:, 1:].reshape(-1, 3, 32, 32)
        chunks.append(planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
    labels = np.concatenate(label_chunks)
    if labels.size and labels.max() > 9:
        raise DataError("label byte exceeds 9")
    return LabeledDataset(np.concatenate(chunks), labels, 10)


# ------------------------------------------------------------ batch streams

def batch_iter(n: int, batch_size: int, seed: int, epoch: int,
               drop_last: bool = True):
    """Yield index batches from the (seed, epoch)-keyed shuffle."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = Rng(seed, 0x17E4, epoch).permutation(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]
