"""Image datasets: binary file format, seeded sub-selection, batching, synthetic data.

File layout (little endian)::

    b"LQGD"  u32 n  u32 H  u32 W  u32 C   then n*H*W*C float32 pixels in [0, 1]
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lqgan.errors import DataError
from lqgan.rng import stream

MAGIC = b"LQGD"
PIXEL_TOL = 1e-6
SYNTH_KINDS = ("gaussian-blobs", "striped-fields")


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, H, W, C), float32 in [0, 1]
    source: str = "memory"
    seed: int | None = None
    labels: np.ndarray | None = None
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError("images must be (n, H, W, C)", shape=list(self.images.shape))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.images.shape

    def split(self, val_fraction: float = 0.1) -> tuple["ImageDataset", "ImageDataset"]:
        """Deterministic head/tail split of the (already shuffled) selection."""
        n_val = int(round(len(self) * val_fraction))
        n_train = len(self) - n_val
        lab = self.labels
        return (
            ImageDataset(self.images[:n_train], self.source, self.seed, None if lab is None else lab[:n_train]),
            ImageDataset(self.images[n_train:], self.source, self.seed, None if lab is None else lab[n_train:]),
        )


def check_pixels(images: np.ndarray, where: str = "") -> None:
    if not np.all(np.isfinite(images)):
        raise DataError("non-finite pixel values", where=where)
    lo, hi = float(images.min(initial=0.0)), float(images.max(initial=0.0))
    if lo < -PIXEL_TOL or hi > 1.0 + PIXEL_TOL:
        raise DataError("pixel values outside [0, 1]", where=where, min=lo, max=hi)


def save_dataset(path: str | os.PathLike, dataset: ImageDataset | np.ndarray) -> None:
    images = dataset.images if isinstance(dataset, ImageDataset) else np.asarray(dataset)
    if images.ndim != 4:
        raise DataError("images must be (n, H, W, C)", shape=list(images.shape))
    check_pixels(images, str(path))
    n, h, w, c = images.shape
    header = MAGIC + struct.pack("<4I", n, h, w, c)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> ImageDataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}", path=str(path)) from exc
    if len(buf) < 20 or buf[:4] != MAGIC:
        raise DataError("bad dataset magic", path=str(path))
    n, h, w, c = struct.unpack_from("<4I", buf, 4)
    expected = n * h * w * c * 4
    if len(buf) - 20 != expected:
        raise DataError(
            "header count does not match payload size",
            path=str(path),
            header_bytes=expected,
            payload_bytes=len(buf) - 20,
        )
    images = np.frombuffer(buf, dtype="<f4", offset=20).reshape(n, h, w, c).astype(np.float32)
    check_pixels(images, str(path))
    return ImageDataset(images, source=str(path))


def subselect(dataset: ImageDataset, n: int, seed: int) -> ImageDataset:
    """Seeded sample of ``n`` images without replacement."""
    if n > len(dataset) or n < 1:
        raise DataError("sub-selection size out of range", requested=n, available=len(dataset))
    idx = stream(seed, "data/subselect").permutation(len(dataset))[:n]
    labels = None if dataset.labels is None else dataset.labels[idx]
    return ImageDataset(dataset.images[idx], dataset.source, seed, labels, idx)


def epoch_batches(n: int, batch: int, seed: int, epoch: int, min_size: int = 1) -> list[np.ndarray]:
    """Index batches covering ``range(n)`` exactly once, shuffled by (seed, epoch).

    A trailing batch smaller than ``min_size`` is dropped.
    """
    order = stream(seed, f"data/shuffle/{epoch}").permutation(n)
    out = [order[i : i + batch] for i in range(0, n, batch)]
    if out and len(out[-1]) < min_size:
        out.pop()
    return out


def synth_dataset(n: int, seed: int, kind: str = "gaussian-blobs", size: int = 28, channels: int = 3) -> ImageDataset:
    """Procedural 4-class images in [0, 1] for desk-scale experiments."""
    if n < 1:
        raise DataError("need at least one image", n=n)
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}", choices=list(SYNTH_KINDS))
    rng = stream(seed, f"data/synth/{kind}")
    labels = rng.integers(0, 4, size=n)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    # per-class palettes: background, foreground (rows = class)
    bg = np.array([[0.15, 0.45, 0.15], [0.55, 0.45, 0.30], [0.10, 0.20, 0.55], [0.75, 0.75, 0.70]])[:, :channels]
    fg = np.array([[0.85, 0.80, 0.20], [0.20, 0.60, 0.25], [0.90, 0.30, 0.20], [0.25, 0.25, 0.30]])[:, :channels]
    images = np.empty((n, size, size, channels))
    for i, cls in enumerate(labels):
        if kind == "gaussian-blobs":
            cy, cx = 0.25 + 0.5 * rng.random(2)
            sigma = 0.08 + 0.10 * rng.random() + 0.05 * cls
            mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        else:
            angle = cls * np.pi / 4 + 0.2 * rng.standard_normal()
            freq = 3.0 + cls + rng.random()
            phase = 2 * np.pi * rng.random()
            mask = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img = bg[cls] + mask[..., None] * (fg[cls] - bg[cls])
        img = img + 0.03 * rng.standard_normal(img.shape)
        images[i] = img
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ImageDataset(images, source=f"synth:{kind}", seed=seed, labels=labels)


def convert_array(array: np.ndarray, layout: str = "nhwc", drop_channels: int = 0, scale: float | None = None) -> np.ndarray:
    """Turn an external image tensor into LQGD-ready (n, H, W, C) floats in [0, 1].

    ``layout`` is the input axis order ("nhwc" or "nchw"); ``drop_channels``
    removes trailing channels (a 4-band source with the NIR band last uses 1);
    ``scale`` divides pixel values (255 for 8-bit data; inferred when None).
    """
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise DataError("expected a 4-d image tensor", shape=list(arr.shape))
    if layout == "nchw":
        arr = arr.transpose(0, 2, 3, 1)
    elif layout != "nhwc":
        raise DataError(f"unknown layout {layout!r}")
    if drop_channels:
        arr = arr[..., : arr.shape[-1] - drop_channels]
    arr = arr.astype(np.float64)
    if scale is None:
        scale = 255.0 if arr.max(initial=0.0) > 1.0 + PIXEL_TOL else 1.0
    arr = arr / scale
    check_pixels(arr, "convert")
    return np.clip(arr, 0.0, 1.0).astype(np.float32)
