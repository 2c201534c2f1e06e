"""Image datasets: a procedural generator and a raw fixed-record corpus format.

Corpus records are ``u8 label | u8[S*S] red | u8[S*S] green | u8[S*S] blue``
with no header; the label byte is read and discarded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .augment import sample_rng


class CorpusFormatError(ValueError):
    """The corpus file length does not divide into whole records."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    pixels: np.ndarray


class Dataset:
    """Immutable set of equally sized images with unique integer ids."""

    def __init__(self, ids, images: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
            raise ValueError(f"images must be [n, 3, S, S], got {images.shape}")
        if len(ids) != len(images) or len(ids) < 1:
            raise ValueError("need at least one image and one id per image")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        self.ids = ids
        self.images = images
        self.ids.setflags(write=False)
        self.images.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(int(self.ids[i]), self.images[i])

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def split(self, holdout: float) -> tuple["Dataset", "Dataset"]:
        """Leading ``1 - holdout`` fraction and the trailing remainder."""
        if not 0 < holdout < 1:
            raise ValueError("holdout fraction must lie in (0, 1)")
        cut = len(self) - max(1, int(round(len(self) * holdout)))
        if cut < 1:
            raise ValueError("holdout leaves no training records")
        return Dataset(self.ids[:cut], self.images[:cut]), Dataset(self.ids[cut:], self.images[cut:])


# ---------------------------------------------------------------------------
# synthetic generator


def _background(rng: np.random.Generator, S: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy) / S + 0.5
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    freq = rng.uniform(2, 6)
    phase = rng.uniform(0, 2 * np.pi)
    tex_angle = rng.uniform(0, np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(tex_angle) * xx + np.sin(tex_angle) * yy) / S + phase)
    img = img + 0.06 * wave[None]
    img = img + 0.03 * rng.standard_normal((3, S, S))
    return img


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img[:, mask] = color[:, None]


def synthetic_image(rng: np.random.Generator, S: int) -> np.ndarray:
    """One image: textured gradient background plus 3-6 rectangles, discs and oriented bars."""
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    img = _background(rng, S, yy, xx)
    for _ in range(int(rng.integers(3, 7))):
        kind = int(rng.integers(0, 3))
        color = rng.uniform(0, 1, size=3)
        cx, cy = rng.uniform(0.1 * S, 0.9 * S, size=2)
        if kind == 0:
            hw, hh = rng.uniform(0.08 * S, 0.25 * S, size=2)
            mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        elif kind == 1:
            r = rng.uniform(0.06 * S, 0.2 * S)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            theta = rng.uniform(0, np.pi)
            length = rng.uniform(0.25 * S, 0.6 * S)
            half_width = rng.uniform(0.03 * S, 0.07 * S)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            mask = (np.abs(u) <= length / 2) & (np.abs(v) <= half_width)
        _paint(img, mask, color)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(seed: int, n: int, size: int, dtype=np.float32) -> Dataset:
    """``n`` procedural images with ids ``0..n-1``; image ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if size < 1:
        raise ValueError("size must be positive")
    images = np.empty((n, 3, size, size), dtype=dtype)
    for i in range(n):
        images[i] = synthetic_image(sample_rng(seed, 0x5EED, i), size)
    return Dataset(np.arange(n), images)


# ---------------------------------------------------------------------------
# corpus format


def record_length(size: int) -> int:
    return 1 + 3 * size * size


def save_corpus(dataset: Dataset, path: str | os.PathLike, labels=None) -> None:
    """Write ``dataset`` quantised to bytes (``round(255 * v)``); labels default to zero."""
    n, S = len(dataset), dataset.size
    recs = np.zeros((n, record_length(S)), dtype=np.uint8)
    if labels is not None:
        recs[:, 0] = np.asarray(labels, dtype=np.uint8)
    pix = np.clip(np.rint(np.asarray(dataset.images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    recs[:, 1:] = pix.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(recs.tobytes())


def load_corpus(path: str | os.PathLike, size: int, dtype=np.float32) -> Dataset:
    """Parse a raw corpus of ``size x size`` images; ids are record indices."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rec = record_length(size)
    if len(raw) == 0 or len(raw) % rec:
        raise CorpusFormatError(
            f"{path}: {len(raw)} bytes is not a positive multiple of the {rec}-byte record length "
            f"for {size}x{size} images ({len(raw) % rec} trailing bytes)"
        )
    n = len(raw) // rec
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    images = (recs[:, 1:].reshape(n, 3, size, size).astype(dtype)) / dtype(255.0)
    return Dataset(np.arange(n), images)


# ---------------------------------------------------------------------------
# iteration


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return sample_rng(seed, 0xB47C, epoch).permutation(n)


def iterate_batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(ids, images)`` batches covering every record once, in a ``(seed, epoch)`` permutation."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.ids[idx], dataset.images[idx]
