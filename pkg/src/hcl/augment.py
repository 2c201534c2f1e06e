"""View sampling, the crop/flip/jitter pipeline and rectangle IoU between views.

Images are float arrays ``[3, H, W]`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

_MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class ViewRect:
    """Crop rectangle in original-image pixels plus a horizontal-flip flag."""

    x0: int
    y0: int
    w: int
    h: int
    flipped: bool = False

    @property
    def area(self) -> int:
        return self.w * self.h

    def validate(self, H: int, W: int) -> None:
        if self.w < 1 or self.h < 1 or self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"invalid view {self}")
        if self.x0 + self.w > W or self.y0 + self.h > H:
            raise ValueError(f"view {self} exceeds a {H}x{W} image")


@dataclass(frozen=True)
class AugConfig:
    area_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    flip_enabled: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    out_size: int = 64

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"area_range must satisfy 0 < min <= max <= 1, got {self.area_range}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        for s in (self.brightness, self.contrast, self.saturation):
            if not 0 <= s <= 1:
                raise ValueError("jitter strengths must lie in [0, 1]")

    @property
    def jitter(self) -> tuple[float, float, float]:
        return (self.brightness, self.contrast, self.saturation)

    def crop_only(self) -> "AugConfig":
        """Same crop geometry with flipping and colour jitter switched off."""
        return replace(self, flip_enabled=False, brightness=0.0, contrast=0.0, saturation=0.0)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``, e.g. ``(seed, stage, epoch, sample_index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _area_ok(w: int, h: int, H: int, W: int, cfg: AugConfig) -> bool:
    frac = (w * h) / (H * W)
    return cfg.area_range[0] <= frac <= cfg.area_range[1]


def _fallback(H: int, W: int, cfg: AugConfig) -> tuple[int, int]:
    """Largest centred rectangle within the aspect range that also meets the area range."""
    lo, hi = cfg.aspect_range
    ratio = W / H
    if ratio < lo:
        w, h = W, int(round(W / lo))
    elif ratio > hi:
        w, h = int(round(H * hi)), H
    else:
        w, h = W, H
    w, h = max(1, min(w, W)), max(1, min(h, H))
    if not _area_ok(w, h, H, W, cfg):
        # area has priority over aspect: shrink towards the permitted area
        target = cfg.area_range[1] * H * W
        scale = math.sqrt(target / (w * h))
        w = max(1, min(W, int(math.floor(w * scale))))
        h = max(1, min(H, int(math.floor(h * scale))))
        while not _area_ok(w, h, H, W, cfg) and (w < W or h < H):
            if w < W:
                w += 1
            else:
                h += 1
    return w, h


def sample_view(rng: np.random.Generator, H: int, W: int, cfg: AugConfig) -> ViewRect:
    """Random-resized-crop rectangle: rejection sampling over (area, log-aspect), then a centred fallback."""
    if H < 1 or W < 1:
        raise ValueError(f"image extent must be positive, got {H}x{W}")
    total = H * W
    log_lo, log_hi = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
    rect = None
    for _ in range(_MAX_ATTEMPTS):
        target = total * rng.uniform(*cfg.area_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H and _area_ok(w, h, H, W, cfg):
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            rect = (x0, y0, w, h)
            break
    if rect is None:
        w, h = _fallback(H, W, cfg)
        rect = ((W - w) // 2, (H - h) // 2, w, h)
    flipped = bool(rng.random() < 0.5) if cfg.flip_enabled else False
    return ViewRect(*rect, flipped=flipped)


def view_iou(v1: ViewRect, v2: ViewRect) -> float:
    """Intersection over union of two rectangles on the original image plane (flip ignored)."""
    ix = max(0, min(v1.x0 + v1.w, v2.x0 + v2.w) - max(v1.x0, v2.x0))
    iy = max(0, min(v1.y0 + v1.h, v2.y0 + v2.h) - max(v1.y0, v2.y0))
    inter = ix * iy
    union = v1.area + v2.area - inter
    return inter / union


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` with half-pixel centres and clamped borders."""
    _, H, W = image.shape
    if (H, W) == (out_h, out_w):
        return image.copy()
    y0, y1, fy = _interp_axis(H, out_h)
    x0, x1, fx = _interp_axis(W, out_w)
    fy = fy.astype(image.dtype)[None, :, None]
    fx = fx.astype(image.dtype)[None, None, :]
    rows = image[:, y0, :] * (1 - fy) + image[:, y1, :] * fy
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def _gray(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def color_jitter(image: np.ndarray, rng: np.random.Generator, strengths=(0.4, 0.4, 0.4)) -> np.ndarray:
    """Brightness, contrast, then saturation, each by a factor drawn from ``[1-s, 1+s]``.

    Each stage clamps to ``[0, 1]``; a zero strength leaves the image untouched
    and draws nothing from ``rng``.
    """
    b, c, s = strengths
    out = image
    if b > 0:
        out = np.clip(out * rng.uniform(1 - b, 1 + b), 0.0, 1.0)
    if c > 0:
        mean = _gray(out).mean()
        out = np.clip((out - mean) * rng.uniform(1 - c, 1 + c) + mean, 0.0, 1.0)
    if s > 0:
        gray = _gray(out)[None]
        out = np.clip((out - gray) * rng.uniform(1 - s, 1 + s) + gray, 0.0, 1.0)
    return out.astype(image.dtype, copy=False)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def apply_view(
    image: np.ndarray,
    rect: ViewRect,
    cfg: AugConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``s(x, v)``: crop, bilinear resize to ``cfg.out_size``, optional flip, colour jitter.

    Jitter is applied only when ``rng`` is given and a strength is non-zero.
    """
    _, H, W = image.shape
    rect.validate(H, W)
    crop = image[:, rect.y0 : rect.y0 + rect.h, rect.x0 : rect.x0 + rect.w]
    out = resize_bilinear(crop, cfg.out_size, cfg.out_size)
    if rect.flipped:
        out = out[:, :, ::-1]
    if rng is not None and any(s > 0 for s in cfg.jitter):
        out = color_jitter(out, rng, cfg.jitter)
    return np.ascontiguousarray(out)


def augment_pair(
    image: np.ndarray, cfg: AugConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, ViewRect, ViewRect]:
    """Two independent views of ``image``; returns both samples and their rectangles."""
    _, H, W = image.shape
    v1 = sample_view(rng, H, W, cfg)
    v2 = sample_view(rng, H, W, cfg)
    x1 = apply_view(image, v1, cfg, rng)
    x2 = apply_view(image, v2, cfg, rng)
    return x1, x2, v1, v2
