"""Lossless patch codec between RGBA images and latent grids.

A latent grid has shape ``(H // s, W // s, 4 * s * s)``; each cell holds one
``s x s`` RGBA patch flattened row-major as ``(dy, dx, channel)``.
"""

from __future__ import annotations

import math

import numpy as np

from .canvas import DesignError, Rect

DEFAULT_PATCH = 8


def latent_channels(s: int = DEFAULT_PATCH) -> int:
    return 4 * s * s


def patch_size_of(grid: np.ndarray) -> int:
    s = math.isqrt(grid.shape[-1] // 4)
    if 4 * s * s != grid.shape[-1]:
        raise DesignError(f"channel count {grid.shape[-1]} is not 4*s^2")
    return s


def snap_rect(rect: Rect, s: int = DEFAULT_PATCH) -> Rect:
    """Smallest s-aligned rect containing ``rect``."""
    if s < 1:
        raise ValueError("patch size must be >= 1")
    x0 = (rect.x // s) * s
    y0 = (rect.y // s) * s
    x1 = -((-rect.x1) // s) * s
    y1 = -((-rect.y1) // s) * s
    return Rect(x0, y0, x1 - x0, y1 - y0)


def token_count(rect: Rect, s: int = DEFAULT_PATCH) -> int:
    r = snap_rect(rect, s)
    return (r.w // s) * (r.h // s)


def encode(img: np.ndarray, s: int = DEFAULT_PATCH) -> np.ndarray:
    h, w, c = img.shape
    if c != 4:
        raise DesignError(f"expected RGBA image, got {c} channels")
    if h % s or w % s:
        raise DesignError(f"image {w}x{h} not divisible by patch size {s}")
    grid = img.reshape(h // s, s, w // s, s, 4).transpose(0, 2, 1, 3, 4)
    return grid.reshape(h // s, w // s, 4 * s * s).copy()


def decode(grid: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`encode`. Values are returned unclamped."""
    s = patch_size_of(grid)
    gh, gw, _ = grid.shape
    img = grid.reshape(gh, gw, s, s, 4).transpose(0, 2, 1, 3, 4)
    return img.reshape(gh * s, gw * s, 4).copy()


def clamp_premultiplied(img: np.ndarray) -> tuple[np.ndarray, float]:
    """Project onto valid premultiplied RGBA; also return the fraction of
    values that had to move."""
    a = np.clip(img[..., 3:4], 0.0, 1.0)
    rgb = np.clip(img[..., :3], 0.0, a)
    out = np.concatenate([rgb, a], axis=-1)
    moved = float(np.mean(out != img)) if img.size else 0.0
    return out, moved


def crop_padded(img: np.ndarray, src: Rect, window: Rect) -> np.ndarray:
    """Cut ``window`` (canvas coords) out of an image covering ``src``,
    padding with transparency where the window leaves ``src``."""
    out = np.zeros((window.h, window.w, 4), dtype=img.dtype)
    hit = src.intersect(window)
    if hit is not None:
        out[hit.y - window.y:hit.y1 - window.y, hit.x - window.x:hit.x1 - window.x] = \
            img[hit.y - src.y:hit.y1 - src.y, hit.x - src.x:hit.x1 - src.x]
    return out
