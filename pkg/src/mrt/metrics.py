"""PSNR and SSIM on premultiplied RGBA images in [0, 1].

Without a mask both metrics use all four channels over every pixel (merged
mode). With a mask they use RGB only, restricted to the masked pixels (layer
mode); ``layer_mask`` gives the usual non-transparent-pixel mask.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def layer_mask(ref: np.ndarray) -> np.ndarray:
    return ref[..., 3] > 0


def _check(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None and mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")


def mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    _check(a, b, mask)
    if mask is None:
        return float(np.mean((a - b) ** 2))
    if not mask.any():
        return float("nan")
    d = (a[..., :3] - b[..., :3])[mask]
    return float(np.mean(d ** 2))


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE); ``inf`` for identical inputs, ``nan`` for an empty mask."""
    err = mse(a, b, mask)
    if math.isnan(err):
        return err
    if err == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / err)


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
         window: int = SSIM_WINDOW) -> float:
    """Single-scale SSIM with uniform ``window`` x ``window`` windows (stride 1).

    Window statistics use population (1/n) moments. The score is the mean
    over channels and over windows that touch the mask. Pixels outside the
    mask are read as zero, so their stored values never matter.
    """
    _check(a, b, mask)
    h, w = a.shape[:2]
    wy, wx = min(window, h), min(window, w)
    chans = slice(0, 4) if mask is None else slice(0, 3)
    x = a[..., chans].astype(np.float64)
    y = b[..., chans].astype(np.float64)
    if mask is not None:
        x = np.where(mask[..., None], x, 0.0)
        y = np.where(mask[..., None], y, 0.0)
    xs = sliding_window_view(x, (wy, wx), axis=(0, 1))  # (H', W', C, wy, wx)
    ys = sliding_window_view(y, (wy, wx), axis=(0, 1))
    mx = xs.mean(axis=(-1, -2))
    my = ys.mean(axis=(-1, -2))
    vx = (xs ** 2).mean(axis=(-1, -2)) - mx ** 2
    vy = (ys ** 2).mean(axis=(-1, -2)) - my ** 2
    cxy = (xs * ys).mean(axis=(-1, -2)) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / \
        ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
    if mask is None:
        return float(s.mean())
    touched = sliding_window_view(mask, (wy, wx)).any(axis=(-1, -2))
    if not touched.any():
        return float("nan")
    return float(s[touched].mean())


def psnr_layer(pred: np.ndarray, ref: np.ndarray) -> float:
    return psnr(pred, ref, layer_mask(ref))


def ssim_layer(pred: np.ndarray, ref: np.ndarray) -> float:
    return ssim(pred, ref, layer_mask(ref))
