import math

import numpy as np
import pytest

from mrt.metrics import SSIM_C1, SSIM_C2, layer_mask, psnr, psnr_layer, ssim, ssim_layer

from conftest import rand_premul


def brute_psnr(a, b, mask=None):
    total, n = 0.0, 0
    h, w = a.shape[:2]
    chans = range(4) if mask is None else range(3)
    for y in range(h):
        for x in range(w):
            if mask is not None and not mask[y][x]:
                continue
            for c in chans:
                total += (float(a[y][x][c]) - float(b[y][x][c])) ** 2
                n += 1
    return 10 * math.log10(n / total)


def brute_ssim(a, b, mask=None, win=8):
    """Loop implementation of the windowed formula with population moments."""
    h, w = a.shape[:2]
    chans = range(4) if mask is None else range(3)
    vals = []
    for y0 in range(h - win + 1):
        for x0 in range(w - win + 1):
            cells = [(y, x) for y in range(y0, y0 + win) for x in range(x0, x0 + win)]
            if mask is not None and not any(mask[y][x] for y, x in cells):
                continue
            for c in chans:
                def val(img, y, x):
                    if mask is not None and not mask[y][x]:
                        return 0.0
                    return float(img[y][x][c])
                xs = [val(a, y, x) for y, x in cells]
                ys = [val(b, y, x) for y, x in cells]
                n = len(cells)
                mx, my = sum(xs) / n, sum(ys) / n
                vx = sum((v - mx) ** 2 for v in xs) / n
                vy = sum((v - my) ** 2 for v in ys) / n
                cxy = sum((p - mx) * (q - my) for p, q in zip(xs, ys)) / n
                vals.append((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
                            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
    return sum(vals) / len(vals)


@pytest.mark.parametrize("seed", range(5))
def test_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_premul(rng, 16, 16), rand_premul(rng, 16, 16)
    b[:5, :7] = 0.0  # transparent corner for the layer mask
    m = layer_mask(b)
    assert abs(psnr(a, b) - brute_psnr(a, b)) <= 1e-6
    assert abs(psnr(a, b, m) - brute_psnr(a, b, m)) <= 1e-6
    assert abs(ssim(a, b) - brute_ssim(a, b)) <= 1e-6
    assert abs(ssim(a, b, m) - brute_ssim(a, b, m)) <= 1e-6


def test_identical(rng):
    a = rand_premul(rng, 9, 9)
    assert psnr(a, a) == math.inf
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert psnr_layer(a, a) == math.inf and ssim_layer(a, a) == pytest.approx(1.0, abs=1e-12)


def test_psnr_20db():
    a = np.zeros((4, 4, 4))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_symmetry(rng):
    a, b = rand_premul(rng, 12, 10), rand_premul(rng, 12, 10)
    assert ssim(a, b) == ssim(b, a)
    assert psnr(a, b) == psnr(b, a)


def test_constant_vs_inverted():
    a = np.full((8, 8, 4), 0.25)
    b = 1.0 - a
    # zero variance windows: ((2 mu_x mu_y + C1) C2) / ((mu_x^2 + mu_y^2 + C1) C2)
    expected = (2 * 0.25 * 0.75 + SSIM_C1) / (0.25 ** 2 + 0.75 ** 2 + SSIM_C1)
    assert abs(ssim(a, b) - expected) <= 1e-6


def test_empty_mask_is_nan(rng):
    a = rand_premul(rng, 8, 8)
    z = np.zeros_like(a)
    assert math.isnan(psnr_layer(a, z)) and math.isnan(ssim_layer(a, z))


def test_transparent_pixels_ignored(rng):
    a, b = rand_premul(rng, 16, 16), rand_premul(rng, 16, 16)
    b[4:12, 4:12, 3] = 0.0
    b[4:12, 4:12, :3] = 0.0
    p0, s0 = psnr_layer(a, b), ssim_layer(a, b)
    for _ in range(10):
        a2, b2 = a.copy(), b.copy()
        a2[4:12, 4:12] = rng.random((8, 8, 4))
        b2[4:12, 4:12, :3] = rng.random((8, 8, 3))  # colour garbage under alpha 0
        assert psnr_layer(a2, b2) == p0 and ssim_layer(a2, b2) == s0


def test_ssim_range(rng):
    for _ in range(20):
        v = ssim(rand_premul(rng, 10, 10), rand_premul(rng, 10, 10))
        assert -1.0 <= v <= 1.0


def test_shape_errors(rng):
    with pytest.raises(ValueError):
        psnr(rand_premul(rng, 4, 4), rand_premul(rng, 4, 5))
    with pytest.raises(ValueError):
        ssim(rand_premul(rng, 4, 4), rand_premul(rng, 4, 4), np.ones((3, 3), bool))
