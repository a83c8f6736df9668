import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rand_premul
from mrt.canvas import DesignError, Rect
from mrt.codec import (clamp_premultiplied, crop_padded, decode, encode, latent_channels,
                       snap_rect, token_count)


def test_snap_examples():
    assert snap_rect(Rect(8, 16, 24, 8), 8) == Rect(8, 16, 24, 8)
    assert snap_rect(Rect(1, 1, 2, 2), 8) == Rect(0, 0, 8, 8)
    assert snap_rect(Rect(-3, -9, 2, 1), 8) == Rect(-8, -16, 8, 8)


def test_snap_minimal_exhaustive():
    """Against every aligned container on a small grid."""
    s = 3
    cand = np.array(list(itertools.product(range(-12, 12, s), range(-12, 12, s),
                                           range(s, 16, s), range(s, 16, s))))
    cx, cy, cw, ch = cand.T
    for x, y, w, h in itertools.product(range(-4, 4), range(-4, 4), range(1, 6), range(1, 6)):
        r = Rect(x, y, w, h)
        got = snap_rect(r, s)
        assert got.contains(r) and got.x % s == 0 and got.y % s == 0
        assert got.w % s == 0 and got.h % s == 0
        ok = (cx <= x) & (cy <= y) & (cx + cw >= x + w) & (cy + ch >= y + h)
        assert got.w * got.h == (cw * ch)[ok].min()


def test_token_count_law():
    r = Rect(3, 5, 17, 9)
    sr = snap_rect(r, 8)
    assert token_count(r, 8) == (sr.w // 8) * (sr.h // 8) == 3 * 2


def test_shapes_and_zero():
    assert encode(np.zeros((8, 8, 4))).shape == (1, 1, 256)
    assert not encode(np.zeros((16, 24, 4))).any()
    assert latent_channels(8) == 256


def test_patch_layout(rng):
    img = rand_premul(rng, 16, 8)
    g = encode(img, 8)
    # cell (1, 0) holds rows 8..15, flattened (dy, dx, channel)
    assert np.array_equal(g[1, 0], img[8:16, 0:8].reshape(-1))


def test_non_divisible():
    with pytest.raises(DesignError):
        encode(np.zeros((8, 12, 4)), 8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]))
def test_round_trips(seed, gh, gw, s):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((gh * s, gw * s, 4))
    assert np.array_equal(decode(encode(img, s)), img)
    grid = rng.standard_normal((gh, gw, 4 * s * s))
    assert np.array_equal(encode(decode(grid), s), grid)


@given(st.integers(0, 2**32 - 1))
def test_linearity(seed):
    rng = np.random.default_rng(seed)
    x, y = rand_premul(rng, 16, 16), rand_premul(rng, 16, 16)
    a, b = rng.random(2)
    np.testing.assert_allclose(encode(a * x + b * y), a * encode(x) + b * encode(y), atol=1e-15)


def test_clamp_reports_fraction():
    img = np.zeros((1, 2, 4))
    img[0, 0] = [0.5, 0, 0, 0.25]  # r > a
    img[0, 1] = [0, 0, 0, 1.5]  # a > 1
    out, frac = clamp_premultiplied(img)
    assert frac == pytest.approx(2 / 8)
    assert np.all(out[..., :3] <= out[..., 3:4]) and out.max() <= 1


def test_crop_padded():
    img = np.ones((2, 2, 4))
    out = crop_padded(img, Rect(1, 1, 2, 2), Rect(0, 0, 2, 2))
    assert out[1, 1].tolist() == [1, 1, 1, 1] and out[..., 3].sum() == 1
