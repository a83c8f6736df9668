import numpy as np
import pytest
import torch
from hypothesis import settings

from mrt.canvas import LayerRecord, LayeredDesign, Rect

torch.set_num_threads(1)

settings.register_profile("mrt", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("mrt")


def rand_premul(rng: np.random.Generator, h: int, w: int, opaque: bool = False) -> np.ndarray:
    a = np.ones((h, w, 1)) if opaque else rng.random((h, w, 1))
    rgb = rng.random((h, w, 3)) * a
    return np.concatenate([rgb, a], axis=-1)


def rand_design(rng: np.random.Generator, canvas: int = 8, k: int = 3,
                bg: Rect | None = None) -> LayeredDesign:
    """Small random design whose foregrounds may overflow the visible rect."""
    bg = bg or Rect(1, 1, canvas - 2, canvas - 2)
    layers = [LayerRecord(rand_premul(rng, bg.h, bg.w), bg, 0, "background", "bg")]
    for i in range(1, k + 1):
        w = int(rng.integers(1, canvas + 1))
        h = int(rng.integers(1, canvas + 1))
        x = int(rng.integers(0, canvas - w + 1))
        y = int(rng.integers(0, canvas - h + 1))
        layers.append(LayerRecord(rand_premul(rng, h, w), Rect(x, y, w, h), i, "foreground",
                                  f"layer {i}"))
    return LayeredDesign(canvas, canvas, bg, tuple(layers), "random design")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._mrt_acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_mrt_acceptance", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
