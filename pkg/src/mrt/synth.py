"""Procedural layered designs with overflow elements, captions and layouts.

Geometry is integer-valued and colors come from integer draws, so a design is
a pure function of ``(seed, params)`` on any platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .canvas import LayerRecord, LayeredDesign, Rect, bounding_rect, load_bundle, save_bundle
from .codec import DEFAULT_PATCH, snap_rect

SHAPES = ("solid rect", "circle", "ring", "gradient band", "glyph strip")
CAPTION_MODES = ("short", "long", "mixed")

_PALETTE = {
    "black": (0, 0, 0), "white": (255, 255, 255), "red": (220, 40, 40),
    "orange": (245, 140, 30), "yellow": (240, 220, 50), "green": (50, 170, 70),
    "teal": (30, 160, 160), "blue": (40, 90, 220), "purple": (140, 60, 190),
    "pink": (240, 130, 180), "brown": (130, 80, 40), "gray": (128, 128, 128),
}
_ROWS = ("top", "middle", "bottom")
_COLS = ("left", "center", "right")


@dataclass(frozen=True)
class GenParams:
    bg_size: tuple[int, int] = (32, 48)
    layers: tuple[int, int] = (4, 31)
    overflow_prob: float = 0.6
    shapes: tuple[str, ...] = SHAPES
    caption_mode: str = "mixed"
    short_prob: float = 0.5
    patch: int = DEFAULT_PATCH
    max_overflow: int = 12

    def __post_init__(self):
        lo, hi = self.bg_size
        if lo < self.patch or hi < lo or lo % self.patch or hi % self.patch:
            raise ValueError(f"bg_size {self.bg_size} must be ordered multiples of {self.patch}")
        if self.layers[0] < 0 or self.layers[1] < self.layers[0]:
            raise ValueError(f"bad layer range {self.layers}")
        for p in (self.overflow_prob, self.short_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.caption_mode not in CAPTION_MODES:
            raise ValueError(f"unknown caption mode {self.caption_mode!r}")
        if not self.shapes or set(self.shapes) - set(SHAPES):
            raise ValueError(f"unknown shapes in {self.shapes}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GenParams:
        d = dict(d)
        for k in ("bg_size", "layers", "shapes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Layout:
    """Placement rects with z, background first."""
    entries: tuple[tuple[Rect, int], ...]
    canvas_w: int = 0
    canvas_h: int = 0

    def __post_init__(self):
        zs = [z for _, z in self.entries]
        if not zs:
            raise ValueError("layout needs a background entry")
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ValueError("layout z must be strictly increasing")

    @property
    def bg_rect(self) -> Rect:
        return self.entries[0][0]

    @property
    def fg_rects(self) -> list[Rect]:
        return [r for r, _ in self.entries[1:]]

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {"canvas_w": self.canvas_w, "canvas_h": self.canvas_h,
                "entries": [{"rect": r.as_list(), "z": z} for r, z in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> Layout:
        return cls(tuple((Rect(*e["rect"]), e["z"]) for e in d["entries"]),
                   d.get("canvas_w", 0), d.get("canvas_h", 0))


def derive_layout(design: LayeredDesign) -> Layout:
    return Layout(tuple((l.rect, l.z) for l in design.layers), design.canvas_w, design.canvas_h)


def sample_seed(dataset_seed: int, index: int) -> int:
    """Independent 64-bit seed for sample ``index`` of a dataset."""
    ss = np.random.SeedSequence([dataset_seed & (2**64 - 1), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# -- shape rasterization --------------------------------------------------------

def _ellipse(w: int, h: int, scale: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (2 * xx + 1 - w) / w
    v = (2 * yy + 1 - h) / h
    return (u * u + v * v) <= scale * scale


def _shape_alpha(shape: str, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "solid rect":
        return np.ones((h, w))
    if shape == "circle":
        return _ellipse(w, h).astype(float)
    if shape == "ring":
        return (_ellipse(w, h) & ~_ellipse(w, h, 0.55)).astype(float)
    if shape == "gradient band":
        return np.ones((h, w))
    if shape == "glyph strip":
        cells = rng.integers(0, 2, size=(max(h // 2, 1), max(w // 2, 1)))
        mask = np.kron(cells, np.ones((2, 2)))[:h, :w]
        out = np.zeros((h, w))
        out[:mask.shape[0], :mask.shape[1]] = mask
        return out
    raise ValueError(shape)


def _draw_color(rng: np.random.Generator) -> tuple[str, np.ndarray]:
    names = list(_PALETTE)
    name = names[int(rng.integers(0, len(names)))]
    base = np.array(_PALETTE[name], dtype=np.int64)
    jitter = rng.integers(-20, 21, size=3)
    return name, np.clip(base + jitter, 0, 255) / 255.0


def _render(shape: str, w: int, h: int, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    name, color = _draw_color(rng)
    alpha_scale = 1.0 if rng.integers(0, 10) < 7 else int(rng.integers(128, 256)) / 255.0
    mask = _shape_alpha(shape, w, h, rng) * alpha_scale
    rgb = np.broadcast_to(color, (h, w, 3)).copy()
    if shape == "gradient band":
        _, other = _draw_color(rng)
        ramp = (np.arange(w) / max(w - 1, 1))[None, :, None]
        rgb = (1 - ramp) * color + ramp * other
    img = np.concatenate([rgb * mask[..., None], mask[..., None]], axis=-1)
    return img, name


def _render_background(w: int, h: int, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    name, top = _draw_color(rng)
    _, bottom = _draw_color(rng)
    alpha = 1.0 if rng.integers(0, 5) else int(rng.integers(160, 256)) / 255.0
    ramp = (np.arange(h) / max(h - 1, 1))[:, None, None]
    rgb = np.broadcast_to((1 - ramp) * top + ramp * bottom, (h, w, 3))
    img = np.concatenate([rgb * alpha, np.full((h, w, 1), alpha)], axis=-1)
    return img, name


def _position_bucket(rect: Rect, bg: Rect) -> str:
    cx2 = 2 * rect.x + rect.w - 2 * bg.x
    cy2 = 2 * rect.y + rect.h - 2 * bg.y
    col = min(max(cx2 * 3 // (2 * bg.w), 0), 2)
    row = min(max(cy2 * 3 // (2 * bg.h), 0), 2)
    if row == 1 and col == 1:
        return "center"
    return f"{_ROWS[row]}-{_COLS[col]}"


def _place_rect(w: int, h: int, bg: Rect, overflow: bool, rng: np.random.Generator) -> Rect:
    if not overflow:
        x = bg.x + int(rng.integers(0, bg.w - w + 1))
        y = bg.y + int(rng.integers(0, bg.h - h + 1))
        return Rect(x, y, w, h)
    side = int(rng.integers(0, 4))
    # at least one pixel outside and one inside the visible region
    if side in (0, 1):
        y = bg.y + int(rng.integers(0, bg.h - h + 1))
        out = int(rng.integers(1, w))
        x = bg.x - out if side == 0 else bg.x1 - w + out
    else:
        x = bg.x + int(rng.integers(0, bg.w - w + 1))
        out = int(rng.integers(1, h))
        y = bg.y - out if side == 2 else bg.y1 - h + out
    return Rect(x, y, w, h)


def global_caption(design: LayeredDesign, mode: str) -> str:
    fgs = design.foregrounds
    bg = design.background.caption
    if mode == "short":
        if not fgs:
            return f"A plain design with {bg}."
        top = fgs[-1].caption
        text = f"A design with {len(fgs)} layers over {bg}, topped by {top}."
        if len(text) > 200:
            text = f"A design with {len(fgs)} layers over {bg}."
        return text
    if mode == "long":
        parts = [f"A layered design over {bg}."]
        parts += [f"Layer {i}: {l.caption}." for i, l in enumerate(fgs, 1)]
        return " ".join(parts)
    raise ValueError(f"caption mode must be short or long, got {mode!r}")


def gen_design(seed: int, params: GenParams = GenParams()) -> LayeredDesign:
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
    s = params.patch
    bw = s * int(rng.integers(params.bg_size[0] // s, params.bg_size[1] // s + 1))
    bh = s * int(rng.integers(params.bg_size[0] // s, params.bg_size[1] // s + 1))
    k = int(rng.integers(params.layers[0], params.layers[1] + 1))
    overflow = bool(rng.random() < params.overflow_prob) and k > 0
    spill = set()
    if overflow:
        n = int(rng.integers(1, min(3, k) + 1))
        spill = set(int(i) for i in rng.choice(k, size=n, replace=False))

    bg = Rect(0, 0, bw, bh)
    max_side = max(6, min(bw, bh) // 2)
    specs = []
    for i in range(k):
        shape = params.shapes[int(rng.integers(0, len(params.shapes)))]
        if shape == "glyph strip":
            w = int(rng.integers(8, max(9, min(bw, 3 * max_side // 2))))
            h = int(rng.integers(4, 7))
        else:
            w = int(rng.integers(4, max_side + 1))
            h = int(rng.integers(4, max_side + 1))
        if i in spill:
            w = min(w + params.max_overflow // 2, bw)
            h = min(h + params.max_overflow // 2, bh)
        rect = _place_rect(w, h, bg, i in spill, rng)
        specs.append((shape, rect))

    # canvas: patch-aligned container of everything, origin moved to (0, 0)
    box = snap_rect(bounding_rect([bg] + [r for _, r in specs]), s)
    dx, dy = -box.x, -box.y
    bg = bg.shifted(dx, dy)

    bg_img, bg_name = _render_background(bw, bh, rng)
    layers = [LayerRecord(bg_img, bg, 0, "background", f"a {bg_name} background")]
    for i, (shape, rect) in enumerate(specs, 1):
        img, color = _render(shape, rect.w, rect.h, rng)
        rect = rect.shifted(dx, dy)
        caption = f"a {color} {shape} at {_position_bucket(rect, bg)}"
        layers.append(LayerRecord(img, rect, i, "foreground", caption))

    design = LayeredDesign(box.w, box.h, bg, tuple(layers),
                           meta={"seed": seed, "overflow": overflow})
    mode = params.caption_mode
    if mode == "mixed":
        mode = "short" if rng.random() < params.short_prob else "long"
    return replace(design, global_caption=global_caption(design, mode),
                   meta={**design.meta, "caption_mode": mode})


def has_overflow(design: LayeredDesign) -> bool:
    return any(not design.bg_rect.contains(l.rect) for l in design.foregrounds)


def gen_dataset(seed: int, count: int, params: GenParams = GenParams()) -> list[LayeredDesign]:
    return [gen_design(sample_seed(seed, i), params) for i in range(count)]


def write_dataset(seed: int, count: int, out: str | Path,
                  params: GenParams = GenParams()) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(count):
        sseed = sample_seed(seed, i)
        design = gen_design(sseed, params)
        name = f"design_{i:05d}"
        save_bundle(design, out / name)
        index.append({"index": i, "seed": sseed, "path": name,
                      "num_layers": design.num_foreground})
    doc = {"format": "mrt-dataset/1", "seed": seed, "count": count,
           "params": params.to_dict(), "designs": index}
    (out / "dataset.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> list[LayeredDesign]:
    path = Path(path)
    doc = json.loads((path / "dataset.json").read_text())
    return [load_bundle(path / d["path"]) for d in doc["designs"]]


def restyle(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Procedural style transfer: hue rotation plus a stripe texture.

    Alpha is untouched, so the restyled layer keeps the original silhouette.
    """
    angle = 2 * np.pi * int(rng.integers(1, 12)) / 12
    axis = np.ones(3) / np.sqrt(3)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    a = img[..., 3:4]
    rgb = img[..., :3] @ rot.T
    period = int(rng.integers(2, 5))
    stripes = ((np.arange(img.shape[0]) // period) % 2)[:, None, None]
    rgb = rgb * (0.85 + 0.15 * stripes)
    rgb = np.clip(rgb, 0.0, a)
    return np.concatenate([rgb, a], axis=-1)


def layer_count_bins(designs: Sequence[LayeredDesign],
                     edges: Sequence[int] = (4, 8, 16, 32)) -> dict[str, list[int]]:
    """Indices of designs per ``[lo, hi)`` foreground-count bin."""
    bins = {f"[{lo},{hi})": [] for lo, hi in zip(edges, edges[1:])}
    for i, d in enumerate(designs):
        for lo, hi in zip(edges, edges[1:]):
            if lo <= d.num_foreground < hi:
                bins[f"[{lo},{hi})"].append(i)
    return bins
