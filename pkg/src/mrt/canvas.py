"""Layered RGBA documents and premultiplied source-over compositing.

Images are ``float64`` arrays of shape ``(H, W, 4)`` holding premultiplied
RGBA in ``[0, 1]``. Rects live in canvas pixel coordinates with a top-left
origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

BUNDLE_FORMAT = "mrt-bundle/1"
PREMUL_TOL = 1e-9


class DesignError(ValueError):
    """A layered design or image violates its invariants."""


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DesignError(f"rect must have positive size, got {self}")

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    def contains(self, other: Rect) -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def intersect(self, other: Rect) -> Rect | None:
        x0, y0 = max(self.x, other.x), max(self.y, other.y)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x1 <= x0 or y1 <= y0:
            return None
        return Rect(x0, y0, x1 - x0, y1 - y0)

    def union(self, other: Rect) -> Rect:
        x0, y0 = min(self.x, other.x), min(self.y, other.y)
        return Rect(x0, y0, max(self.x1, other.x1) - x0, max(self.y1, other.y1) - y0)

    def shifted(self, dx: int, dy: int) -> Rect:
        return Rect(self.x + dx, self.y + dy, self.w, self.h)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


def bounding_rect(rects: Iterable[Rect]) -> Rect:
    rects = list(rects)
    out = rects[0]
    for r in rects[1:]:
        out = out.union(r)
    return out


@dataclass(frozen=True)
class LayerRecord:
    image: np.ndarray
    rect: Rect
    z: int
    kind: str = "foreground"
    caption: str = ""


@dataclass(frozen=True)
class LayeredDesign:
    canvas_w: int
    canvas_h: int
    bg_rect: Rect
    layers: tuple[LayerRecord, ...]
    global_caption: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def background(self) -> LayerRecord:
        return self.layers[0]

    @property
    def foregrounds(self) -> tuple[LayerRecord, ...]:
        return self.layers[1:]

    @property
    def num_foreground(self) -> int:
        return len(self.layers) - 1


def blank(width: int, height: int) -> np.ndarray:
    return np.zeros((height, width, 4), dtype=np.float64)


def check_image(img: np.ndarray, tol: float = PREMUL_TOL) -> None:
    """Raise DesignError unless ``img`` is a valid premultiplied RGBA image."""
    if img.ndim != 3 or img.shape[2] != 4 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DesignError(f"expected (H, W, 4) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DesignError("image contains non-finite values")
    a = img[..., 3]
    if a.min() < -tol or a.max() > 1 + tol:
        raise DesignError("alpha outside [0, 1]")
    rgb = img[..., :3]
    if rgb.min() < -tol or np.any(rgb > a[..., None] + tol):
        raise DesignError("color exceeds alpha; image is not premultiplied")


def over(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Source-over of two premultiplied images of equal size."""
    if fg.shape != bg.shape:
        raise DesignError(f"over: size mismatch {fg.shape} vs {bg.shape}")
    return fg + (1.0 - fg[..., 3:4]) * bg


def place(layer: LayerRecord, canvas_w: int, canvas_h: int) -> np.ndarray:
    """Write a layer into a transparent canvas; out-of-bounds pixels are dropped."""
    out = blank(canvas_w, canvas_h)
    r = layer.rect
    hit = r.intersect(Rect(0, 0, canvas_w, canvas_h))
    if hit is None:
        return out
    out[hit.y:hit.y1, hit.x:hit.x1] = layer.image[
        hit.y - r.y:hit.y1 - r.y, hit.x - r.x:hit.x1 - r.x]
    return out


def composite_layers(layers: Sequence[LayerRecord], canvas_w: int, canvas_h: int) -> np.ndarray:
    """Fold ``over`` from lowest z upward onto transparency."""
    out = blank(canvas_w, canvas_h)
    for layer in sorted(layers, key=lambda l: l.z):
        r = layer.rect
        hit = r.intersect(Rect(0, 0, canvas_w, canvas_h))
        if hit is None:
            continue
        # only the covered window changes, so composite in place there
        window = out[hit.y:hit.y1, hit.x:hit.x1]
        src = layer.image[hit.y - r.y:hit.y1 - r.y, hit.x - r.x:hit.x1 - r.x]
        out[hit.y:hit.y1, hit.x:hit.x1] = over(src, window)
    return out


def compose(design: LayeredDesign) -> np.ndarray:
    return composite_layers(design.layers, design.canvas_w, design.canvas_h)


def visible_crop(img: np.ndarray, rect: Rect) -> np.ndarray:
    h, w = img.shape[:2]
    if not Rect(0, 0, w, h).contains(rect):
        raise DesignError(f"crop {rect} outside image of size {w}x{h}")
    return img[rect.y:rect.y1, rect.x:rect.x1].copy()


def canvas_layer(design: LayeredDesign) -> np.ndarray:
    """The full-extent base plane, transparent by construction."""
    return blank(design.canvas_w, design.canvas_h)


def validate_design(design: LayeredDesign) -> None:
    if design.canvas_w <= 0 or design.canvas_h <= 0:
        raise DesignError("canvas dimensions must be positive")
    if not design.layers:
        raise DesignError("design has no layers")
    canvas = Rect(0, 0, design.canvas_w, design.canvas_h)
    if not canvas.contains(design.bg_rect):
        raise DesignError("bg_rect not inside canvas")
    kinds = [l.kind for l in design.layers]
    if kinds.count("background") != 1 or kinds[0] != "background":
        raise DesignError("need exactly one background layer at the bottom")
    if design.background.rect != design.bg_rect:
        raise DesignError("background rect differs from bg_rect")
    zs = [l.z for l in design.layers]
    if any(b <= a for a, b in zip(zs, zs[1:])):
        raise DesignError("layers must be sorted by strictly increasing z")
    for layer in design.layers:
        if layer.kind not in ("background", "foreground"):
            raise DesignError(f"unknown layer kind {layer.kind!r}")
        if layer.image.shape[:2] != (layer.rect.h, layer.rect.w):
            raise DesignError(f"layer z={layer.z}: image size does not match rect")
        if not canvas.contains(layer.rect):
            raise DesignError(f"layer z={layer.z} extends beyond the canvas")
        check_image(layer.image)


def clip_design(design: LayeredDesign, rect: Rect) -> LayeredDesign:
    """Restrict a design to ``rect``; the result's canvas is ``rect`` itself."""
    layers = []
    for layer in design.layers:
        hit = layer.rect.intersect(rect)
        if hit is None:
            continue
        r = layer.rect
        img = layer.image[hit.y - r.y:hit.y1 - r.y, hit.x - r.x:hit.x1 - r.x].copy()
        layers.append(replace(layer, image=img, rect=hit.shifted(-rect.x, -rect.y)))
    bg = design.bg_rect.intersect(rect)
    bg_rect = bg.shifted(-rect.x, -rect.y) if bg is not None else Rect(0, 0, rect.w, rect.h)
    return replace(design, canvas_w=rect.w, canvas_h=rect.h, bg_rect=bg_rect,
                   layers=tuple(layers))


def group_layers(design: LayeredDesign, indices: Iterable[int]) -> LayeredDesign:
    """Merge z-contiguous foreground layers (by list index) into one layer.

    The merged layer covers the members' bounding rect, takes the topmost
    member's z, and joins captions bottom-to-top.
    """
    idx = sorted(set(indices))
    if not idx:
        raise DesignError("group_layers needs at least one index")
    if idx[0] < 0 or idx[-1] >= len(design.layers):
        raise DesignError(f"layer index out of range: {idx}")
    if any(design.layers[i].kind == "background" for i in idx):
        raise DesignError("background cannot be grouped")
    if idx != list(range(idx[0], idx[-1] + 1)):
        raise DesignError(f"indices {idx} are not contiguous in z-order")
    members = [design.layers[i] for i in idx]
    box = bounding_rect(m.rect for m in members)
    shifted = [replace(m, rect=m.rect.shifted(-box.x, -box.y)) for m in members]
    merged = LayerRecord(
        image=composite_layers(shifted, box.w, box.h),
        rect=box,
        z=members[-1].z,
        kind="foreground",
        caption="; ".join(m.caption for m in members if m.caption),
    )
    layers = design.layers[:idx[0]] + (merged,) + design.layers[idx[-1] + 1:]
    return replace(design, layers=layers)


# -- bundle I/O ---------------------------------------------------------------

def to_straight_u8(img: np.ndarray) -> np.ndarray:
    a = img[..., 3:4]
    rgb = np.divide(img[..., :3], a, out=np.zeros_like(img[..., :3]), where=a > 0)
    straight = np.concatenate([np.clip(rgb, 0, 1), np.clip(a, 0, 1)], axis=-1)
    return np.rint(straight * 255).astype(np.uint8)


def from_straight_u8(arr: np.ndarray) -> np.ndarray:
    x = arr.astype(np.float64) / 255.0
    return np.concatenate([x[..., :3] * x[..., 3:4], x[..., 3:4]], axis=-1)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip an image through the 8-bit straight-alpha file encoding."""
    return from_straight_u8(to_straight_u8(img))


def save_bundle(design: LayeredDesign, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": BUNDLE_FORMAT,
        "canvas_w": design.canvas_w,
        "canvas_h": design.canvas_h,
        "bg_rect": design.bg_rect.as_list(),
        "global_caption": design.global_caption,
        "layers": [
            {"rect": l.rect.as_list(), "z": l.z, "kind": l.kind, "caption": l.caption,
             "file": f"layer_{l.z}.png"}
            for l in design.layers
        ],
    }
    if design.meta:
        manifest["meta"] = design.meta
    for layer in design.layers:
        Image.fromarray(to_straight_u8(layer.image), "RGBA").save(
            path / f"layer_{layer.z}.png", optimize=False)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path: str | Path) -> LayeredDesign:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DesignError(f"{path}: unsupported bundle format {manifest.get('format')!r}")
    layers = []
    for entry in manifest["layers"]:
        with Image.open(path / entry["file"]) as im:
            arr = np.asarray(im.convert("RGBA"))
        layers.append(LayerRecord(image=from_straight_u8(arr), rect=Rect(*entry["rect"]),
                                  z=entry["z"], kind=entry["kind"], caption=entry["caption"]))
    design = LayeredDesign(
        canvas_w=manifest["canvas_w"], canvas_h=manifest["canvas_h"],
        bg_rect=Rect(*manifest["bg_rect"]), layers=tuple(layers),
        global_caption=manifest["global_caption"], meta=manifest.get("meta", {}))
    validate_design(design)
    return design
