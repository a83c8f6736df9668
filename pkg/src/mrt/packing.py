"""Regional token packing, per-task mask plans, and layer prompts.

Region ids: 0 is the composed image, 1 the background, ``i + 1`` foreground
layer ``i`` (1-based, ascending z), and ``K + 2 + j`` the j-th appended
restylization condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .canvas import DesignError, LayeredDesign, Rect, composite_layers, compose, visible_crop
from .codec import DEFAULT_PATCH, crop_padded, encode, snap_rect
from .synth import Layout, derive_layout

COMPOSED = 0
BACKGROUND = 1
TASK_KINDS = ("t2l", "i2l", "l2l-add", "l2l-restyle")
RESTYLE_PROMPT = "Harmonize these layers"


class Role(IntEnum):
    NOISED = 0
    MASKED = 1
    CONDITION = 2


def fg_region(i: int) -> int:
    return i + 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    targets: frozenset[int] = frozenset()
    conds: Mapping[int, np.ndarray] = field(default_factory=dict)
    caption: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task {self.kind!r}")
        object.__setattr__(self, "targets", frozenset(int(i) for i in self.targets))
        if self.kind.startswith("l2l") and not self.targets:
            raise ValueError(f"{self.kind} needs a non-empty target set")
        if self.kind == "l2l-restyle" and set(self.conds) != set(self.targets):
            raise ValueError("restyle conditions must be given for exactly the targets")


def mask_plan(task: TaskSpec, k: int) -> dict[int, Role]:
    """Role of every region for ``task`` on a design with ``k`` foregrounds."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if any(i < 1 or i > k for i in task.targets):
        raise DesignError(f"targets {sorted(task.targets)} out of range 1..{k}")
    plan: dict[int, Role] = {}
    if task.kind == "t2l":
        plan[COMPOSED] = Role.NOISED
        plan[BACKGROUND] = Role.NOISED
        plan.update({fg_region(i): Role.NOISED for i in range(1, k + 1)})
    elif task.kind == "i2l":
        plan[COMPOSED] = Role.MASKED
        plan[BACKGROUND] = Role.NOISED
        plan.update({fg_region(i): Role.NOISED for i in range(1, k + 1)})
    else:
        plan[COMPOSED] = Role.MASKED
        plan[BACKGROUND] = Role.MASKED
        for i in range(1, k + 1):
            plan[fg_region(i)] = Role.NOISED if i in task.targets else Role.MASKED
        if task.kind == "l2l-restyle":
            for j, i in enumerate(sorted(task.targets)):
                plan[k + 2 + j] = Role.CONDITION
    return plan


def condition_targets(task: TaskSpec, k: int) -> dict[int, int]:
    """Condition region id -> foreground region id it restyles."""
    if task.kind != "l2l-restyle":
        return {}
    return {k + 2 + j: fg_region(i) for j, i in enumerate(sorted(task.targets))}


def assemble_layer_prompt(captions: Sequence[str], targets: Iterable[int]) -> str:
    """``<layer> c_i </layer>`` for each target in layer order (1-based)."""
    idx = sorted(set(targets))
    if not idx:
        raise ValueError("layer prompt needs at least one target layer")
    if idx[0] < 1 or idx[-1] > len(captions):
        raise ValueError(f"targets {idx} out of range for {len(captions)} captions")
    return "".join(f"<layer> {captions[i - 1]} </layer>" for i in idx)


def restyle_prompt() -> str:
    return RESTYLE_PROMPT


@dataclass(frozen=True)
class RegionLatent:
    grid: np.ndarray  # (h, w, C)
    row: int  # origin cell in canvas latent coordinates
    col: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]


@dataclass(frozen=True)
class PackedSequence:
    tokens: np.ndarray  # (N, C)
    region: np.ndarray  # (N,) region id
    pos: np.ndarray  # (N, 2) (row, col)
    role: np.ndarray  # (N,) Role
    layer_id: np.ndarray  # (N,) region-embedding id
    geometry: tuple[tuple[int, int, int, int, int], ...]  # (region, row, col, h, w) in order
    k: int
    caption: str = ""
    kind: str = "t2l"

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def noised(self) -> np.ndarray:
        return self.role == Role.NOISED

    def with_tokens(self, tokens: np.ndarray) -> PackedSequence:
        if tokens.shape != self.tokens.shape:
            raise ValueError(f"token shape {tokens.shape} != {self.tokens.shape}")
        return replace(self, tokens=tokens)

    def with_caption(self, caption: str) -> PackedSequence:
        return replace(self, caption=caption)

    def translated(self, drow: int, dcol: int) -> PackedSequence:
        return replace(self, pos=self.pos + np.array([drow, dcol]))


def _region_cells(rect: Rect, s: int) -> tuple[int, int, int, int]:
    r = snap_rect(rect, s)
    return r.y // s, r.x // s, r.h // s, r.w // s


def pack(latents: Mapping[int, RegionLatent], layout: Layout, task: TaskSpec,
         s: int = DEFAULT_PATCH) -> PackedSequence:
    """Concatenate regions (composed, bg, fg by z, conditions) into one sequence."""
    k = len(layout) - 1
    plan = mask_plan(task, k)
    cond_of = condition_targets(task, k)
    expected = {BACKGROUND: _region_cells(layout.bg_rect, s)}
    for i, rect in enumerate(layout.fg_rects, 1):
        expected[fg_region(i)] = _region_cells(rect, s)
    if task.kind == "i2l":
        expected[COMPOSED] = _region_cells(layout.bg_rect, s)
    elif layout.canvas_w and layout.canvas_h:
        expected[COMPOSED] = _region_cells(Rect(0, 0, layout.canvas_w, layout.canvas_h), s)

    tokens, region, pos, role, layer_id, geometry = [], [], [], [], [], []
    for rid in sorted(r for r in plan if r not in cond_of):
        if rid not in latents:
            raise DesignError(f"missing latents for region {rid}")
        lat = latents[rid]
        h, w = lat.shape
        if rid in expected and expected[rid] != (lat.row, lat.col, h, w):
            raise DesignError(f"region {rid}: latent {(lat.row, lat.col, h, w)} "
                              f"does not match layout {expected[rid]}")
        _append(lat, rid, rid, plan[rid], tokens, region, pos, role, layer_id, geometry)
    for cid, target in cond_of.items():
        i = target - 1
        grid = np.asarray(task.conds[i])
        tgt = latents[target]
        if grid.shape != tgt.grid.shape:
            raise DesignError(f"condition for layer {i} has shape {grid.shape}, "
                              f"target has {tgt.grid.shape}")
        lat = RegionLatent(grid, tgt.row, tgt.col)
        _append(lat, cid, target, Role.CONDITION, tokens, region, pos, role, layer_id, geometry)

    return PackedSequence(
        tokens=np.concatenate(tokens, axis=0),
        region=np.concatenate(region), pos=np.concatenate(pos, axis=0),
        role=np.concatenate(role), layer_id=np.concatenate(layer_id),
        geometry=tuple(geometry), k=k, caption=task.caption, kind=task.kind)


def _append(lat, rid, lid, r, tokens, region, pos, role, layer_id, geometry):
    h, w, c = lat.grid.shape
    n = h * w
    rows, cols = np.mgrid[0:h, 0:w]
    tokens.append(lat.grid.reshape(n, c))
    region.append(np.full(n, rid, dtype=np.int64))
    pos.append(np.stack([rows.ravel() + lat.row, cols.ravel() + lat.col], axis=1).astype(np.int64))
    role.append(np.full(n, int(r), dtype=np.int64))
    layer_id.append(np.full(n, lid, dtype=np.int64))
    geometry.append((rid, lat.row, lat.col, h, w))


def unpack(seq: PackedSequence) -> dict[int, RegionLatent]:
    """Split a sequence back into region grids, dropping condition regions."""
    out = {}
    start = 0
    c = seq.tokens.shape[1]
    for rid, row, col, h, w in seq.geometry:
        n = h * w
        if seq.role[start] != Role.CONDITION:
            out[rid] = RegionLatent(seq.tokens[start:start + n].reshape(h, w, c), row, col)
        start += n
    return out


# -- design <-> region latents -------------------------------------------------

def layer_latent(image: np.ndarray, rect: Rect, s: int = DEFAULT_PATCH) -> RegionLatent:
    snapped = snap_rect(rect, s)
    padded = crop_padded(image, rect, snapped)
    return RegionLatent(encode(padded, s), snapped.y // s, snapped.x // s)


def composed_image(design: LayeredDesign, task: TaskSpec) -> tuple[np.ndarray, Rect]:
    """The composed-region pixels for ``task`` and the rect they cover."""
    full = Rect(0, 0, design.canvas_w, design.canvas_h)
    if task.kind == "i2l":
        return visible_crop(compose(design), design.bg_rect), design.bg_rect
    if task.kind in ("l2l-add", "l2l-restyle"):
        keep = [l for i, l in enumerate(design.layers) if i not in task.targets]
        return composite_layers(keep, design.canvas_w, design.canvas_h), full
    return compose(design), full


def design_latents(design: LayeredDesign, task: TaskSpec,
                   s: int = DEFAULT_PATCH) -> dict[int, RegionLatent]:
    img, rect = composed_image(design, task)
    out = {COMPOSED: layer_latent(img, rect, s)}
    for i, layer in enumerate(design.layers):
        out[fg_region(i)] = layer_latent(layer.image, layer.rect, s)  # i == 0 is the background
    return out


def pack_design(design: LayeredDesign, task: TaskSpec, s: int = DEFAULT_PATCH) -> PackedSequence:
    return pack(design_latents(design, task, s), derive_layout(design), task, s)
