"""Analytic token / FLOP / activation-memory model.

Compares regional packing (composed + background + each layer's snapped
crop) against a baseline that spends a full canvas worth of tokens on every
layer. FLOPs per transformer block are ``4 N^2 d`` for the two attention
matmuls plus ``2 (4 + 2 r) N d^2`` for the projections and MLP (``r`` the MLP
ratio).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .canvas import Rect
from .codec import DEFAULT_PATCH, token_count
from .synth import GenParams, Layout, derive_layout, gen_design, sample_seed

ACT_WORDS_PER_TOKEN = 16  # stored activation words per token per block, in units of d
# generator area distribution at a 512 px visible region (64 x 64 tokens at s=8);
# at training scale the visible region is only 4-6 tokens wide and snapping dominates
BENCH_PARAMS = GenParams(bg_size=(512, 512))


@dataclass(frozen=True)
class ModelDims:
    dim: int = 3584
    depth: int = 60
    heads: int = 24
    mlp_ratio: int = 4
    bytes_per_value: int = 2


@dataclass(frozen=True)
class CostReport:
    layers: int
    tokens_regional: int
    tokens_fullres: int
    flops_regional: float
    flops_fullres: float
    quad_flops_regional: float
    quad_flops_fullres: float
    memory_regional: float
    memory_fullres: float

    @property
    def token_ratio(self) -> float:
        return self.tokens_fullres / self.tokens_regional

    @property
    def flop_ratio(self) -> float:
        return self.flops_fullres / self.flops_regional

    @property
    def quad_flop_ratio(self) -> float:
        return self.quad_flops_fullres / self.quad_flops_regional

    @property
    def memory_ratio(self) -> float:
        return self.memory_fullres / self.memory_regional

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(token_ratio=self.token_ratio, flop_ratio=self.flop_ratio,
                 quad_flop_ratio=self.quad_flop_ratio, memory_ratio=self.memory_ratio)
        return d


def quad_flops(n: int, dims: ModelDims) -> float:
    return float(dims.depth) * 4.0 * n * n * dims.dim


def block_flops(n: int, dims: ModelDims) -> float:
    linear = 2.0 * (4 + 2 * dims.mlp_ratio) * n * dims.dim ** 2
    return float(dims.depth) * (4.0 * n * n * dims.dim + linear)


def activation_bytes(n: int, dims: ModelDims, materialize_attention: bool = True) -> float:
    act = float(n) * dims.dim * dims.depth * ACT_WORDS_PER_TOKEN
    work = float(dims.heads) * n * n if materialize_attention else 0.0
    return (act + work) * dims.bytes_per_value


def token_budget(canvas_tokens: int, bg_tokens: int, layer_tokens: Sequence[int],
                 cond_tokens: int = 0) -> tuple[int, int]:
    """(regional, full-resolution-per-layer) token counts."""
    regional = canvas_tokens + bg_tokens + sum(layer_tokens) + cond_tokens
    fullres = (len(layer_tokens) + 2) * canvas_tokens
    return regional, fullres


def cost_from_tokens(k: int, regional: int, fullres: int, dims: ModelDims = ModelDims(),
                     materialize_attention: bool = True) -> CostReport:
    return CostReport(
        layers=k, tokens_regional=regional, tokens_fullres=fullres,
        flops_regional=block_flops(regional, dims), flops_fullres=block_flops(fullres, dims),
        quad_flops_regional=quad_flops(regional, dims), quad_flops_fullres=quad_flops(fullres, dims),
        memory_regional=activation_bytes(regional, dims, materialize_attention),
        memory_fullres=activation_bytes(fullres, dims, materialize_attention))


def cost_model(layout: Layout, s: int = DEFAULT_PATCH, dims: ModelDims = ModelDims(),
               cond_tokens: int = 0, materialize_attention: bool = True) -> CostReport:
    canvas = token_count(Rect(0, 0, layout.canvas_w, layout.canvas_h), s)
    bg = token_count(layout.bg_rect, s)
    layers = [token_count(r, s) for r in layout.fg_rects]
    regional, fullres = token_budget(canvas, bg, layers, cond_tokens)
    return cost_from_tokens(len(layers), regional, fullres, dims, materialize_attention)


def synthetic_layouts(k: int, count: int, seed: int = 0,
                      params: GenParams = BENCH_PARAMS) -> list[Layout]:
    p = replace(params, layers=(k, k))
    return [derive_layout(gen_design(sample_seed(seed, i), p)) for i in range(count)]


def average_cost(layouts: Iterable[Layout], s: int = DEFAULT_PATCH,
                 dims: ModelDims = ModelDims()) -> dict:
    """Mean costs and mean per-layout ratios over a set of layouts."""
    reports = [cost_model(l, s, dims) for l in layouts]
    keys = ("tokens_regional", "tokens_fullres", "flops_regional", "flops_fullres",
            "memory_regional", "memory_fullres")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    for k in ("token_ratio", "flop_ratio", "quad_flop_ratio", "memory_ratio"):
        out[k] = float(np.mean([getattr(r, k) for r in reports]))
    out["layers"] = reports[0].layers if reports else 0
    out["samples"] = len(reports)
    return out


def bench_efficiency(layer_counts: Iterable[int], samples: int = 64, seed: int = 0,
                     s: int = DEFAULT_PATCH, dims: ModelDims = ModelDims(),
                     params: GenParams = BENCH_PARAMS) -> list[dict]:
    return [average_cost(synthetic_layouts(k, samples, seed, params), s, dims)
            for k in layer_counts]


def write_rows(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(list(rows), indent=2, sort_keys=True) + "\n")
        return path
    fields = sorted(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path
