"""Image-to-layers evaluation binned by foreground layer count."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .canvas import LayeredDesign, compose, visible_crop
from .codec import DEFAULT_PATCH
from .metrics import psnr, psnr_layer, ssim, ssim_layer
from .model import MRTModel
from .packing import unpack
from .sampler import SampleConfig, assemble_design, euler_sample_many, i2l_sequence
from .synth import derive_layout, global_caption

BIN_EDGES = (4, 8, 16, 32)
METRICS = ("psnr_merged", "ssim_merged", "psnr_layer", "ssim_layer")


def bin_name(k: int, edges: Sequence[int] = BIN_EDGES) -> str | None:
    for lo, hi in zip(edges, edges[1:]):
        if lo <= k < hi:
            return f"[{lo},{hi})"
    return None


def _mean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def design_metrics(pred: LayeredDesign, truth: LayeredDesign) -> dict:
    """Merged metrics on the visible region plus layer-averaged masked metrics."""
    merged_pred = visible_crop(compose(pred), truth.bg_rect)
    merged_true = visible_crop(compose(truth), truth.bg_rect)
    pl = [psnr_layer(p.image, t.image) for p, t in zip(pred.layers, truth.layers)]
    sl = [ssim_layer(p.image, t.image) for p, t in zip(pred.layers, truth.layers)]
    return {
        "layers": truth.num_foreground,
        "psnr_merged": psnr(merged_pred, merged_true),
        "ssim_merged": ssim(merged_pred, merged_true),
        "psnr_layer": _mean(pl),
        "ssim_layer": _mean(sl),
    }


@dataclass
class MetricReport:
    psnr_merged: float
    ssim_merged: float
    psnr_layer: float
    ssim_layer: float
    bins: dict[str, dict] = field(default_factory=dict)
    per_design: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"psnr_merged": self.psnr_merged, "ssim_merged": self.ssim_merged,
                "psnr_layer": self.psnr_layer, "ssim_layer": self.ssim_layer,
                "bins": self.bins, "per_design": self.per_design}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "count", *METRICS])
            for name, b in self.bins.items():
                w.writerow([name, b["count"], *(repr(b.get(m, float("nan"))) for m in METRICS)])


def summarize(rows: Sequence[dict], edges: Sequence[int] = BIN_EDGES) -> MetricReport:
    bins = {}
    for lo, hi in zip(edges, edges[1:]):
        name = f"[{lo},{hi})"
        members = [r for r in rows if lo <= r["layers"] < hi]
        entry: dict = {"count": len(members)}
        if members:
            entry.update({m: _mean([r[m] for r in members]) for m in METRICS})
        bins[name] = entry
    overall = {m: _mean([r[m] for r in rows]) for m in METRICS}
    return MetricReport(**overall, bins=bins, per_design=list(rows))


def decompose_many(model: MRTModel, designs: Sequence[LayeredDesign],
                   cfg: SampleConfig = SampleConfig(), caption_mode: str | None = "short",
                   s: int = DEFAULT_PATCH, chunk: int = 8) -> list[LayeredDesign]:
    """Image-to-layers on each design's own visible composite and layout."""
    seqs = []
    for d in designs:
        image = visible_crop(compose(d), d.bg_rect)
        caption = global_caption(d, caption_mode) if caption_mode else ""
        seqs.append(i2l_sequence(image, derive_layout(d), caption, s))
    out = []
    for i in range(0, len(seqs), chunk):
        for seq, d in zip(euler_sample_many(model, seqs[i:i + chunk], cfg),
                          designs[i:i + chunk]):
            pred, _ = assemble_design(unpack(seq), derive_layout(d), d.global_caption, s=s)
            out.append(pred)
    return out


def evaluate_i2l(model: MRTModel, designs: Sequence[LayeredDesign],
                 cfg: SampleConfig = SampleConfig(), caption_mode: str | None = "short",
                 s: int = DEFAULT_PATCH) -> MetricReport:
    preds = decompose_many(model, designs, cfg, caption_mode, s)
    return evaluate_predictions(preds, designs)


def evaluate_predictions(preds: Sequence[LayeredDesign],
                         truths: Sequence[LayeredDesign]) -> MetricReport:
    return summarize([design_metrics(p, t) for p, t in zip(preds, truths)])
