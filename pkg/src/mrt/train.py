"""Flow-matching training with task mixing, masked loss and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .canvas import LayeredDesign, group_layers
from .codec import DEFAULT_PATCH
from .model import MRTModel, ModelConfig, collate
from .packing import (PackedSequence, TaskSpec, assemble_layer_prompt, layer_latent,
                      pack_design, restyle_prompt)
from .synth import global_caption, restyle

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MRTCKPT1"
CKPT_VERSION = 1
TASK_GROUPS = ("t2l", "i2l", "l2l")


class NumericError(FloatingPointError):
    """NaN/Inf encountered during training or sampling."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    task_mix: tuple[float, float, float] = (0.70, 0.15, 0.15)
    restyle_share: float = 0.5
    group_prob: float = 0.3
    caption_mode: str = "mixed"
    null_caption_prob: float = 0.1
    i2l_caption_prob: float = 1.0
    seed: int = 0
    patch: int = DEFAULT_PATCH
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if abs(sum(self.task_mix) - 1.0) > 1e-9 or min(self.task_mix) < 0:
            raise ValueError(f"task_mix must be non-negative and sum to 1, got {self.task_mix}")
        for name in ("restyle_share", "group_prob", "null_caption_prob", "i2l_caption_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.caption_mode not in ("short", "long", "mixed"):
            raise ValueError(f"bad caption_mode {self.caption_mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        for k in ("task_mix", "betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- flow matching primitives ----------------------------------------------------

def interpolate(z0, eps, t):
    """Point on the straight path: ``(1 - t) z0 + t eps``."""
    if np.shape(z0) != np.shape(eps):
        raise ValueError("z0 and eps must have equal shapes")
    if np.min(t) < 0.0 or np.max(t) > 1.0:
        raise ValueError("t must lie in [0, 1]")
    return (1 - t) * z0 + t * eps


def velocity_target(z0, eps):
    return z0 - eps


def masked_flow_loss(pred: torch.Tensor, target: torch.Tensor, noised: torch.Tensor) -> torch.Tensor:
    """Mean squared error over noised tokens only (all channels)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    count = int(noised.sum()) * pred.shape[-1]
    if count == 0:
        raise ValueError("no noised tokens to supervise")
    # where(), not a multiply: NaN at masked slots must not reach value or gradient
    diff = torch.where(noised[..., None], pred - target, torch.zeros((), dtype=pred.dtype))
    return (diff * diff).sum() / count


# -- example construction ----------------------------------------------------

class TaskSampler:
    """Draws task variants and target subsets at the configured mix."""

    def __init__(self, mix: Sequence[float] = (0.70, 0.15, 0.15), restyle_share: float = 0.5):
        self.mix = np.asarray(mix, dtype=np.float64)
        self.restyle_share = restyle_share

    def group(self, rng: np.random.Generator) -> str:
        return TASK_GROUPS[int(rng.choice(3, p=self.mix))]

    def kind(self, rng: np.random.Generator) -> str:
        g = self.group(rng)
        if g != "l2l":
            return g
        return "l2l-restyle" if rng.random() < self.restyle_share else "l2l-add"


def sample_targets(k: int, rng: np.random.Generator) -> frozenset[int]:
    """Non-empty subset of 1..k; proper whenever k >= 2."""
    if k < 1:
        raise ValueError("layer-to-layer tasks need at least one foreground")
    if k == 1:
        return frozenset({1})
    size = int(rng.integers(1, k))
    return frozenset(int(i) + 1 for i in rng.choice(k, size=size, replace=False))


def maybe_group(design: LayeredDesign, prob: float, rng: np.random.Generator) -> LayeredDesign:
    """Layer grouping augmentation over a random z-contiguous run."""
    k = design.num_foreground
    if k < 2 or rng.random() >= prob:
        return design
    size = int(rng.integers(2, min(4, k) + 1))
    start = int(rng.integers(1, k - size + 2))
    return group_layers(design, range(start, start + size))


def build_task(design: LayeredDesign, kind: str, rng: np.random.Generator,
               caption_mode: str = "mixed", s: int = DEFAULT_PATCH,
               i2l_caption_prob: float = 1.0) -> TaskSpec:
    if kind in ("t2l", "i2l"):
        mode = caption_mode
        if mode == "mixed":
            mode = "short" if rng.random() < 0.5 else "long"
        caption = global_caption(design, mode)
        if kind == "i2l" and rng.random() >= i2l_caption_prob:
            caption = ""
        return TaskSpec(kind, caption=caption)
    targets = sample_targets(design.num_foreground, rng)
    if kind == "l2l-add":
        caps = [l.caption for l in design.foregrounds]
        return TaskSpec(kind, targets, caption=assemble_layer_prompt(caps, targets))
    conds = {}
    for i in sorted(targets):
        layer = design.layers[i]
        conds[i] = layer_latent(restyle(layer.image, rng), layer.rect, s).grid
    return TaskSpec(kind, targets, conds=conds, caption=restyle_prompt())


@dataclass
class Example:
    seq: PackedSequence  # noised slots hold z_t
    target: np.ndarray  # (N, C), zero outside noised slots
    t: float
    clean: PackedSequence


def make_training_example(design: LayeredDesign, sampler: TaskSampler | str,
                          rng: np.random.Generator, cfg: TrainConfig = TrainConfig()) -> Example:
    design = maybe_group(design, cfg.group_prob, rng)
    kind = sampler if isinstance(sampler, str) else sampler.kind(rng)
    if kind.startswith("l2l") and design.num_foreground == 0:
        kind = "t2l"
    task = build_task(design, kind, rng, cfg.caption_mode, cfg.patch, cfg.i2l_caption_prob)
    if rng.random() < cfg.null_caption_prob:
        task = replace(task, caption="")
    clean = pack_design(design, task, cfg.patch)
    t = float(rng.random())
    noised = clean.noised
    z0 = clean.tokens[noised]
    eps = rng.standard_normal(z0.shape)
    tokens = clean.tokens.copy()
    tokens[noised] = interpolate(z0, eps, t)
    target = np.zeros_like(tokens)
    target[noised] = velocity_target(z0, eps)
    return Example(clean.with_tokens(tokens), target, t, clean)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    train_config: TrainConfig | None = None
    opt_state: dict[str, torch.Tensor] = field(default_factory=dict)
    opt_step: int = 0
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list, repr=False)  # not serialized

    @property
    def distilled(self) -> bool:
        return bool(self.extra.get("distilled", False))

    def build_model(self, dtype=torch.float32) -> MRTModel:
        model = MRTModel(self.model_config)
        model.load_state_dict(self.params)
        return model.to(dtype)


def _write_tensor(buf: io.BytesIO, name: str, t: torch.Tensor) -> None:
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_tensor(buf: io.BytesIO) -> tuple[str, torch.Tensor]:
    (n,) = struct.unpack("<H", buf.read(2))
    name = buf.read(n).decode("utf-8")
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, torch.from_numpy(arr.astype(np.float32))


def _rng_json(state: dict | None) -> bytes:
    return json.dumps(state, sort_keys=True).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Little-endian: magic, header JSON, tensors, RNG state JSON."""
    header = {
        "format_version": CKPT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "step": ckpt.step,
        "opt_step": ckpt.opt_step,
        "distilled": ckpt.distilled,
        "extra": {k: v for k, v in ckpt.extra.items() if k != "distilled"},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    named = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    named += [(f"opt/{k}", v) for k, v in sorted(ckpt.opt_state.items())]
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        _write_tensor(buf, name, t)
    raw = _rng_json(ckpt.rng_state)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(8) != CKPT_MAGIC:
        raise ValueError(f"{path}: not an MRT checkpoint")
    (n,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(n))
    if header["format_version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    (count,) = struct.unpack("<I", buf.read(4))
    params, opt = {}, {}
    for _ in range(count):
        name, t = _read_tensor(buf)
        group, key = name.split("/", 1)
        (params if group == "param" else opt)[key] = t
    (n,) = struct.unpack("<Q", buf.read(8))
    rng_state = json.loads(buf.read(n))
    tc = header["train_config"]
    extra = dict(header.get("extra") or {})
    extra["distilled"] = header.get("distilled", False)
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]), params=params,
        train_config=TrainConfig.from_dict(tc) if tc else None, opt_state=opt,
        opt_step=header["opt_step"], step=header["step"], rng_state=rng_state, extra=extra)


# -- training loop -------------------------------------------------------------

def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def optimizer_tensors(model: torch.nn.Module, opt: torch.optim.Optimizer) -> tuple[dict, int]:
    out, step = {}, 0
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"exp_avg/{name}"] = st["exp_avg"]
        out[f"exp_avg_sq/{name}"] = st["exp_avg_sq"]
        step = int(st["step"])
    return out, step


def restore_optimizer(model: torch.nn.Module, opt: torch.optim.Optimizer,
                      tensors: dict, step: int) -> None:
    if not tensors:
        return
    for name, p in model.named_parameters():
        if f"exp_avg/{name}" not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": tensors[f"exp_avg/{name}"].clone().to(p.dtype),
            "exp_avg_sq": tensors[f"exp_avg_sq/{name}"].clone().to(p.dtype),
        }


class Trainer:
    """Holds model, optimizer and RNG; one call to :meth:`step` = one update."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig,
                 dataset: Sequence[LayeredDesign], resume: Checkpoint | None = None):
        if not dataset:
            raise ValueError("dataset is empty")
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.dataset = list(dataset)
        self.sampler = TaskSampler(cfg.task_mix, cfg.restyle_share)
        self.model = MRTModel(model_cfg)
        self.opt = make_optimizer(self.model, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        if resume is not None:
            self.model.load_state_dict(resume.params)
            restore_optimizer(self.model, self.opt, resume.opt_state, resume.opt_step)
            if resume.rng_state is not None:
                self.rng.bit_generator.state = resume.rng_state
            self.step_count = resume.step

    def batch(self) -> tuple[str, list[Example]]:
        kind = self.sampler.kind(self.rng)
        idx = self.rng.integers(0, len(self.dataset), size=self.cfg.batch_size)
        return kind, [make_training_example(self.dataset[int(i)], kind, self.rng, self.cfg)
                      for i in idx]

    def step(self) -> tuple[str, float]:
        kind, examples = self.batch()
        self.model.train()
        b = collate([e.seq for e in examples], self.model_cfg.vocab, self.model.dtype)
        n = b.tokens.shape[1]
        target = torch.zeros_like(b.tokens)
        for i, e in enumerate(examples):
            target[i, :len(e.seq)] = torch.as_tensor(e.target, dtype=b.tokens.dtype)
        t = torch.tensor([e.t for e in examples], dtype=b.tokens.dtype)
        pred = self.model(b.tokens, t, b)
        loss = masked_flow_loss(pred, target, b.noised)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step_count} (task {kind}, N={n})")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return kind, loss.item()

    def checkpoint(self) -> Checkpoint:
        opt_state, opt_step = optimizer_tensors(self.model, self.opt)
        return Checkpoint(
            model_config=self.model_cfg,
            params={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            train_config=self.cfg, opt_state={k: v.detach().clone() for k, v in opt_state.items()},
            opt_step=opt_step, step=self.step_count, rng_state=self.rng.bit_generator.state)


def train(model_cfg: ModelConfig, cfg: TrainConfig, dataset: Sequence[LayeredDesign],
          resume: Checkpoint | None = None, steps: int | None = None,
          loss_log: str | Path | None = None,
          callback: Callable[[int, str, float], None] | None = None) -> Checkpoint:
    """Run ``steps`` updates (default ``cfg.steps``) and return the final state."""
    trainer = Trainer(model_cfg, cfg, dataset, resume)
    total = cfg.steps if steps is None else steps
    rows = []
    for _ in range(total):
        kind, loss = trainer.step()
        rows.append((trainer.step_count, kind, loss))
        if callback:
            callback(trainer.step_count, kind, loss)
        if trainer.step_count % 100 == 0:
            log.info("step %d task %s loss %.5f", trainer.step_count, kind, loss)
    if loss_log is not None:
        write_loss_log(rows, loss_log, append=resume is not None)
    ckpt = trainer.checkpoint()
    ckpt.losses = [r[2] for r in rows]
    return ckpt


def write_loss_log(rows, path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "task", "loss"])
        for step, kind, loss in rows:
            w.writerow([step, kind, repr(float(loss))])
