"""Distribution-matching distillation of a multi-step flow into a few-step student.

The KL gradient is estimated in velocity form: at a noised student sample the
score difference between the student-fitted critic and the teacher is
proportional to ``v_critic - v_teacher``, so following ``-(v_critic -
v_teacher)`` moves student samples toward the teacher distribution. No
adversarial term is used.

Every field here is a module called as ``field(x, t, ctx)`` with ``x`` of
shape (B, N, C), ``t`` of shape (B,) and an arbitrary context (a
:class:`~mrt.model.SeqBatch` for the layered model, ``None`` for toys).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .canvas import LayeredDesign
from .model import MRTModel, collate, params_digest
from .sampler import euler_integrate
from .train import (Checkpoint, NumericError, TaskSampler, TrainConfig, make_training_example,
                    masked_flow_loss)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    student_steps: int = 8
    critic_ratio: int = 5
    lr_student: float = 1e-4
    lr_critic: float = 1e-4
    iterations: int = 200
    batch_size: int = 4
    task_mix: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")
        if self.critic_ratio < 1:
            raise ValueError("critic_ratio must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DistillConfig:
        d = dict(d)
        if "task_mix" in d:
            d["task_mix"] = tuple(d["task_mix"])
        return cls(**d)


@dataclass
class Batch:
    """Conditioning for one distillation step."""
    ctx: object
    clean: torch.Tensor  # (B, N, C) clean values at masked/condition slots
    noised: torch.Tensor  # (B, N) bool


def _field_fn(model: nn.Module, ctx):
    def v(x, t):
        return model(x, torch.full((x.shape[0],), t, dtype=x.dtype), ctx)
    return v


def student_generate(student: nn.Module, batch: Batch, noise: torch.Tensor, steps: int,
                     grad: bool = False) -> torch.Tensor:
    """``steps``-step Euler rollout of the student from ``noise`` with pinning."""
    with torch.set_grad_enabled(grad):
        return euler_integrate(_field_fn(student, batch.ctx), noise, batch.clean,
                               batch.noised, steps)


def dmd_student_gradient(teacher: nn.Module, critic: nn.Module, samples: torch.Tensor,
                         batch: Batch, rng: np.random.Generator) -> torch.Tensor:
    """Gradient of the distribution-matching objective w.r.t. student samples.

    Zero at masked/condition slots.
    """
    x = samples.detach()
    if not torch.isfinite(x).all():
        raise NumericError("non-finite student samples")
    b = x.shape[0]
    t = torch.as_tensor(rng.random(b), dtype=x.dtype)
    eps = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=x.dtype)
    tt = t.view(b, *([1] * (x.dim() - 1)))
    keep = batch.noised[..., None]
    xt = torch.where(keep, (1 - tt) * x + tt * eps, batch.clean)
    with torch.no_grad():
        g = critic(xt, t, batch.ctx) - teacher(xt, t, batch.ctx)
    if not torch.isfinite(g).all():
        raise NumericError("non-finite distillation gradient")
    return torch.where(keep, g, torch.zeros((), dtype=g.dtype))


def critic_update(critic: nn.Module, opt: torch.optim.Optimizer | None, samples: torch.Tensor,
                  batch: Batch, rng: np.random.Generator) -> float:
    """One flow-matching step of the critic on student samples as data.

    With ``opt=None`` only the loss is evaluated.
    """
    z0 = samples.detach()
    b = z0.shape[0]
    t = torch.as_tensor(rng.random(b), dtype=z0.dtype)
    eps = torch.as_tensor(rng.standard_normal(tuple(z0.shape)), dtype=z0.dtype)
    tt = t.view(b, *([1] * (z0.dim() - 1)))
    keep = batch.noised[..., None]
    zt = torch.where(keep, (1 - tt) * z0 + tt * eps, batch.clean)
    with torch.set_grad_enabled(opt is not None):
        loss = masked_flow_loss(critic(zt, t, batch.ctx), z0 - eps, batch.noised)
    if not torch.isfinite(loss):
        raise NumericError("non-finite critic loss")
    if opt is not None:
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return float(loss.detach())


@dataclass
class DistillResult:
    student: nn.Module
    critic: nn.Module
    critic_losses: list[float] = field(default_factory=list)
    student_losses: list[float] = field(default_factory=list)


def distill_fields(teacher: nn.Module, make_batch: Callable[[np.random.Generator], Batch],
                   cfg: DistillConfig,
                   callback: Callable[[int, float, float], None] | None = None) -> DistillResult:
    """Alternate critic and student updates; the teacher is never modified."""
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = copy.deepcopy(teacher)
    critic = copy.deepcopy(teacher)
    for m in (student, critic):
        for p in m.parameters():
            p.requires_grad_(True)
    opt_s = torch.optim.AdamW(student.parameters(), lr=cfg.lr_student, weight_decay=0.0)
    opt_c = torch.optim.AdamW(critic.parameters(), lr=cfg.lr_critic, weight_decay=0.0)
    rng = np.random.default_rng(cfg.seed)
    res = DistillResult(student, critic)
    dtype = next(teacher.parameters()).dtype
    for it in range(cfg.iterations):
        batch = make_batch(rng)
        noise = torch.as_tensor(rng.standard_normal(tuple(batch.clean.shape)), dtype=dtype)
        fake = student_generate(student, batch, noise, cfg.student_steps)
        closs = 0.0
        for _ in range(cfg.critic_ratio):
            closs = critic_update(critic, opt_c, fake, batch, rng)

        noise = torch.as_tensor(rng.standard_normal(tuple(batch.clean.shape)), dtype=dtype)
        x = student_generate(student, batch, noise, cfg.student_steps, grad=True)
        g = dmd_student_gradient(teacher, critic, x, batch, rng)
        count = max(int(batch.noised.sum()) * x.shape[-1], 1)
        # surrogate whose gradient w.r.t. x is g / count
        sloss = (x * g).sum() / count
        opt_s.zero_grad(set_to_none=True)
        sloss.backward()
        opt_s.step()
        gnorm = float(g.pow(2).sum().div(count).sqrt())
        res.critic_losses.append(closs)
        res.student_losses.append(gnorm)
        if callback:
            callback(it + 1, closs, gnorm)
    return res


# -- layered model ------------------------------------------------------------

def layered_batch_maker(designs: Sequence[LayeredDesign], model: MRTModel,
                        cfg: DistillConfig, train_cfg: TrainConfig | None = None):
    train_cfg = train_cfg or TrainConfig(group_prob=0.0, null_caption_prob=0.0)
    sampler = TaskSampler(cfg.task_mix, train_cfg.restyle_share)

    def make(rng: np.random.Generator) -> Batch:
        kind = sampler.kind(rng)
        idx = rng.integers(0, len(designs), size=cfg.batch_size)
        seqs = [make_training_example(designs[int(i)], kind, rng, train_cfg).clean for i in idx]
        b = collate(seqs, model.cfg.vocab, model.dtype)
        return Batch(b, b.tokens, b.noised)
    return make


def distill(teacher_ckpt: Checkpoint, designs: Sequence[LayeredDesign], cfg: DistillConfig,
            train_cfg: TrainConfig | None = None,
            callback: Callable[[int, float, float], None] | None = None
            ) -> tuple[Checkpoint, DistillResult]:
    teacher = teacher_ckpt.build_model()
    digest = params_digest(teacher)
    res = distill_fields(teacher, layered_batch_maker(designs, teacher, cfg, train_cfg), cfg,
                         callback)
    if params_digest(teacher) != digest:
        raise RuntimeError("teacher parameters changed during distillation")
    ckpt = Checkpoint(
        model_config=teacher_ckpt.model_config,
        params={k: v.detach().clone() for k, v in res.student.state_dict().items()},
        train_config=teacher_ckpt.train_config, step=cfg.iterations,
        extra={"distilled": True, "student_steps": cfg.student_steps,
               "distill_config": cfg.to_dict(), "teacher_digest": digest})
    return ckpt, res


# -- 1-D toys -------------------------------------------------------------------

class ToyVelocityNet(nn.Module):
    """MLP velocity field for scalar data; x has shape (B, 1, 1)."""

    def __init__(self, hidden: int = 128, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(nn.Linear(2 + 16, hidden), nn.SiLU(),
                                     nn.Linear(hidden, hidden), nn.SiLU(),
                                     nn.Linear(hidden, hidden), nn.SiLU(),
                                     nn.Linear(hidden, 1))

    def forward(self, x, t, ctx=None):
        b = x.shape[0]
        tt = t.to(x.dtype).view(b, 1)
        freqs = torch.arange(1, 9, dtype=x.dtype) * math.pi
        feats = torch.cat([x.view(b, 1), tt, torch.sin(freqs * tt), torch.cos(freqs * tt)], dim=1)
        return self.net(feats).view(b, 1, 1)


class GaussianMixtureField(nn.Module):
    """Exact straight-path velocity ``E[z0 - eps | x_t]`` for a 1-D Gaussian mixture."""

    def __init__(self, means: Sequence[float], stds: Sequence[float],
                 weights: Sequence[float] | None = None):
        super().__init__()
        k = len(means)
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        self.register_buffer("mu", torch.tensor(means, dtype=torch.float64))
        self.register_buffer("sd", torch.tensor(stds, dtype=torch.float64))
        self.register_buffer("w", torch.tensor(w / w.sum(), dtype=torch.float64))

    def forward(self, x, t, ctx=None):
        b = x.shape[0]
        xv = x.view(b, 1).to(torch.float64)
        tt = t.to(torch.float64).view(b, 1).clamp(1e-6, 1.0)
        m = (1 - tt) * self.mu
        var = (1 - tt) ** 2 * self.sd ** 2 + tt ** 2
        logp = torch.log(self.w) - 0.5 * torch.log(var) - 0.5 * (xv - m) ** 2 / var
        resp = torch.softmax(logp, dim=1)
        resid = xv - m
        ez0 = self.mu + (1 - tt) * self.sd ** 2 / var * resid
        eeps = tt / var * resid
        v = (resp * (ez0 - eeps)).sum(dim=1, keepdim=True)
        return v.to(x.dtype).view(b, 1, 1)


def toy_batch_maker(batch_size: int, dtype=torch.float64):
    def make(rng: np.random.Generator) -> Batch:
        return Batch(None, torch.zeros(batch_size, 1, 1, dtype=dtype),
                     torch.ones(batch_size, 1, dtype=torch.bool))
    return make


def sample_mixture(n: int, means, stds, rng: np.random.Generator) -> np.ndarray:
    comp = rng.integers(0, len(means), size=n)
    return np.asarray(means)[comp] + np.asarray(stds)[comp] * rng.standard_normal(n)


def train_toy_teacher(data: Callable[[int, np.random.Generator], np.ndarray], steps: int = 3000,
                      batch_size: int = 512, lr: float = 2e-3, seed: int = 0,
                      hidden: int = 128) -> ToyVelocityNet:
    net = ToyVelocityNet(hidden, seed).double()
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    noised = torch.ones(batch_size, 1, dtype=torch.bool)
    for _ in range(steps):
        z0 = torch.as_tensor(data(batch_size, rng)).view(-1, 1, 1)
        eps = torch.as_tensor(rng.standard_normal(batch_size)).view(-1, 1, 1)
        t = torch.as_tensor(rng.random(batch_size))
        zt = (1 - t.view(-1, 1, 1)) * z0 + t.view(-1, 1, 1) * eps
        loss = masked_flow_loss(net(zt, t), z0 - eps, noised)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return net


def toy_sample(field_: nn.Module, n: int, steps: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = torch.as_tensor(rng.standard_normal(n), dtype=torch.float64).view(n, 1, 1)
    batch = toy_batch_maker(n)(rng)
    with torch.no_grad():
        x = student_generate(field_, batch, noise, steps)
    return x.view(-1).numpy()


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """V-statistic ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` for 1-D samples."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())

    def mean_abs_within(a):
        n = a.size
        i = np.arange(n)
        return 2.0 * np.sum((2 * i - n + 1) * a) / (n * n)

    def mean_abs_between(a, b):
        # sum over pairs |a_i - b_j| via the merged order
        allv = np.concatenate([a, b])
        lab = np.concatenate([np.zeros(a.size), np.ones(b.size)])
        order = np.argsort(allv, kind="mergesort")
        v, l = allv[order], lab[order]
        ca = np.cumsum(l == 0)
        cb = np.cumsum(l == 1)
        sa = np.cumsum(np.where(l == 0, v, 0.0))
        sb = np.cumsum(np.where(l == 1, v, 0.0))
        # each b_j pairs with the a's below it, each a_i with the b's below it
        tot = np.sum(np.where(l == 1, v * ca - sa, 0.0)) + np.sum(np.where(l == 0, v * cb - sb, 0.0))
        return tot / (a.size * b.size)

    return float(2 * mean_abs_between(x, y) - mean_abs_within(x) - mean_abs_within(y))
