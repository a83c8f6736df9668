"""Toy masked-region diffusion transformer.

A single-stream transformer over ``[caption tokens; region tokens]`` with full
bidirectional attention, 2D rotary positions on every head, and adaLN-style
timestep modulation. It predicts a velocity for every region token.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .packing import PackedSequence, Role

TIME_FREQ_DIM = 256


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 256
    dim: int = 128
    depth: int = 4
    heads: int = 4
    vocab: int = 4096
    max_regions: int = 80
    mlp_ratio: int = 4
    rope_base: float = 100.0
    # output preconditioning: v = c_skip(t) z_t + c_out(t) F(c_in(t) z_t)
    precondition: bool = False
    sigma_data: float = 0.42
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if (self.dim // self.heads) % 4:
            raise ValueError("head dim must be divisible by 4 (row/col rotary pairs)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# Overfit/acceptance config, ~4.6M params. dim equals latent_dim so the output
# head can be full rank: with dim < latent_dim, noise outside the head's column
# space can never be removed by the sampler. sigma_data is the RMS latent value
# of the synthetic corpus.
TOY_CONFIG = ModelConfig(dim=256, depth=4, heads=4, mlp_ratio=2, vocab=2048, precondition=True,
                         sigma_data=0.42)


def precondition_coeffs(t: torch.Tensor, sigma: float) -> tuple[torch.Tensor, ...]:
    """(c_in, c_skip, c_out) for the straight path z_t = (1-t) z0 + t eps.

    c_skip z_t is the least-squares linear estimate of z0 - eps from z_t when
    z0 has second moment sigma^2; c_out is the standard deviation of what is
    left over, and c_in brings z_t to unit variance.
    """
    s2 = sigma * sigma
    var = (1 - t) ** 2 * s2 + t ** 2
    c_in = var.rsqrt()
    c_skip = ((1 - t) * s2 - t) / var
    c_out = sigma * c_in
    return c_in, c_skip, c_out


def caption_ids(text: str, vocab: int) -> list[int]:
    """Whitespace tokens hashed into ``vocab`` buckets (stable across runs)."""
    out = []
    for tok in text.split():
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        out.append(int.from_bytes(digest, "little") % vocab)
    return out


def timestep_embedding(t: torch.Tensor, dim: int = TIME_FREQ_DIM) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope_tables(pos: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin of shape (B, N, head_dim); rows use the first half of the
    pairs, columns the second half."""
    quarter = head_dim // 4
    freqs = base ** (-torch.arange(quarter, dtype=dtype) / quarter)
    ang_r = pos[..., 0:1].to(dtype) * freqs
    ang_c = pos[..., 1:2].to(dtype) * freqs
    ang = torch.cat([ang_r, ang_c], dim=-1)  # (B, N, head_dim / 2)
    ang = ang.repeat_interleave(2, dim=-1)
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, N, D); pairs (2i, 2i+1) rotate together
    x2 = torch.stack([-x[..., 1::2], x[..., 0::2]], dim=-1).flatten(-2)
    return x * cos[:, None] + x2 * sin[:, None]


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"),
                                 nn.Linear(cfg.mlp_ratio * d, d))
        self.ada = nn.Linear(d, 6 * d)

    def forward(self, h, temb, cos, sin, key_mask, want_attn=False):
        b, n, d = h.shape
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(temb)).chunk(6, dim=-1)
        x = modulate(self.norm1(h), sh1, sc1)
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        bias = torch.zeros(b, 1, 1, n, dtype=h.dtype)
        bias = bias.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = None
        if want_attn:
            scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + bias
            attn = scores.softmax(dim=-1)
            out = attn @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        out = out.transpose(1, 2).reshape(b, n, d)
        h = h + g1[:, None] * self.proj(out)
        h = h + g2[:, None] * self.mlp(modulate(self.norm2(h), sh2, sc2))
        return h, attn


@dataclass
class SeqBatch:
    """Padded tensors for a list of packed sequences."""
    tokens: torch.Tensor  # (B, N, C)
    pos: torch.Tensor  # (B, N, 2)
    layer_id: torch.Tensor  # (B, N)
    role: torch.Tensor  # (B, N)
    valid: torch.Tensor  # (B, N) bool
    text: torch.Tensor  # (B, M)
    text_valid: torch.Tensor  # (B, M) bool

    @property
    def noised(self) -> torch.Tensor:
        return self.valid & (self.role == int(Role.NOISED))


def collate(seqs: Sequence[PackedSequence], vocab: int, dtype=torch.float32,
            captions: Sequence[str] | None = None) -> SeqBatch:
    b = len(seqs)
    n = max(len(s) for s in seqs)
    c = seqs[0].tokens.shape[1]
    caps = [caption_ids(cap, vocab) for cap in (captions if captions is not None
                                                 else [s.caption for s in seqs])]
    m = max([len(x) for x in caps] + [0])
    tokens = np.zeros((b, n, c))
    pos = np.zeros((b, n, 2), dtype=np.int64)
    layer_id = np.zeros((b, n), dtype=np.int64)
    role = np.full((b, n), int(Role.MASKED), dtype=np.int64)
    valid = np.zeros((b, n), dtype=bool)
    text = np.zeros((b, m), dtype=np.int64)
    text_valid = np.zeros((b, m), dtype=bool)
    for i, s in enumerate(seqs):
        k = len(s)
        tokens[i, :k] = s.tokens
        pos[i, :k] = s.pos
        layer_id[i, :k] = s.layer_id
        role[i, :k] = s.role
        valid[i, :k] = True
        text[i, :len(caps[i])] = caps[i]
        text_valid[i, :len(caps[i])] = True
    return SeqBatch(torch.as_tensor(tokens, dtype=dtype), torch.as_tensor(pos),
                    torch.as_tensor(layer_id), torch.as_tensor(role), torch.as_tensor(valid),
                    torch.as_tensor(text), torch.as_tensor(text_valid))


class MRTModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.in_proj = nn.Linear(cfg.latent_dim, d)
            self.region_embed = nn.Embedding(cfg.max_regions, d)
            self.mask_embed = nn.Parameter(torch.zeros(d))
            self.cond_embed = nn.Parameter(torch.zeros(d))
            self.text_embed = nn.Embedding(cfg.vocab, d)
            self.text_type = nn.Parameter(torch.zeros(d))
            self.time_mlp = nn.Sequential(nn.Linear(TIME_FREQ_DIM, d), nn.SiLU(), nn.Linear(d, d))
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
            self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.final_ada = nn.Linear(d, 2 * d)
            self.head = nn.Linear(d, cfg.latent_dim)
            for emb in (self.region_embed, self.text_embed):
                nn.init.normal_(emb.weight, std=0.02)
            for p in (self.mask_embed, self.cond_embed, self.text_type):
                nn.init.normal_(p, std=0.02)
            for blk in self.blocks:
                nn.init.normal_(blk.ada.weight, std=0.02)
                nn.init.zeros_(blk.ada.bias)
            nn.init.normal_(self.final_ada.weight, std=0.02)
            nn.init.zeros_(self.final_ada.bias)
            nn.init.normal_(self.head.weight, std=0.02)
            nn.init.zeros_(self.head.bias)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, x: torch.Tensor, t: torch.Tensor, batch: SeqBatch,
                want_attn: bool = False):
        if not torch.isfinite(x).all() or not torch.isfinite(t).all():
            raise FloatingPointError("non-finite model input")
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        if (t < 0).any() or (t > 1).any():
            raise ValueError("t must lie in [0, 1]")
        t = t.to(x.dtype)
        role = batch.role
        noised = (role == int(Role.NOISED))[..., None]
        if self.cfg.precondition:
            c_in, c_skip, c_out = precondition_coeffs(t.view(-1, 1, 1), self.cfg.sigma_data)
            x_in = torch.where(noised, x * c_in, x / self.cfg.sigma_data)
        else:
            x_in = x
        h_img = self.in_proj(x_in) + self.region_embed(batch.layer_id)
        h_img = h_img + (role == int(Role.MASKED)).to(x.dtype)[..., None] * self.mask_embed
        h_img = h_img + (role == int(Role.CONDITION)).to(x.dtype)[..., None] * self.cond_embed
        h_txt = self.text_embed(batch.text) + self.text_type
        m = h_txt.shape[1]
        h = torch.cat([h_txt, h_img], dim=1)

        # caption tokens sit at the sequence's top-left cell, so a global shift
        # of positions moves them along with the image tokens
        big = torch.iinfo(torch.int64).max
        anchor = torch.where(batch.valid[..., None], batch.pos, big).amin(dim=1, keepdim=True)
        pos = torch.cat([anchor.expand(-1, m, -1), batch.pos], dim=1)
        cos, sin = rope_tables(pos, self.cfg.head_dim, self.cfg.rope_base, x.dtype)
        key_mask = torch.cat([batch.text_valid, batch.valid], dim=1)

        temb = self.time_mlp(timestep_embedding(t))
        maps = []
        for blk in self.blocks:
            h, attn = blk(h, temb, cos, sin, key_mask, want_attn)
            if want_attn:
                maps.append(attn)
        sh, sc = self.final_ada(F.silu(temb)).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(h[:, m:]), sh, sc))
        if self.cfg.precondition:
            out = c_skip * x + c_out * out
        if want_attn:
            return out, torch.stack(maps, dim=1)  # (B, L, heads, N', N')
        return out

    def velocity(self, seq: PackedSequence, t: float, caption: str | None = None) -> np.ndarray:
        """Single-sequence convenience wrapper; returns (N, C)."""
        batch = collate([seq], self.cfg.vocab, self.dtype,
                        captions=None if caption is None else [caption])
        with torch.no_grad():
            v = self(batch.tokens, torch.tensor([t], dtype=self.dtype), batch)
        return v[0].numpy().astype(np.float64)

    def attention_maps(self, seq: PackedSequence, t: float, caption: str | None = None) -> np.ndarray:
        """Per-block, per-head attention weights, shape (L, heads, N', N')."""
        batch = collate([seq], self.cfg.vocab, self.dtype,
                        captions=None if caption is None else [caption])
        with torch.no_grad():
            _, maps = self(batch.tokens, torch.tensor([t], dtype=self.dtype), batch, want_attn=True)
        return maps[0].numpy()


def param_count(cfg: ModelConfig) -> int:
    d, c, r = cfg.dim, cfg.latent_dim, cfg.mlp_ratio
    embeds = (c * d + d) + cfg.max_regions * d + 3 * d + cfg.vocab * d
    time = TIME_FREQ_DIM * d + d + d * d + d
    block = (3 * d * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d) + (6 * d * d + 6 * d)
    final = (2 * d * d + 2 * d) + (d * c + c)
    return embeds + time + cfg.depth * block + final


def enumerate_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def params_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
