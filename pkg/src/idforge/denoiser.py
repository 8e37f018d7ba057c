"""Small conditional UNet used as the noise predictor.

Three resolution levels (16, 8 and 4 cells for the default 128 px canvas) with a
self- plus cross-attention block on each path at levels whose resolution is at
least ``attn_min_res``. Every attention block exposes two hook points:

* ``("self", name)`` - the normalized tokens entering self-attention; the hook's
  return value replaces them (caching / substitution point).
* ``("cross", name)`` - the cross-attention output before the residual add.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .conditioning import cross_attention
from .embeddings import Conditions
from .repcontrol import inject_condition
from .tensor_nn import multihead_attention


@dataclass
class ModelConfig:
    latent_channels: int = 12
    widths: tuple[int, int, int] = (32, 64, 64)
    context_dim: int = 64
    id_tokens: int = 4
    heads: int = 1
    groups: int = 8
    time_dim: int = 128
    latent_size: int = 16
    attn_min_res: int = 8
    cond_channels: int = 2
    factor: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def attn_levels(self) -> tuple[bool, bool]:
        return tuple(self.latent_size // 2**i >= self.attn_min_res for i in (0, 1))


def timestep_embedding(timesteps: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = timesteps.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.linear_1 = nn.Linear(in_dim, dim)
        self.linear_2 = nn.Linear(dim, dim)

    def forward(self, t: Tensor) -> Tensor:
        return self.linear_2(F.silu(self.linear_1(t)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.to_out(multihead_attention(self.to_q(x), self.to_k(x), self.to_v(x), self.heads))


class CrossAttention(nn.Module):
    """Text attention plus identity attention through the same key/value projections."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(context_dim, dim)
        self.to_v = nn.Linear(context_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, text: Tensor, ids: Sequence[tuple[Tensor, Tensor | None]]) -> Tensor:
        q = self.to_q(x)
        out = cross_attention(q, text, self.to_k, self.to_v, self.heads)
        for tokens, mask in ids:
            a = cross_attention(q, tokens, self.to_k, self.to_v, self.heads)
            out = out + (a if mask is None else mask[..., None] * a)
        return self.to_out(out)


class AttnBlock(nn.Module):
    def __init__(self, name: str, dim: int, cfg: ModelConfig):
        super().__init__()
        self.name = name
        self.norm = nn.GroupNorm(cfg.groups, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.sa_norm = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, cfg.heads)
        self.ca_norm = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, cfg.context_dim, cfg.heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff_1 = nn.Linear(dim, 2 * dim)
        self.ff_2 = nn.Linear(2 * dim, dim)
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, text: Tensor, ids, hook=None) -> Tensor:
        B, C, H, W = x.shape
        h = self.proj_in(self.norm(x).flatten(2).transpose(1, 2))
        s = self.sa_norm(h)
        if hook is not None:
            s = hook("self", self.name, s)
        h = h + self.self_attn(s)
        scaled_ids = [(tok, None if m is None else _mask_at(m, H, W)) for tok, m in ids]
        c = self.cross_attn(self.ca_norm(h), text, scaled_ids)
        if hook is not None:
            c = hook("cross", self.name, c)
        h = h + c
        h = h + self.ff_2(F.gelu(self.ff_1(self.ff_norm(h))))
        h = self.proj_out(h).transpose(1, 2).reshape(B, C, H, W)
        return x + h


def _mask_at(mask: Tensor, H: int, W: int) -> Tensor:
    """(B, h, w) mask -> (B, H*W) by area averaging (or replication when upsampling)."""
    if tuple(mask.shape[-2:]) != (H, W):
        h, w = mask.shape[-2:]
        if H >= h and W >= w and H % h == 0 and W % w == 0:
            mask = mask.repeat_interleave(H // h, -2).repeat_interleave(W // w, -1)
        else:
            mask = F.adaptive_avg_pool2d(mask[:, None], (H, W))[:, 0]
    return mask.reshape(mask.shape[0], H * W)


class ToyDenoiser(nn.Module):
    kind = "base"

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        attn0, attn1 = cfg.attn_levels()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.conv_in = nn.Conv2d(cfg.latent_channels, w0, 3, padding=1)
            self.time_embed = TimeEmbedding(w0, cfg.time_dim)
            self.down0_res = ResBlock(w0, w0, cfg.time_dim, cfg.groups)
            self.down0_attn = AttnBlock("down0", w0, cfg) if attn0 else None
            self.down0_ds = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
            self.down1_res = ResBlock(w0, w1, cfg.time_dim, cfg.groups)
            self.down1_attn = AttnBlock("down1", w1, cfg) if attn1 else None
            self.down1_ds = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
            self.mid_res1 = ResBlock(w1, w2, cfg.time_dim, cfg.groups)
            self.mid_res2 = ResBlock(w2, w2, cfg.time_dim, cfg.groups)
            self.up1_us = nn.Conv2d(w2, w2, 3, padding=1)
            self.up1_res = ResBlock(w2 + w1, w1, cfg.time_dim, cfg.groups)
            self.up1_attn = AttnBlock("up1", w1, cfg) if attn1 else None
            self.up0_us = nn.Conv2d(w1, w1, 3, padding=1)
            self.up0_res = ResBlock(w1 + w0, w0, cfg.time_dim, cfg.groups)
            self.up0_attn = AttnBlock("up0", w0, cfg) if attn0 else None
            self.out_norm = nn.GroupNorm(cfg.groups, w0)
            self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)
        self.adapter: nn.Module | None = None
        self.id_proj: nn.Module | None = None

    def attention_layers(self) -> list[str]:
        return [b.name for b in (self.down0_attn, self.down1_attn, self.up1_attn, self.up0_attn) if b is not None]

    def _attn(self, block, h, text, ids, hook):
        return h if block is None else block(h, text, ids, hook)

    def forward(
        self,
        z: Tensor,
        timesteps: Tensor,
        text: Tensor,
        ids: Sequence[tuple[Tensor, Tensor | None]] = (),
        cond: Tensor | None = None,
        hook=None,
    ) -> Tensor:
        """Batched noise prediction.

        ``text`` is ``(B, T, D)``; ``ids`` is a sequence of ``(tokens (B, T_id, D),
        mask (B, h, w) or None)``; ``cond`` is the condition raster ``(B, C, H, W)``.
        """
        if self.adapter is not None and cond is not None:
            z = inject_condition(self.adapter, cond, z)
        if self.id_proj is not None:
            ids = [(self.id_proj(tok), m) for tok, m in ids]
        temb = self.time_embed(timestep_embedding(timesteps, self.cfg.widths[0]).to(z.dtype))
        h = self.conv_in(z)
        h = self._attn(self.down0_attn, self.down0_res(h, temb), text, ids, hook)
        skip0 = h
        h = self.down0_ds(h)
        h = self._attn(self.down1_attn, self.down1_res(h, temb), text, ids, hook)
        skip1 = h
        h = self.down1_ds(h)
        h = self.mid_res2(self.mid_res1(h, temb), temb)
        h = self.up1_us(F.interpolate(h, size=skip1.shape[-2:], mode="nearest"))
        h = self._attn(self.up1_attn, self.up1_res(torch.cat([h, skip1], 1), temb), text, ids, hook)
        h = self.up0_us(F.interpolate(h, size=skip0.shape[-2:], mode="nearest"))
        h = self._attn(self.up0_attn, self.up0_res(torch.cat([h, skip0], 1), temb), text, ids, hook)
        return self.conv_out(F.silu(self.out_norm(h)))

    def eps_batch(self, z: Tensor, timesteps: Tensor, conds: Sequence[Conditions], hook=None) -> Tensor:
        text, ids, cond = batch_conditions(conds, tuple(z.shape[-2:]), self.cfg.cond_channels)
        return self(z, timesteps, text, ids, cond, hook)

    def eps(self, z: Tensor, timestep: int, conds: Conditions, hook=None) -> Tensor:
        return self.eps_batch(z[None], torch.tensor([timestep]), [conds], hook)[0]


def batch_conditions(conds: Sequence[Conditions], latent_hw: tuple[int, int], cond_channels: int):
    """Stack per-element ``Conditions`` into the tensors ``ToyDenoiser.forward`` takes."""
    text = torch.stack([c.text.tokens for c in conds])
    n_ids = {len(c.ids) for c in conds}
    if len(n_ids) != 1:
        raise ValueError("all batch elements must carry the same number of identities")
    ids = []
    for i in range(n_ids.pop()):
        tokens = torch.stack([c.ids[i][0].tokens for c in conds])
        masks = [c.ids[i][1] for c in conds]
        if all(m is None for m in masks):
            ids.append((tokens, None))
            continue
        grids = []
        for m in masks:
            if m is None:
                grids.append(torch.ones(latent_hw))
            else:
                g = m.grid.float()
                grids.append(F.adaptive_avg_pool2d(g[None, None], latent_hw)[0, 0] if g.shape != latent_hw else g)
        ids.append((tokens, torch.stack(grids)))
    cond = None
    if any(c.cond_image is not None for c in conds):
        ref = next(c.cond_image for c in conds if c.cond_image is not None)
        cond = torch.stack([c.cond_image if c.cond_image is not None else torch.zeros_like(ref) for c in conds])
    return text, ids, cond


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters()) + sum(b.numel() for b in model.buffers())
