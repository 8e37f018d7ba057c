"""Toy training loops: base pretraining and the staged dual-branch fine-tune.

The base denoiser is first fit to the synthetic scenes with text only; it then
plays the role of the frozen pretrained model. The fine-tune trains only the
copy weights, the condition adapter and the identity projection, with the
condition curriculum landmarks -> skeleton -> both, and Clone Face Tuning steps
in the last stage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .conditioning import (
    TrainSample,
    clone_face_attention_loss,
    clone_face_splice,
    composite_loss,
    diffusion_loss,
    is_clone_step,
    noised,
    null_text_dropout,
)
from .diffusion import ToyAutoencoder, make_schedule
from .embeddings import Conditions, RegionMask, TextEmbedding
from .synth import SceneStream

log = logging.getLogger(__name__)

SKELETON, LANDMARKS = 0, 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    lam: float = 0.2
    cft_every: int = 10
    clone_face: bool = True
    p_null: float = 0.1
    stages: tuple[float, float, float] = (0.1, 0.2, 0.7)
    clip: float = 1.0
    T: int = 30
    seed: int = 0
    cfa_min_res: int = 8
    # identity attention gated by the sample's face mask(s)
    masked_identity: bool = True
    # null-text draws also drop the identity, teaching the unconditional branch
    drop_identity_with_text: bool = True
    # spliced copies keep the face offset modulo this many pixels, so face crops
    # line up at every attention resolution (two levels of a factor-8 latent)
    splice_cell: int = 16

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")
        if len(self.stages) != 3 or abs(sum(self.stages) - 1) > 1e-9 or min(self.stages) < 0:
            raise ValueError(f"stage fractions must be three nonnegative numbers summing to 1, got {self.stages}")

    def stage(self, step: int) -> int:
        """Curriculum stage (1, 2 or 3) of the 1-based ``step``."""
        a = self.stages[0] * self.steps
        b = a + self.stages[1] * self.steps
        return 1 if step <= a else 2 if step <= b else 3


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch: int = 8
    lr: float = 2e-3
    clip: float = 1.0
    p_null: float = 0.1
    T: int = 30
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    cfa: dict[int, float] = field(default_factory=dict)
    stages: list[int] = field(default_factory=list)

    def window_mean(self, start: int, size: int) -> float:
        chunk = self.losses[start : start + size]
        return float(np.mean(chunk)) if chunk else math.nan

    def to_dict(self) -> dict:
        return asdict(self)


def stage_condition(cond: Tensor, stage: int) -> Tensor:
    """Condition raster as seen in a curriculum stage (other channel zeroed)."""
    if stage == 3:
        return cond
    keep = LANDMARKS if stage == 1 else SKELETON
    out = torch.zeros_like(cond)
    out[..., keep, :, :] = cond[..., keep, :, :]
    return out


def identity_mask(s: TrainSample) -> RegionMask | None:
    """Union of the sample's face masks (both copies for a spliced sample)."""
    if not s.masks:
        return None
    grid = torch.stack([m.grid for m in s.masks]).sum(0).clamp(0, 1)
    return RegionMask(grid)


def sample_conditions(
    s: TrainSample, text: TextEmbedding, with_identity: bool, cond: Tensor | None, masked: bool = False
) -> Conditions:
    if not with_identity or s.identity is None:
        return Conditions(text, (), cond)
    return Conditions(text, ((s.identity, identity_mask(s) if masked else None),), cond)


def _without_identity(c: Conditions) -> Conditions:
    # a zero mask silences identity attention exactly and keeps batch shapes uniform
    off = RegionMask(torch.zeros_like(c.cond_image[0]))
    return c.with_ids(tuple((ident, off) for ident, _ in c.ids))


def cross_feature_maps(store: dict, min_res: int) -> list[Tensor]:
    """Cross-attention outputs ``(B, C, H, W)`` recorded by :func:`_cross_recorder`."""
    return [f for f in store.values() if min(f.shape[-2:]) >= min_res]


def _cross_recorder(store: dict, latent_hw: tuple[int, int]):
    def hook(kind, name, feat):
        if kind == "cross":
            B, N, C = feat.shape
            H, W = latent_hw
            scale = int(round(math.sqrt(H * W / N)))
            store[name] = feat.transpose(1, 2).reshape(B, C, H // scale, W // scale)
        return feat

    return hook


def batch_cfa_loss(feats: Sequence[Tensor], samples: Sequence[TrainSample], min_res: int = 8) -> Tensor:
    """Clone-face loss summed over feature maps, averaged over the batch."""
    total = feats[0].new_zeros(())
    for f in feats:
        for b, s in enumerate(samples):
            total = total + clone_face_attention_loss(f[b], s.masks[0], s.masks[1], min_resolution=min_res)
    return total / len(samples)


def _trainable(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def frozen_state(model: nn.Module) -> dict[str, Tensor]:
    """Snapshot of everything that must not change during fine-tuning."""
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    out = {n: t.detach().clone() for n, t in model.state_dict().items() if n not in trainable}
    return out


def _step(model, params, opt, loss: Tensor, clip: float, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}")
    opt.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def _encode(ae: ToyAutoencoder, samples: Sequence[TrainSample]) -> Tensor:
    return torch.stack([ae.encode(s.image) for s in samples])


class _Pool:
    """Batches from a fixed sample list (encoded once) or from a scene stream."""

    def __init__(self, data, ae: ToyAutoencoder, transform=None, start: int = 0):
        self.stream = isinstance(data, SceneStream)
        self.data, self.ae, self.transform = data, ae, transform
        self.cursor = start
        if not self.stream:
            items = [s for s in data if transform is None or len(s.masks) == 1]
            self.items = [transform(s) for s in items] if transform else list(items)
            if not self.items:
                raise ValueError("no usable training samples")
            self.latents = _encode(ae, self.items)

    def batch(self, rng: np.random.Generator, n: int) -> tuple[list[TrainSample], Tensor]:
        if self.stream:
            samples = self.data.take(self.cursor, n)
            self.cursor += n
            if self.transform:
                samples = [self.transform(s) for s in samples]
            return samples, _encode(self.ae, samples)
        idx = rng.choice(len(self.items), n, replace=len(self.items) < n)
        return [self.items[i] for i in idx], self.latents[idx]


def pretrain_base(model: nn.Module, data: Sequence[TrainSample], null: TextEmbedding, cfg: PretrainConfig = PretrainConfig(), ae: ToyAutoencoder | None = None) -> TrainLog:
    """Fit a plain denoiser on text-only conditions (all parameters train)."""
    ae = ae or ToyAutoencoder()
    sched = make_schedule(cfg.T)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = _trainable(model)
    opt = torch.optim.Adam(params, cfg.lr)
    lr_at = lambda i: cfg.lr * 0.5 * (1 + math.cos(math.pi * i / cfg.steps))
    pool = _Pool(data, ae)
    out = TrainLog()
    model.train()
    for step in range(1, cfg.steps + 1):
        for grp in opt.param_groups:
            grp["lr"] = lr_at(step - 1)
        batch, z0 = pool.batch(rng, cfg.batch)
        noise = torch.randn(z0.shape, generator=gen)
        levels = rng.integers(1, cfg.T + 1, cfg.batch).tolist()
        u = rng.random(cfg.batch)
        conds = [Conditions(null_text_dropout(s.text, u[k], cfg.p_null, null)) for k, s in enumerate(batch)]
        loss = diffusion_loss(model, z0, noise, levels, sched, conds)
        _step(model, params, opt, loss, cfg.clip, step)
        out.losses.append(loss.item())
    model.eval()
    return out


def train_toy(
    dual: nn.Module,
    data: Sequence[TrainSample],
    null: TextEmbedding,
    cfg: TrainConfig = TrainConfig(),
    ae: ToyAutoencoder | None = None,
) -> TrainLog:
    """Staged fine-tune of a dual-branch model; only trainable parameters move.

    Steps are 1-based. On Clone Face Tuning steps (stage 3, ``step % cft_every == 0``)
    the batch is made of spliced samples and ``lam * L_cfa`` joins the loss.
    """
    ae = ae or ToyAutoencoder()
    sched = make_schedule(cfg.T)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = _trainable(dual)
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = torch.optim.Adam(params, cfg.lr)
    if not isinstance(data, SceneStream):
        data = [s for s in data if s.identity is not None]
    singles = _Pool(data, ae)
    spliced = _Pool(data, ae, lambda s: clone_face_splice(s, cell=cfg.splice_cell), 1 << 28) if cfg.clone_face else None
    out = TrainLog()
    dual.train()
    for step in range(1, cfg.steps + 1):
        stage = cfg.stage(step)
        clone = spliced is not None and stage == 3 and is_clone_step(step, cfg.cft_every)
        batch, z0 = (spliced if clone else singles).batch(rng, cfg.batch)
        noise = torch.randn(z0.shape, generator=gen)
        levels = rng.integers(1, cfg.T + 1, cfg.batch).tolist()
        u = rng.random(cfg.batch)
        conds = [
            sample_conditions(
                s, null_text_dropout(s.text, u[k], cfg.p_null, null), True, stage_condition(s.cond, stage), cfg.masked_identity
            )
            for k, s in enumerate(batch)
        ]
        if cfg.drop_identity_with_text:
            conds = [_without_identity(c) if u[k] < cfg.p_null else c for k, c in enumerate(conds)]
        store: dict = {}
        hook = _cross_recorder(store, tuple(z0.shape[-2:])) if clone else None
        l_cldm = diffusion_loss(dual, z0, noise, levels, sched, conds, hook=hook)
        if clone:
            l_cfa = batch_cfa_loss(cross_feature_maps(store, cfg.cfa_min_res), batch, cfg.cfa_min_res)
            loss = composite_loss(step, l_cldm, l_cfa, cfg.lam, cfg.cft_every)
            out.cfa[step] = l_cfa.item()
        else:
            loss = l_cldm
        _step(dual, params, opt, loss, cfg.clip, step)
        out.losses.append(l_cldm.item())
        out.stages.append(stage)
        if step % 100 == 0:
            log.info("step %d stage %d loss %.4f", step, stage, out.losses[-1])
    dual.eval()
    return out


@torch.no_grad()
def eval_cfa(
    model: nn.Module,
    spliced: Sequence[TrainSample],
    levels: Sequence[int] = (5, 15, 25),
    seed: int = 123,
    T: int = 30,
    min_res: int = 8,
    ae: ToyAutoencoder | None = None,
    masked: bool = True,
) -> float:
    """Mean clone-face loss on spliced samples at fixed noise and levels."""
    ae = ae or ToyAutoencoder()
    sched = make_schedule(T)
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, 0
    for s in spliced:
        z0 = ae.encode(s.image)
        conds = [sample_conditions(s, s.text, True, s.cond, masked)]
        for lv in levels:
            noise = torch.randn(z0.shape, generator=gen)
            z_t = noised(z0, noise, sched.abar(lv))[None]
            store: dict = {}
            model.eps_batch(z_t, torch.tensor([sched.timestep(lv)]), conds, hook=_cross_recorder(store, tuple(z0.shape[-2:])))
            total += float(batch_cfa_loss(cross_feature_maps(store, min_res), [s], min_res))
            n += 1
    return total / n
