"""Face restoration by inversion and masked resampling.

The broken image is inverted while caching every level's latent and
self-attention input. Resampling starts from the inverted noise; at each level
the live self-attention input is fused with the cached one inside the (smoothed)
face mask, and after each step the latent is fused the same way. Outside the
mask both fusions return the cached values exactly, so the background replays
the inversion trajectory and decodes to the autoencoder round-trip of the input.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .conditioning import TextEncoder
from .diffusion import (
    GuidanceConfig,
    LatentTrajectory,
    NoiseSchedule,
    ToyAutoencoder,
    ddim_denoise_step,
    guided_eps,
    invert,
)
from .embeddings import Conditions, IdentityEmbedding, RegionMask, TextEmbedding, resize_area
from .tensor_nn import GaussianKernel2D, gaussian_kernel, masked_adain

DEFAULT_THRESHOLD = 100


class CacheMisalignment(RuntimeError):
    pass


def should_restore(face_wh: tuple[int, int], threshold: int = DEFAULT_THRESHOLD) -> bool:
    """Restore only faces smaller than ``threshold`` in both dimensions."""
    w, h = face_wh
    if w <= 0 or h <= 0:
        raise ValueError(f"face size must be positive, got {face_wh}")
    return w < threshold and h < threshold


def smooth_mask(m: RegionMask, g: GaussianKernel2D) -> RegionMask:
    """Blur with ``g`` (replicate border) and clamp to [0, 1]."""
    w = g.weights.double()
    if abs(float(w.sum()) - 1.0) > 1e-5:
        raise ValueError(f"smoothing kernel must sum to 1, got {float(w.sum())}")
    kh, kw = g.size
    x = m.grid.double()[None, None]
    x = F.pad(x, ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2), mode="replicate")
    out = F.conv2d(x, w[None, None])[0, 0].clamp(0, 1)
    return RegionMask(out.float(), m.source_size)


def _fuse(live: Tensor, cached: Tensor, m: Tensor, style_weight: Tensor | None = None) -> Tensor:
    """``adain(live in m -> cached outside) * m + cached * (1 - m)`` for ``(C, H, W)``."""
    if live.shape != cached.shape:
        raise ValueError(f"fusion shape mismatch: live {tuple(live.shape)} vs cached {tuple(cached.shape)}")
    if tuple(m.shape) != tuple(live.shape[-2:]):
        raise ValueError(f"mask {tuple(m.shape)} not at feature resolution {tuple(live.shape[-2:])}")
    m = m.to(live.dtype)
    style_weight = 1 - m if style_weight is None else style_weight
    styled = masked_adain(live, cached, m, style_weight)
    return torch.where(m > 0, styled * m + cached * (1 - m), cached)


def attention_fusion(sa_r: Tensor, sa_c: Tensor, m: RegionMask | Tensor) -> Tensor:
    """Fuse live (``sa_r``) and cached (``sa_c``) feature maps ``(C, H, W)``."""
    return _fuse(sa_r, sa_c, m.grid if isinstance(m, RegionMask) else m)


def latent_fusion(z: Tensor, z_hat: Tensor, m: RegionMask | Tensor) -> Tensor:
    """Same rule on latents: exactly ``z_hat`` where ``m == 0``."""
    return _fuse(z, z_hat, m.grid if isinstance(m, RegionMask) else m)


def multi_fusion(live: Tensor, cached: Tensor, masks: Sequence[Tensor]) -> Tensor:
    """Per-region fusion for several disjoint-ish masks sharing one background."""
    total = torch.stack(list(masks)).sum(0) if masks else torch.zeros(live.shape[-2:])
    background = (1 - total).clamp_min(0)
    out = cached * background
    for m in masks:
        styled = masked_adain(live, cached, m, background)
        out = out + styled * m
    return torch.where(total > 0, out, cached)


def renormalize(masks: Sequence[Tensor]) -> list[Tensor]:
    """Scale overlapping masks so they sum to at most 1 per cell."""
    if not masks:
        return []
    total = torch.stack(list(masks)).sum(0)
    scale = torch.where(total > 1, 1 / total.clamp_min(1e-12), torch.ones_like(total))
    return [m * scale for m in masks]


@dataclass(frozen=True)
class RestorationJob:
    broken_image: Tensor  # (3, H, W)
    face_mask: RegionMask  # pixel resolution
    landmarks: Tensor  # (H, W) landmark raster
    identity: IdentityEmbedding
    text: TextEmbedding
    steps: int = 30

    def __post_init__(self):
        hw = tuple(self.broken_image.shape[-2:])
        if self.face_mask.shape != hw or tuple(self.landmarks.shape[-2:]) != hw:
            raise ValueError(
                f"mask {self.face_mask.shape} and landmarks {tuple(self.landmarks.shape)} must match image {hw}"
            )


@dataclass
class RestoreConfig:
    guidance: float = 5.0
    kernel_size: int = 5
    sigma: float = 1.0
    # side of the grid the kernel is defined on; coarser latents are smoothed at an
    # integer multiple of their size and area-pooled back (0 = latent grid)
    smooth_grid: int = 64
    refine: int = 1
    cond_channels: int = 2
    landmark_channel: int = 1


@dataclass
class RestoreResult:
    image: Tensor
    latent: Tensor
    masks: list[Tensor]  # smoothed latent-resolution masks
    trajectory: LatentTrajectory
    timings: dict[str, float] = field(default_factory=dict)

    def background(self) -> Tensor:
        """Boolean latent-cell map of the region locked to the inversion trajectory."""
        if not self.masks:
            return torch.ones(self.latent.shape[-2:], dtype=torch.bool)
        return torch.stack(self.masks).sum(0) == 0

    def background_pixels(self, factor: int) -> Tensor:
        return self.background().repeat_interleave(factor, 0).repeat_interleave(factor, 1)


def latent_mask(mask: RegionMask, latent_hw: tuple[int, int], cfg: RestoreConfig) -> Tensor:
    """Pixel mask -> smoothed mask at ``latent_hw``.

    The kernel feathers only the boundary when the grid is fine enough; on a small
    latent the mask is smoothed on an ``up``-times finer grid so a face a few cells
    wide keeps its interior.
    """
    up = max(1, cfg.smooth_grid // max(latent_hw)) if cfg.smooth_grid else 1
    fine = (latent_hw[0] * up, latent_hw[1] * up)
    g = gaussian_kernel((cfg.kernel_size, cfg.kernel_size), cfg.sigma)
    smoothed = smooth_mask(RegionMask(resize_area(mask.grid.float(), fine)), g).grid
    return smoothed if up == 1 else resize_area(smoothed, latent_hw)


def _condition_raster(landmarks: Tensor, cfg: RestoreConfig) -> Tensor:
    cond = torch.zeros(cfg.cond_channels, *landmarks.shape[-2:])
    cond[cfg.landmark_channel] = landmarks
    return cond


def _feature_mask(masks: Sequence[Tensor], n_tokens: int, latent_hw: tuple[int, int]) -> list[Tensor]:
    H, W = latent_hw
    s = int(round(math.sqrt(H * W / n_tokens)))
    size = (H // s, W // s)
    return [resize_area(m, size) if tuple(m.shape) != size else m for m in masks]


def _substitution_hook(traj: LatentTrajectory, level: int, masks: Sequence[Tensor], latent_hw):
    def hook(kind, name, feat, branch):
        if kind != "self":
            return feat
        cached = traj.cached(level, name)
        if cached.shape != feat.shape:
            raise CacheMisalignment(
                f"cached feature for level {level}, layer {name!r} has shape {tuple(cached.shape)}, live {tuple(feat.shape)}"
            )
        B, N, C = feat.shape
        H, W = latent_hw
        s = int(round(math.sqrt(H * W / N)))
        fm = _feature_mask(masks, N, latent_hw)
        live = feat[0].T.reshape(C, H // s, W // s)
        ref = cached[0].T.reshape(C, H // s, W // s)
        fused = multi_fusion(live, ref, fm)
        return fused.reshape(C, N).T[None]

    return hook


def _restore_core(
    image: Tensor,
    conds: Conditions,
    pixel_masks: Sequence[RegionMask],
    denoiser,
    sched: NoiseSchedule,
    ae: ToyAutoencoder,
    cfg: RestoreConfig,
    null_text: TextEmbedding,
) -> RestoreResult:
    t0 = time.perf_counter()
    z0 = ae.encode(image)
    hw = tuple(z0.shape[-2:])
    masks = renormalize([latent_mask(m, hw, cfg) for m in pixel_masks])
    masks = [m for m in masks if bool((m > 0).any())]
    traj = invert(denoiser, z0, conds, sched, refine=cfg.refine)
    t1 = time.perf_counter()
    if len(traj.latents) != sched.T + 1:
        raise CacheMisalignment(f"trajectory has {len(traj.latents)} latents for T = {sched.T}")
    if not masks:
        warnings.warn("empty face mask: returning the autoencoder round-trip of the input", stacklevel=3)
        return RestoreResult(ae.decode(z0), z0, [], traj, {"invert": t1 - t0, "sample": 0.0})
    g = GuidanceConfig(cfg.guidance, null_text)
    z = traj.latents[sched.T]
    for t in range(sched.T, 0, -1):
        if not any(lv == t for lv, _ in traj.self_attn):
            raise CacheMisalignment(f"no cached self-attention for level {t}")
        eps = guided_eps(denoiser, z, t, conds, g, sched, _substitution_hook(traj, t, masks, hw))
        z = multi_fusion(ddim_denoise_step(z, t, eps, sched), traj.latents[t - 1], masks)
    t2 = time.perf_counter()
    return RestoreResult(ae.decode(z), z, masks, traj, {"invert": t1 - t0, "sample": t2 - t1})


def restore(
    job: RestorationJob,
    denoiser,
    sched: NoiseSchedule,
    ae: ToyAutoencoder | None = None,
    cfg: RestoreConfig = RestoreConfig(),
    null_text: TextEmbedding | None = None,
) -> RestoreResult:
    """Regenerate the masked face of ``job`` under its identity and landmarks.

    Identity attention is confined to the job's face mask, as in training.
    """
    if job.steps != sched.T:
        raise ValueError(f"job asks for {job.steps} steps but the schedule has T = {sched.T}")
    ae = ae or ToyAutoencoder()
    null_text = null_text or TextEncoder().null()
    conds = Conditions(job.text, ((job.identity, job.face_mask),), _condition_raster(job.landmarks, cfg))
    return _restore_core(job.broken_image, conds, [job.face_mask], denoiser, sched, ae, cfg, null_text)


def restore_multi(
    jobs: Sequence[RestorationJob],
    denoiser,
    sched: NoiseSchedule,
    ae: ToyAutoencoder | None = None,
    cfg: RestoreConfig = RestoreConfig(),
    null_text: TextEmbedding | None = None,
) -> RestoreResult:
    """Restore several faces of one image in a single inversion pass.

    Each identity attends only inside its own mask (masked multi-identity
    cross-attention) and each region is fused against the shared background.
    A single job reduces to :func:`restore`.
    """
    if not jobs:
        raise ValueError("restore_multi needs at least one job")
    if len(jobs) == 1:
        return restore(jobs[0], denoiser, sched, ae, cfg, null_text)
    first = jobs[0]
    for j in jobs[1:]:
        if not torch.equal(j.broken_image, first.broken_image):
            raise ValueError("all jobs of restore_multi must share one image")
        if j.steps != first.steps:
            raise ValueError("all jobs of restore_multi must use the same number of steps")
    if first.steps != sched.T:
        raise ValueError(f"jobs ask for {first.steps} steps but the schedule has T = {sched.T}")
    ae = ae or ToyAutoencoder()
    null_text = null_text or TextEncoder().null()
    landmarks = torch.stack([j.landmarks for j in jobs]).amax(0)
    conds = Conditions(first.text, tuple((j.identity, j.face_mask) for j in jobs), _condition_raster(landmarks, cfg))
    return _restore_core(first.broken_image, conds, [j.face_mask for j in jobs], denoiser, sched, ae, cfg, null_text)
