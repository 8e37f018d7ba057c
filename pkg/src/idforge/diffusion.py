"""Noise schedule, deterministic DDIM sampling/inversion and the toy patch autoencoder.

Latent levels run ``0..T``. Level 0 is the clean latent (``abar(0) == 1``) and level
``t >= 1`` uses ``alpha_bar[t - 1]``, i.e. the schedule arrays are 0-indexed with
``alpha_bar[0] == 1 - beta[0]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .embeddings import Conditions, TextEmbedding

Hook = Callable[[str, str, Tensor], Tensor]

TRAIN_STEPS = 1000
# per-frequency latent scales (DC, vertical, horizontal, diagonal) for 2x2 kept coefficients
DEFAULT_LATENT_SCALE = (0.3, 1.0, 1.1, 2.0)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # (T,) float64
    alpha_bar: np.ndarray  # (T,) float64
    timesteps: np.ndarray  # (T,) training-chain index fed to the timestep embedding

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"level {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def timestep(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"level {t} outside [1, {self.T}]")
        return int(self.timesteps[t - 1])

    def validate(self) -> None:
        b, a = self.beta, self.alpha_bar
        if len(b) != len(a) or len(a) != len(self.timesteps):
            raise ValueError("schedule arrays differ in length")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("beta must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("beta must be nondecreasing")
        if np.any(np.diff(a) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(
    T: int,
    beta_start: float = 8.5e-4,
    beta_end: float = 0.012,
    train_steps: int = TRAIN_STEPS,
) -> NoiseSchedule:
    """Linear-beta chain of ``train_steps`` subsampled to ``T`` evenly spaced levels.

    The stored ``beta`` are the effective per-level betas, so ``cumprod(1 - beta)``
    reproduces ``alpha_bar``.
    """
    if T < 1 or T > train_steps:
        raise ValueError(f"T must be in [1, {train_steps}], got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    chain = np.cumprod(1.0 - np.linspace(beta_start, beta_end, train_steps, dtype=np.float64))
    stride = train_steps // T
    offset = 1 if (T - 1) * stride + 1 < train_steps else 0
    timesteps = np.arange(T, dtype=np.int64) * stride + offset
    alpha_bar = chain[timesteps]
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta = 1.0 - alpha_bar / prev
    sched = NoiseSchedule(beta, alpha_bar, timesteps)
    sched.validate()
    return sched


def _ddim_move(z: Tensor, eps: Tensor, a_from: float, a_to: float) -> Tensor:
    if eps.shape != z.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    x0 = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * x0 + math.sqrt(1.0 - a_to) * eps


def ddim_denoise_step(z_t: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM update from level ``t`` to ``t - 1``."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"denoise step needs t in [1, {sched.T}], got {t}")
    return _ddim_move(z_t, eps, sched.abar(t), sched.abar(t - 1))


def ddim_inversion_step(z_t: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Mirror of :func:`ddim_denoise_step`, from level ``t`` to ``t + 1``."""
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"inversion step needs t in [0, {sched.T - 1}], got {t}")
    return _ddim_move(z_t, eps, sched.abar(t), sched.abar(t + 1))


class EpsModel(Protocol):
    def eps(self, z: Tensor, timestep: int, conds: Conditions, hook: Hook | None = None) -> Tensor: ...


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float
    null_text: TextEmbedding
    # the unconditional branch also drops identity embeddings, so guidance
    # strengthens identity as well as text
    drop_identity: bool = True

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")


def _branch_hook(hook, branch: str) -> Hook | None:
    if hook is None:
        return None
    return lambda kind, name, feat: hook(kind, name, feat, branch)


@torch.no_grad()
def guided_eps(
    model: EpsModel,
    z_t: Tensor,
    t: int,
    conds: Conditions,
    g: GuidanceConfig,
    sched: NoiseSchedule,
    hook=None,
) -> Tensor:
    """Classifier-free guided noise prediction at level ``t``.

    Both branches run as separate calls so that ``scale`` enters affinely and
    bit-reproducibly. ``hook(kind, name, feat, branch)`` sees both branches.
    """
    k = sched.timestep(t)
    if g.scale == 1.0:
        return model.eps(z_t, k, conds, _branch_hook(hook, "cond"))
    uncond = conds.with_text(g.null_text)
    if g.drop_identity:
        uncond = uncond.with_ids(())
    eps_u = model.eps(z_t, k, uncond, _branch_hook(hook, "uncond"))
    if g.scale == 0.0:
        return eps_u
    eps_c = model.eps(z_t, k, conds, _branch_hook(hook, "cond"))
    return eps_u + g.scale * (eps_c - eps_u)


@dataclass
class LatentTrajectory:
    """Latents by level (``latents[t]`` is level ``t``) plus cached self-attention inputs.

    ``self_attn`` maps ``(level, layer_name)`` to the feature seen at that level.
    """

    latents: list[Tensor]
    self_attn: dict[tuple[int, str], Tensor] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    def cached(self, t: int, name: str) -> Tensor:
        try:
            return self.self_attn[(t, name)]
        except KeyError:
            raise KeyError(f"no cached self-attention for level {t}, layer {name!r}") from None

    def layer_names(self) -> list[str]:
        return sorted({name for _, name in self.self_attn})


def _recorder(store: dict, level: int):
    def hook(kind, name, feat, branch):
        if kind == "self" and branch == "cond":
            store[(level, name)] = feat.detach().clone()
        return feat

    return hook


def _chain(first, second):
    if first is None:
        return second

    def hook(kind, name, feat, branch):
        return second(kind, name, first(kind, name, feat, branch), branch)

    return hook


@torch.no_grad()
def sample(
    model: EpsModel,
    z_T: Tensor,
    conds: Conditions,
    g: GuidanceConfig,
    sched: NoiseSchedule,
    hook_for_level: Callable[[int], Callable] | None = None,
) -> tuple[Tensor, LatentTrajectory]:
    """Run the guided DDIM loop from level ``T`` down to 0.

    ``hook_for_level(t)`` may supply a per-step hook (used for feature
    substitution); features of the conditional branch are recorded after it runs.
    """
    latents: list[Tensor | None] = [None] * (sched.T + 1)
    latents[sched.T] = z_T
    store: dict = {}
    z = z_T
    for t in range(sched.T, 0, -1):
        user = hook_for_level(t) if hook_for_level else None
        eps = guided_eps(model, z, t, conds, g, sched, _chain(user, _recorder(store, t)))
        z = ddim_denoise_step(z, t, eps, sched)
        latents[t - 1] = z
    return z, LatentTrajectory(latents, store)


@torch.no_grad()
def invert(
    model: EpsModel,
    z_0: Tensor,
    conds: Conditions,
    sched: NoiseSchedule,
    g: GuidanceConfig | None = None,
    refine: int = 1,
) -> LatentTrajectory:
    """DDIM inversion from the clean latent to level ``T``, caching self-attention.

    The step from level ``t`` to ``t + 1`` evaluates the model at level ``t + 1``.
    With ``refine = 0`` that evaluation is on ``z_t`` (plain DDIM inversion). Each
    refinement pass re-evaluates the prediction on the current estimate of
    ``z_{t+1}`` and redoes the step, a fixed-point iteration towards the latent
    that the denoise step maps back to ``z_t`` exactly. Features of the final
    evaluation are cached under level ``t + 1``. Guidance defaults to scale 1.
    """
    if refine < 0:
        raise ValueError(f"refine must be >= 0, got {refine}")
    g = g or GuidanceConfig(1.0, conds.text)
    latents = [z_0]
    store: dict = {}
    z = z_0
    for t in range(sched.T):
        eps = guided_eps(model, z, t + 1, conds, g, sched, _recorder(store, t + 1))
        nxt = ddim_inversion_step(z, t, eps, sched)
        for _ in range(refine):
            eps = guided_eps(model, nxt, t + 1, conds, g, sched, _recorder(store, t + 1))
            nxt = ddim_inversion_step(z, t, eps, sched)
        z = nxt
        latents.append(z)
    return LatentTrajectory(latents, store)


def _dct_matrix(n: int) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(n, dtype=torch.float64)[None, :]
    m = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


class ToyAutoencoder:
    """Fixed orthogonal patch projection standing in for the VAE.

    Each ``factor x factor`` patch of each colour channel is projected onto its
    ``keep x keep`` lowest 2-d DCT-II basis functions, so ``decode(encode(x))`` is
    the orthogonal projection of ``x`` onto that span. Pixels are mapped from
    ``[0, 1]`` to ``[-1, 1]`` first; each DCT frequency then gets its own scale,
    chosen so latents of the synthetic scenes have roughly unit variance.
    Latent channels are ordered ``(colour, u, v)``.
    """

    def __init__(self, factor: int = 8, keep: int = 2, colors: int = 3, scale=DEFAULT_LATENT_SCALE):
        if keep > factor:
            raise ValueError("keep must not exceed factor")
        self.factor, self.keep, self.colors = factor, keep, colors
        per_freq = torch.as_tensor(scale, dtype=torch.float64).flatten()
        if per_freq.numel() == 1:
            per_freq = per_freq.expand(keep * keep)
        if per_freq.numel() != keep * keep or not bool((per_freq > 0).all()):
            raise ValueError(f"scale must be positive, scalar or one per frequency ({keep * keep}), got {scale}")
        self.scale = tuple(float(x) for x in per_freq)
        d = _dct_matrix(factor)[:keep]
        basis = torch.einsum("ui,vj->uvij", d, d).reshape(keep * keep, factor, factor)
        weight = torch.zeros(colors * keep * keep, colors, factor, factor, dtype=torch.float64)
        for c in range(colors):
            weight[c * keep * keep : (c + 1) * keep * keep, c] = basis
        self.weight = weight.float()
        self.channel_scale = per_freq.repeat(colors).float()[:, None, None]

    @property
    def latent_channels(self) -> int:
        return self.colors * self.keep * self.keep

    def latent_size(self, h: int, w: int) -> tuple[int, int]:
        return h // self.factor, w // self.factor

    def _check(self, img: Tensor) -> None:
        h, w = img.shape[-2:]
        if img.shape[-3] != self.colors or h % self.factor or w % self.factor:
            raise ValueError(
                f"image {tuple(img.shape)} must have {self.colors} channels and sides divisible by {self.factor}"
            )

    def encode(self, img: Tensor) -> Tensor:
        self._check(img)
        batched = img.dim() == 4
        x = img if batched else img[None]
        z = F.conv2d(2 * x.float() - 1, self.weight, stride=self.factor) * self.channel_scale
        return z if batched else z[0]

    def decode(self, latent: Tensor) -> Tensor:
        batched = latent.dim() == 4
        z = latent if batched else latent[None]
        x = (F.conv_transpose2d(z.float() / self.channel_scale, self.weight, stride=self.factor) + 1) / 2
        return x if batched else x[0]

    def project(self, img: Tensor) -> Tensor:
        return self.decode(self.encode(img))


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    mse = float(((a.double() - b.double()) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(peak**2 / mse)
