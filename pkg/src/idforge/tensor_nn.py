"""Numeric primitives shared by every other module.

Tensors are plain ``torch.Tensor`` objects in float32. The wrappers here add the
shape validation and the exact conventions the rest of the package relies on
(cross-correlation convolution, population statistics, AdaIN epsilon placement).
Statistics are reduced in float64 and cast back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

ADAIN_EPS = 1e-5


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk weight."""
    if input.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got input {_shape(input)} and weight {_shape(weight)}")
    if input.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {_shape(input)} vs weight {_shape(weight)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias {_shape(bias)} does not match weight {_shape(weight)}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    return F.conv2d(input, weight, bias, stride=stride, padding=pad)


def linear(input: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.dim() != 2 or input.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear dim mismatch: input {_shape(input)} vs weight {_shape(weight)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias {_shape(bias)} does not match weight {_shape(weight)}")
    return F.linear(input, weight, bias)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Single-head softmax attention over the last two dims.

    Returns ``(out, attn_map)``; the map is handed back so callers can cache or
    replace it.
    """
    if k.shape[-2] == 0:
        raise ValueError("scaled_dot_attention: empty key set")
    if q.shape[-1] != k.shape[-1] or q.shape[-1] == 0:
        raise ValueError(f"scaled_dot_attention: query {_shape(q)} and key {_shape(k)} widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"scaled_dot_attention: key {_shape(k)} and value {_shape(v)} lengths differ")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    attn = torch.softmax(logits, dim=-1)
    return attn @ v, attn


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Split the channel dim into ``heads`` groups and attend per group."""
    if heads == 1:
        return scaled_dot_attention(q, k, v)[0]
    d, dv = q.shape[-1], v.shape[-1]
    if d % heads or dv % heads:
        raise ValueError(f"width {d}/{dv} not divisible by {heads} heads")

    def split(x: Tensor) -> Tensor:
        return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads).transpose(-2, -3)

    out, _ = scaled_dot_attention(split(q), split(k), split(v))
    out = out.transpose(-2, -3)
    return out.reshape(*out.shape[:-2], dv)


def _channel_stats(x: Tensor, weight: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel mean/std of a (C, N) float64 view, optionally weighted over N."""
    if weight is None:
        mean = x.mean(dim=1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=1, keepdim=True)
        total = torch.tensor(float(x.shape[1]), dtype=torch.float64)
        return mean, var.sqrt(), total
    total = weight.sum()
    if total <= 0:
        return torch.zeros(x.shape[0], 1, dtype=x.dtype), torch.zeros(x.shape[0], 1, dtype=x.dtype), total
    mean = (x * weight).sum(dim=1, keepdim=True) / total
    var = (((x - mean) ** 2) * weight).sum(dim=1, keepdim=True) / total
    return mean, var.sqrt(), total


def adain(content: Tensor, style: Tensor, eps: float = ADAIN_EPS) -> Tensor:
    """Adaptive instance normalization over channel-first tensors ``(C, ...)``.

    A constant style channel (zero std) maps the output to exactly the style mean.
    """
    if content.shape[0] != style.shape[0]:
        raise ValueError(f"adain channel mismatch: content {_shape(content)} vs style {_shape(style)}")
    c = content.reshape(content.shape[0], -1).double()
    s = style.reshape(style.shape[0], -1).double()
    mu_c, sd_c, _ = _channel_stats(c)
    mu_s, sd_s, _ = _channel_stats(s)
    out = sd_s * (c - mu_c) / (sd_c + eps) + mu_s
    return out.to(content.dtype).reshape(content.shape)


def masked_adain(
    content: Tensor,
    style: Tensor,
    content_weight: Tensor,
    style_weight: Tensor,
    eps: float = ADAIN_EPS,
) -> Tensor:
    """AdaIN with statistics taken over weighted populations.

    ``content`` and ``style`` are ``(C, ...)`` with identical trailing shape;
    weights broadcast over the trailing dims. If either population is empty the
    content is returned unchanged.
    """
    if content.shape != style.shape:
        raise ValueError(f"masked_adain shape mismatch: content {_shape(content)} vs style {_shape(style)}")
    n = content[0].numel()
    cw = torch.broadcast_to(content_weight, content.shape[1:]).reshape(1, n).double()
    sw = torch.broadcast_to(style_weight, content.shape[1:]).reshape(1, n).double()
    c = content.reshape(content.shape[0], n).double()
    s = style.reshape(style.shape[0], n).double()
    mu_c, sd_c, wc = _channel_stats(c, cw)
    mu_s, sd_s, ws = _channel_stats(s, sw)
    if wc <= 0 or ws <= 0:
        return content.clone()
    out = sd_s * (c - mu_c) / (sd_c + eps) + mu_s
    return out.to(content.dtype).reshape(content.shape)


@dataclass(frozen=True)
class GaussianKernel2D:
    size: tuple[int, int]
    sigma: float
    weights: Tensor

    @property
    def center(self) -> float:
        h, w = self.size
        return float(self.weights[h // 2, w // 2])


def _gauss_1d(n: int, sigma: float) -> torch.Tensor:
    r = torch.arange(n, dtype=torch.float64) - (n - 1) / 2
    return torch.exp(-(r**2) / (2 * sigma**2))


def _normalized_outer(h: int, w: int, sigma: float) -> Tensor:
    g = torch.outer(_gauss_1d(h, sigma), _gauss_1d(w, sigma))
    return (g / g.sum()).float()


def gaussian_kernel(size: tuple[int, int], sigma: float) -> GaussianKernel2D:
    """Normalized separable Gaussian with odd extents."""
    h, w = size
    if h < 1 or w < 1 or h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"gaussian_kernel needs odd positive extents, got {size}")
    if not sigma > 0:
        raise ValueError(f"gaussian_kernel needs sigma > 0, got {sigma}")
    return GaussianKernel2D((h, w), float(sigma), _normalized_outer(h, w, sigma))


def gaussian_window(size: tuple[int, int], sigma: float | None = None) -> GaussianKernel2D:
    """Centered normalized Gaussian weighting of any extent (even sizes allowed).

    Used to weight a cropped patch; ``sigma`` defaults to a quarter of the larger side.
    """
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"gaussian_window needs positive extents, got {size}")
    sigma = max(h, w) / 4 if sigma is None else sigma
    if not sigma > 0:
        raise ValueError(f"gaussian_window needs sigma > 0, got {sigma}")
    return GaussianKernel2D((h, w), float(sigma), _normalized_outer(h, w, sigma))


def masked_composite(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    """``a * mask + b * (1 - mask)``; ``mask`` broadcasts over leading channels."""
    if mask.numel() and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("masked_composite: mask values must lie in [0, 1]")
    return a * mask + b * (1 - mask)
