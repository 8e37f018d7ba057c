"""Conditioning value types: text/identity token matrices, region masks, condition bundles."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tensor  # (T_txt, D)

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass(frozen=True)
class IdentityEmbedding:
    tokens: Tensor  # (T_id, D)
    id_label: Hashable = None

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


def resize_area(grid: Tensor, size: tuple[int, int]) -> Tensor:
    """Area-average (downsample) or nearest-replicate (integer upsample) a 2-d grid."""
    h, w = grid.shape
    H, W = size
    if (h, w) == (H, W):
        return grid.clone()
    if H >= h and W >= w and H % h == 0 and W % w == 0:
        return grid.repeat_interleave(H // h, 0).repeat_interleave(W // w, 1)
    return F.adaptive_avg_pool2d(grid[None, None].float(), (H, W))[0, 0].clamp(0, 1)


@dataclass(frozen=True)
class RegionMask:
    """Soft spatial mask with values in [0, 1]."""

    grid: Tensor  # (H, W)
    source_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.grid.dim() != 2:
            raise ValueError(f"RegionMask grid must be 2-d, got {tuple(self.grid.shape)}")
        if self.grid.numel() and (self.grid.min() < 0 or self.grid.max() > 1):
            raise ValueError("RegionMask values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)

    def resized(self, size: tuple[int, int]) -> "RegionMask":
        return RegionMask(resize_area(self.grid, size), self.source_size or self.shape)

    @classmethod
    def from_bbox(cls, size: tuple[int, int], bbox: tuple[int, int, int, int]) -> "RegionMask":
        """Binary mask for ``bbox = (x, y, w, h)`` on an ``(H, W)`` canvas."""
        x, y, w, h = bbox
        grid = torch.zeros(size)
        grid[y : y + h, x : x + w] = 1.0
        return cls(grid, size)

    def bbox(self) -> tuple[int, int, int, int] | None:
        ys, xs = torch.nonzero(self.grid > 0, as_tuple=True)
        if len(ys) == 0:
            return None
        x0, y0 = int(xs.min()), int(ys.min())
        return x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1


@dataclass(frozen=True)
class Conditions:
    """Everything the denoiser is conditioned on for one latent.

    ``ids`` pairs each identity with an optional mask; ``None`` means the identity
    attends everywhere (plain dual cross-attention).
    """

    text: TextEmbedding
    ids: tuple[tuple[IdentityEmbedding, RegionMask | None], ...] = field(default_factory=tuple)
    cond_image: Tensor | None = None  # (C_cond, H, W)

    def with_text(self, text: TextEmbedding) -> "Conditions":
        return replace(self, text=text)

    def with_ids(self, ids) -> "Conditions":
        return replace(self, ids=tuple(ids))

    def with_cond(self, cond_image: Tensor | None) -> "Conditions":
        return replace(self, cond_image=cond_image)


def tokens_of(x) -> Tensor:
    return x.tokens if isinstance(x, (TextEmbedding, IdentityEmbedding)) else x


def zeros_like_text(text: TextEmbedding) -> TextEmbedding:
    return TextEmbedding(torch.zeros_like(text.tokens))
