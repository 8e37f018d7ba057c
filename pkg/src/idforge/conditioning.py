"""Identity conditioning: dual/masked cross-attention, Clone Face Tuning and training losses.

The text and face encoders are deterministic stubs. The face encoder resizes a
crop to ``canon x canon``, standardizes each colour channel and turns each cell of a
coarse grid into one token through a fixed isometric projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .diffusion import NoiseSchedule
from .embeddings import Conditions, IdentityEmbedding, RegionMask, TextEmbedding, tokens_of
from .tensor_nn import GaussianKernel2D, gaussian_window, multihead_attention

TEXT_SEED = 0x7E47
FACE_SEED = 0xFACE
PAD = 0


class TextEncoder:
    """Frozen lookup-table text encoder over small integer vocabularies."""

    def __init__(self, vocab: int = 64, length: int = 8, dim: int = 64, seed: int = TEXT_SEED):
        g = torch.Generator().manual_seed(seed)
        self.vocab, self.length, self.dim = vocab, length, dim
        self.table = torch.randn(vocab, dim, generator=g)
        self.table[PAD] = 0.0
        self.position = 0.1 * torch.randn(length, dim, generator=g)

    def __call__(self, token_ids: Sequence[int]) -> TextEmbedding:
        ids = list(token_ids)[: self.length]
        if any(not 0 <= i < self.vocab for i in ids):
            raise ValueError(f"token ids must lie in [0, {self.vocab})")
        ids = ids + [PAD] * (self.length - len(ids))
        return TextEmbedding(self.table[torch.tensor(ids)] + self.position)

    def null(self) -> TextEmbedding:
        return self([])


class FaceEncoder:
    """Stand-in identity encoder: standardized crop -> one token per face cell.

    Crops are area-resized to ``canon x canon``, each colour channel is shifted to
    zero mean and scaled to unit deviation (so identity ignores per-channel
    brightness and contrast, like illumination-robust face embeddings), and the
    result is cut into a ``g x g`` grid (``tokens = g * g``). Each cell is mapped
    to a token by the same projection with orthonormal columns, so token cosine
    similarity equals the cosine between the standardized crops.
    """

    def __init__(self, tokens: int = 4, dim: int = 64, canon: int = 8, seed: int = FACE_SEED, floor: float = 0.05):
        grid = math.isqrt(tokens)
        if grid * grid != tokens or canon % grid:
            raise ValueError(f"tokens must be a square grid dividing the canonical size, got {tokens} for {canon}")
        cell_in = 3 * (canon // grid) ** 2
        if dim < cell_in:
            raise ValueError(f"token dim {dim} cannot hold a {cell_in}-value face cell")
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(dim, cell_in, generator=g, dtype=torch.float64))
        self.tokens, self.dim, self.canon, self.grid = tokens, dim, canon, grid
        self.floor = floor  # deviation floor so flat crops do not amplify noise
        self.projection = q  # (dim, cell_in), orthonormal columns

    def features(self, patch: Tensor) -> Tensor:
        """Standardized canonical crop split into cells: ``(tokens, 3 * cell * cell)``."""
        if patch.dim() != 3 or patch.shape[0] != 3:
            raise ValueError(f"face patch must be (3, h, w), got {tuple(patch.shape)}")
        x = F.adaptive_avg_pool2d(patch[None].double(), (self.canon, self.canon))[0]
        x = x - x.mean(dim=(1, 2), keepdim=True)
        x = x / (x.pow(2).mean(dim=(1, 2), keepdim=True) + self.floor**2).sqrt()
        c = self.canon // self.grid
        cells = x.reshape(3, self.grid, c, self.grid, c).permute(1, 3, 0, 2, 4)
        return cells.reshape(self.tokens, -1)

    def __call__(self, patch: Tensor, id_label=None) -> IdentityEmbedding:
        emb = self.features(patch) @ self.projection.T
        return IdentityEmbedding(emb.float(), id_label)


def face_similarity(a, b) -> float:
    """Cosine similarity of two identity embeddings (or token tensors)."""
    x = tokens_of(a).reshape(-1).double()
    y = tokens_of(b).reshape(-1).double()
    den = float(x.norm() * y.norm())
    return 0.0 if den == 0 else float(x @ y) / den


Projection = Callable[[Tensor], Tensor] | None


def cross_attention(q: Tensor, context, to_k: Projection = None, to_v: Projection = None, heads: int = 1) -> Tensor:
    ctx = tokens_of(context)
    k = ctx if to_k is None else to_k(ctx)
    v = ctx if to_v is None else to_v(ctx)
    if k.shape[-1] != q.shape[-1]:
        raise ValueError(f"cross_attention: query width {q.shape[-1]} vs key width {k.shape[-1]}")
    return multihead_attention(q, k, v, heads)


def dual_cross_attention(
    q: Tensor, text, identity, to_k: Projection = None, to_v: Projection = None, heads: int = 1
) -> Tensor:
    """Text and identity attention sharing one query and one projection pair, summed."""
    return cross_attention(q, text, to_k, to_v, heads) + cross_attention(q, identity, to_k, to_v, heads)


def _flat_mask(mask, n_query: int) -> Tensor:
    grid = mask.grid if isinstance(mask, RegionMask) else mask
    if grid.shape[-2:].numel() != n_query:
        raise ValueError(f"mask of shape {tuple(grid.shape)} does not match {n_query} query positions")
    return grid.reshape(*grid.shape[:-2], n_query, 1)


def masked_multi_id_attention(
    q: Tensor,
    text,
    ids: Sequence[tuple[object, object]],
    to_k: Projection = None,
    to_v: Projection = None,
    heads: int = 1,
) -> Tensor:
    """Text attention plus each identity's attention gated by its own mask.

    ``q`` is ``(..., H*W, d)``; masks are ``(H, W)`` grids (or ``RegionMask``) already
    at the query resolution. Overlapping masks simply add.
    """
    out = cross_attention(q, text, to_k, to_v, heads)
    for identity, mask in ids:
        m = _flat_mask(mask, q.shape[-2]).to(q.dtype)
        out = out + m * cross_attention(q, identity, to_k, to_v, heads)
    return out


@dataclass(frozen=True)
class TrainSample:
    image: Tensor  # (3, H, W) in [0, 1]
    cond: Tensor  # (2, H, W): skeleton, landmarks
    identity: IdentityEmbedding | None
    text: TextEmbedding
    masks: tuple[RegionMask, ...] = field(default_factory=tuple)
    caption: tuple[int, ...] = ()
    identities: tuple[IdentityEmbedding, ...] = ()
    bboxes: tuple[tuple[int, int, int, int], ...] = ()

    def __post_init__(self):
        hw = tuple(self.image.shape[-2:])
        if tuple(self.cond.shape[-2:]) != hw or any(m.shape != hw for m in self.masks):
            raise ValueError("image, condition image and masks must share spatial size")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image.shape[-2:])


def clone_face_splice(sample: TrainSample, panel: int | None = None, cell: int = 8) -> TrainSample:
    """Widen the sample with a side panel holding a second copy of its face.

    The copy keeps the original row and the original offset modulo ``cell`` so
    the two face regions land on identically shaped latent crops. Returns a
    sample whose masks are ``(M1, M2)``; the identity embedding is the same object.
    """
    if len(sample.masks) != 1:
        raise ValueError(f"clone_face_splice needs exactly one face mask, got {len(sample.masks)}")
    H, W = sample.size
    panel = W // 2 if panel is None else panel
    bbox = sample.masks[0].bbox()
    if bbox is None:
        raise ValueError("clone_face_splice: empty face mask")
    x, y, w, h = bbox
    if w > panel:
        raise ValueError(f"face patch width {w} exceeds splice panel width {panel}")
    x2 = W + ((panel - w) // 2 // cell) * cell + x % cell
    while x2 + w > W + panel:
        x2 -= cell
    if x2 < W:
        raise ValueError(f"face patch width {w} does not fit the splice panel width {panel} on the {cell}-pixel grid")

    m1 = sample.masks[0].grid
    outside = (1 - m1).double()
    fill = (sample.image.double() * outside).sum(dim=(1, 2)) / outside.sum().clamp_min(1)
    image = torch.empty(3, H, W + panel)
    image[:, :, :W] = sample.image
    image[:, :, W:] = fill.float()[:, None, None]
    image[:, y : y + h, x2 : x2 + w] = sample.image[:, y : y + h, x : x + w]
    cond = torch.zeros(sample.cond.shape[0], H, W + panel)
    cond[:, :, :W] = sample.cond
    cond[:, y : y + h, x2 : x2 + w] = sample.cond[:, y : y + h, x : x + w]
    grid1 = torch.zeros(H, W + panel)
    grid1[:, :W] = m1
    grid2 = torch.zeros(H, W + panel)
    grid2[y : y + h, x2 : x2 + w] = m1[y : y + h, x : x + w]
    return replace(sample, image=image, cond=cond, masks=(RegionMask(grid1), RegionMask(grid2)), bboxes=(bbox, (x2, y, w, h)))


def crop_masked(feat: Tensor, mask: RegionMask) -> Tensor:
    """Crop ``feat`` (C, H, W) to the mask's bounding box and weight by the mask."""
    if mask.shape != tuple(feat.shape[-2:]):
        mask = mask.resized(tuple(feat.shape[-2:]))
    bbox = mask.bbox()
    if bbox is None:
        raise ValueError("crop of an empty mask")
    x, y, w, h = bbox
    return feat[..., y : y + h, x : x + w] * mask.grid[y : y + h, x : x + w].to(feat.dtype)


def clone_face_attention_loss(
    feat: Tensor,
    m1: RegionMask,
    m2: RegionMask,
    g: GaussianKernel2D | None = None,
    min_resolution: int = 8,
) -> Tensor:
    """Squared L2 norm of the Gaussian-weighted difference of the two face crops.

    ``feat`` is a cross-attention feature map ``(C, H, W)``; ``g`` defaults to a
    centered Gaussian window the size of the crop with sigma = side / 4.
    """
    if m1.shape != m2.shape:
        raise ValueError(f"clone-face masks differ in shape: {m1.shape} vs {m2.shape}")
    if min(feat.shape[-2:]) < min_resolution:
        raise ValueError(f"feature map {tuple(feat.shape[-2:])} below crop resolution threshold {min_resolution}")
    c1, c2 = crop_masked(feat, m1), crop_masked(feat, m2)
    if c1.shape != c2.shape:
        raise ValueError(f"clone-face crops differ in shape: {tuple(c1.shape)} vs {tuple(c2.shape)}")
    if g is None:
        g = gaussian_window(tuple(c1.shape[-2:]))
    if g.size != tuple(c1.shape[-2:]):
        raise ValueError(f"Gaussian size {g.size} does not match crop {tuple(c1.shape[-2:])}")
    return (((c1 - c2) * g.weights.to(feat.dtype)) ** 2).sum()


def noised(z0: Tensor, noise: Tensor, abar: Tensor | float) -> Tensor:
    abar = torch.as_tensor(abar, dtype=z0.dtype)
    while abar.dim() < z0.dim():
        abar = abar[..., None]
    return abar.sqrt() * z0 + (1 - abar).sqrt() * noise


def diffusion_loss(
    denoiser,
    z0: Tensor,
    noise: Tensor,
    t,
    sched: NoiseSchedule,
    conds: Sequence[Conditions] | Conditions,
    hook=None,
) -> Tensor:
    """Mean squared error between the true noise and the prediction at level(s) ``t``.

    Accepts a single latent ``(C, h, w)`` or a batch ``(B, C, h, w)`` with one level
    and one ``Conditions`` per element.
    """
    single = z0.dim() == 3
    if single:
        z0, noise, conds = z0[None], noise[None], [conds]
    levels = [int(t)] * z0.shape[0] if isinstance(t, int) else [int(x) for x in t]
    for lv in levels:
        if not 1 <= lv <= sched.T:
            raise ValueError(f"level {lv} outside [1, {sched.T}]")
    abar = torch.tensor([sched.abar(lv) for lv in levels], dtype=z0.dtype)
    z_t = noised(z0, noise, abar)
    timesteps = torch.tensor([sched.timestep(lv) for lv in levels])
    pred = denoiser.eps_batch(z_t, timesteps, list(conds), hook=hook)
    return ((noise - pred) ** 2).mean()


def composite_loss(step_index: int, l_cldm, l_cfa, lam: float = 0.2, every: int = 10):
    """Diffusion loss, plus ``lam * l_cfa`` on steps divisible by ``every``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if step_index % every == 0:
        return l_cldm + lam * l_cfa
    return l_cldm


def is_clone_step(step_index: int, every: int = 10) -> bool:
    return step_index % every == 0


def null_text_dropout(text: TextEmbedding, u: float, p: float, null: TextEmbedding) -> TextEmbedding:
    if not 0 <= p <= 1:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    return null if u < p else text
