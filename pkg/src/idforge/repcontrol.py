"""Dual-branch conv/linear layers and their exact fold into single-branch weights.

During training every conv/linear layer of the denoiser runs a frozen branch
(weights kept as buffers) and a trainable copy side by side and sums the two
outputs before anything nonlinear. Because both branches are linear in their
weights, ``alpha * f(x; W) + beta * f(x; W_m) == f(x; alpha * W + beta * W_m)``,
which is what :func:`reparameterize` exploits.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .tensor_nn import conv2d, linear

# Global timestep MLP stays single-branch.
SINGLE_BRANCH_PREFIXES = ("time_embed.",)


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError(f"merge ratios must be finite, got alpha={self.alpha}, beta={self.beta}")


def init_copy(theta: Tensor | None, w: float) -> Tensor | None:
    if not math.isfinite(w):
        raise ValueError(f"copy ratio must be finite, got {w}")
    return None if theta is None else (w * theta).detach().clone()


class _DualBranch(nn.Module):
    kind: str

    def __init__(self, weight: Tensor, bias: Tensor | None, w: float):
        super().__init__()
        self.register_buffer("weight", weight.detach().clone())
        self.register_buffer("bias", None if bias is None else bias.detach().clone())
        self.weight_m = nn.Parameter(init_copy(self.weight, w))
        self.bias_m = None if bias is None else nn.Parameter(init_copy(self.bias, w))

    def branch(self, x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.branch(x, self.weight, self.bias) + self.branch(x, self.weight_m, self.bias_m)


class DualConv2d(_DualBranch):
    kind = "conv"

    def __init__(self, conv: nn.Conv2d, w: float = 0.1):
        if conv.groups != 1 or conv.dilation != (1, 1) or conv.padding_mode != "zeros":
            raise ValueError("only plain zero-padded, ungrouped convolutions are supported")
        super().__init__(conv.weight, conv.bias, w)
        self.stride = conv.stride[0]
        self.padding = conv.padding[0]

    def branch(self, x, weight, bias):
        return conv2d(x, weight, bias, stride=self.stride, pad=self.padding)


class DualLinear(_DualBranch):
    kind = "linear"

    def __init__(self, lin: nn.Linear, w: float = 0.1):
        super().__init__(lin.weight, lin.bias, w)

    def branch(self, x, weight, bias):
        return linear(x, weight, bias)


DualBranchLayer = DualConv2d | DualLinear


def dual_forward(layer: _DualBranch, x: Tensor, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """Sum of the frozen and copy branches, optionally scaled per branch."""
    base = layer.branch(x, layer.weight, layer.bias)
    copy_ = layer.branch(x, layer.weight_m, layer.bias_m)
    if alpha == 1.0 and beta == 1.0:
        return base + copy_
    return alpha * base + beta * copy_


def reparameterize(layer: _DualBranch, cfg: MergeConfig = MergeConfig()) -> nn.Module:
    """Fold a dual layer into a plain ``nn.Conv2d``/``nn.Linear`` with merged weights."""
    with torch.no_grad():
        weight = cfg.alpha * layer.weight + cfg.beta * layer.weight_m
        bias = None if layer.bias is None else cfg.alpha * layer.bias + cfg.beta * layer.bias_m
        if isinstance(layer, DualConv2d):
            out, cin, k, _ = weight.shape
            merged = nn.Conv2d(cin, out, k, stride=layer.stride, padding=layer.padding, bias=bias is not None)
        else:
            out, cin = weight.shape
            merged = nn.Linear(cin, out, bias=bias is not None)
        merged.weight.copy_(weight)
        if bias is not None:
            merged.bias.copy_(bias)
    merged.requires_grad_(False)
    return merged


class ConditionAdapter(nn.Module):
    """Strided conv stack from a condition raster to the first-layer input shape.

    The last conv starts at zero so a freshly attached adapter is a no-op.
    """

    def __init__(self, in_channels: int = 2, out_channels: int = 12, factor: int = 8, hidden: tuple[int, ...] = (16, 32)):
        super().__init__()
        n = int(round(math.log2(factor)))
        if 2**n != factor:
            raise ValueError(f"adapter factor must be a power of two, got {factor}")
        widths = [in_channels, *hidden[: n - 1]]
        widths += [widths[-1]] * (n - len(widths))
        layers: list[nn.Module] = []
        for cin, cout in zip(widths, widths[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU()]
        last = nn.Conv2d(widths[-1], out_channels, 3, stride=2, padding=1)
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        layers.append(last)
        self.net = nn.Sequential(*layers)

    def forward(self, cond: Tensor) -> Tensor:
        return self.net(cond)


class IdentityProjection(nn.Module):
    """Linear map of identity tokens plus a learned embedding per token slot.

    The slot embedding lets cross-attention keys tell the face cells apart, so a
    query can pick the token describing its own part of the face.
    """

    def __init__(self, dim: int, tokens: int, pos_std: float = 1.0):
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        self.pos = nn.Parameter(pos_std * torch.randn(tokens, dim))
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(dim))
            self.linear.bias.zero_()

    def forward(self, tokens: Tensor) -> Tensor:
        n = tokens.shape[-2]
        if n > self.pos.shape[0]:
            raise ValueError(f"{n} identity tokens but only {self.pos.shape[0]} slot embeddings")
        return self.linear(tokens) + self.pos[:n]


def inject_condition(adapter, condition_img: Tensor, first_layer_input: Tensor) -> Tensor:
    """Add the adapter's encoding of the condition to the first layer's input."""
    enc = adapter(condition_img)
    if enc.shape != first_layer_input.shape:
        raise ValueError(
            f"adapter output {tuple(enc.shape)} does not match first-layer input {tuple(first_layer_input.shape)}"
        )
    return first_layer_input + enc


def _replace(model: nn.Module, fn) -> None:
    for name, module in list(model.named_modules()):
        if any(name.startswith(p) or name + "." == p for p in SINGLE_BRANCH_PREFIXES):
            continue
        if name.startswith(("adapter", "id_proj")):
            continue
        new = fn(module)
        if new is None:
            continue
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, attr, new)


def dual_layers(model: nn.Module) -> dict[str, _DualBranch]:
    return {n: m for n, m in model.named_modules() if isinstance(m, _DualBranch)}


def is_dual(model: nn.Module) -> bool:
    return bool(dual_layers(model))


def build_dual_model(denoiser: nn.Module, w: float = 0.1, seed: int = 1) -> nn.Module:
    """Copy ``denoiser`` with every conv/linear made dual, plus adapter and id projection.

    Everything inherited from the pretrained model is frozen; only copy weights,
    the adapter and the identity projection train.
    """
    dual = copy.deepcopy(denoiser)
    dual.requires_grad_(False)

    def to_dual(m):
        if type(m) is nn.Conv2d:
            return DualConv2d(m, w)
        if type(m) is nn.Linear:
            return DualLinear(m, w)
        return None

    _replace(dual, to_dual)
    cfg = dual.cfg
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        dual.adapter = ConditionAdapter(cfg.cond_channels, cfg.latent_channels, cfg.factor)
        dual.id_proj = IdentityProjection(cfg.context_dim, cfg.id_tokens)
    dual.kind = "dual"
    return dual


def merge_model(dual: nn.Module, cfg: MergeConfig = MergeConfig()) -> nn.Module:
    """Single-branch copy of a dual model; adapter and identity projection are kept as-is."""
    if not is_dual(dual):
        raise ValueError("merge_model needs a dual-branch model")
    merged = copy.deepcopy(dual)
    _replace(merged, lambda m: reparameterize(m, cfg) if isinstance(m, _DualBranch) else None)
    merged.requires_grad_(False)
    merged.kind = "merged"
    return merged


class _ScaledBranches:
    """Context manager evaluating every dual layer as ``alpha*base + beta*copy``."""

    def __init__(self, model: nn.Module, cfg: MergeConfig):
        self.layers = list(dual_layers(model).values())
        self.cfg = cfg

    def __enter__(self):
        for layer in self.layers:
            layer.forward = lambda x, _l=layer: dual_forward(_l, x, self.cfg.alpha, self.cfg.beta)
        return self

    def __exit__(self, *exc):
        for layer in self.layers:
            del layer.forward


def scaled_branches(model: nn.Module, cfg: MergeConfig) -> _ScaledBranches:
    return _ScaledBranches(model, cfg)


def base_param_count(model: nn.Module) -> int:
    """Parameters of the deployable graph, excluding adapter and identity projection."""
    total = 0
    for name, t in list(model.named_parameters()) + list(model.named_buffers()):
        if name.startswith(("adapter.", "id_proj.")) or name.endswith(("weight_m", "bias_m")):
            continue
        total += t.numel()
    return total


def copy_param_count(model: nn.Module) -> int:
    return sum(t.numel() for n, t in model.named_parameters() if n.endswith(("weight_m", "bias_m")))


def extra_param_count(model: nn.Module) -> dict[str, int]:
    out = {"adapter": 0, "id-attention": 0}
    for name, t in model.named_parameters():
        if name.startswith("adapter."):
            out["adapter"] += t.numel()
        elif name.startswith("id_proj."):
            out["id-attention"] += t.numel()
    return out


def random_conditions(cfg, g: torch.Generator, text_tokens: int = 8, id_tokens: int = 4, n_ids: int = 1):
    """Random latent, timestep and conditions for probing a toy model."""
    from .embeddings import Conditions, IdentityEmbedding, TextEmbedding

    hw = (cfg.latent_size, cfg.latent_size)
    z = torch.randn(cfg.latent_channels, *hw, generator=g)
    t = int(torch.randint(0, 1000, (1,), generator=g))
    text = TextEmbedding(torch.randn(text_tokens, cfg.context_dim, generator=g))
    ids = tuple((IdentityEmbedding(torch.randn(id_tokens, cfg.context_dim, generator=g)), None) for _ in range(n_ids))
    cond = (torch.rand(cfg.cond_channels, hw[0] * cfg.factor, hw[1] * cfg.factor, generator=g) > 0.9).float()
    return z, t, Conditions(text, ids, cond)


@torch.no_grad()
def equivalence_report(dual: nn.Module, merged: nn.Module, cfg: MergeConfig = MergeConfig(), probes: int = 100, seed: int = 0) -> dict:
    """Max/mean abs difference between merged and scaled dual-branch outputs on random probes."""
    g = torch.Generator().manual_seed(seed)
    worst, total, n = 0.0, 0.0, 0
    with scaled_branches(dual, cfg):
        for _ in range(probes):
            z, t, conds = random_conditions(dual.cfg, g)
            d = (merged.eps(z, t, conds) - dual.eps(z, t, conds)).abs()
            worst = max(worst, float(d.max()))
            total += float(d.double().sum())
            n += d.numel()
    return {"max_abs_diff": worst, "mean_abs_diff": total / n, "alpha": cfg.alpha, "beta": cfg.beta, "seed": seed, "probes": probes}
