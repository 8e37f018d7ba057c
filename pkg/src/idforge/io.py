"""File formats: PNM images, tensor checkpoints and INI run configs."""
from __future__ import annotations

import configparser
import dataclasses
import json
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

# ---------------------------------------------------------------- images

_PNM = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


class FormatError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i


def decode_pnm(data: bytes) -> torch.Tensor:
    """Decode P2/P3/P5/P6 bytes into floats in [0, 1]: ``(H, W)`` for gray, ``(3, H, W)`` for color."""
    magic = data[:2]
    if magic not in _PNM:
        raise FormatError(f"unsupported PNM magic {magic!r}")
    channels, binary = _PNM[magic]
    (_, w, h, maxval), pos = _header_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise FormatError(f"bad PNM header: {e}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"bad PNM header: {w}x{h}, maxval {maxval}")
    n = w * h * channels
    if binary:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos : pos + n * dtype.itemsize]
        if len(raw) != n * dtype.itemsize:
            raise FormatError(f"expected {n * dtype.itemsize} pixel bytes, got {len(raw)}")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        body = data[pos:].split()
        if len(body) < n:
            raise FormatError(f"expected {n} samples, got {len(body)}")
        values = np.array([int(v) for v in body[:n]], dtype=np.float64)
    if values.max(initial=0) > maxval:
        raise FormatError("sample exceeds maxval")
    arr = values.reshape(h, w, channels) / maxval
    t = torch.from_numpy(arr).float()
    return t[..., 0] if channels == 1 else t.permute(2, 0, 1).contiguous()


def encode_pnm(img: torch.Tensor, binary: bool = True, maxval: int = 255) -> bytes:
    """Encode ``(H, W)`` gray or ``(3, H, W)`` color floats in [0, 1]."""
    if img.dim() == 2:
        arr, channels = img.detach().double().numpy()[..., None], 1
    elif img.dim() == 3 and img.shape[0] == 3:
        arr, channels = img.detach().double().permute(1, 2, 0).numpy(), 3
    else:
        raise FormatError(f"PNM needs (H, W) or (3, H, W), got {tuple(img.shape)}")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval must be in 1..65535, got {maxval}")
    h, w = arr.shape[:2]
    q = np.rint(np.clip(arr, 0, 1) * maxval).astype(np.int64)
    magic = {(1, False): b"P2", (3, False): b"P3", (1, True): b"P5", (3, True): b"P6"}[(channels, binary)]
    head = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    if binary:
        return head + q.astype(">u2" if maxval > 255 else "u1").tobytes()
    rows = [" ".join(str(v) for v in row.ravel()) for row in q]
    return head + ("\n".join(rows) + "\n").encode()


def read_pnm(path) -> torch.Tensor:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, img: torch.Tensor, binary: bool = True, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pnm(img, binary, maxval))


def read_mask(path) -> torch.Tensor:
    """Graymap mask with 255 meaning fully masked."""
    m = read_pnm(path)
    if m.dim() != 2:
        raise FormatError("mask must be a graymap")
    return m


# ---------------------------------------------------------------- checkpoints

MAGIC = b"IDFGCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")  # magic, version, manifest length


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    trainable: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    """Serialize deterministically: entries sorted by name, payload float32 little-endian."""
    entries, chunks, offset = [], [], 0
    for name in sorted(ck.tensors):
        t = ck.tensors[name].detach().to(torch.float32).contiguous()
        raw = t.numpy().astype("<f4", copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": "float32",
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "trainable": bool(ck.trainable.get(name, False)),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": ck.meta}, sort_keys=True, separators=(",", ":")).encode()
    return _HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEAD.size:
        raise FormatError("checkpoint truncated")
    magic, version, mlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _HEAD.size + mlen
    try:
        manifest = json.loads(data[_HEAD.size : start])
    except ValueError as e:
        raise FormatError(f"corrupt checkpoint manifest: {e}") from None
    tensors, trainable = {}, {}
    for e in manifest["entries"]:
        if e["dtype"] != "float32":
            raise FormatError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        lo = start + e["offset"]
        raw = data[lo : lo + e["nbytes"]]
        n = int(np.prod(e["shape"], dtype=np.int64))
        if len(raw) != 4 * n or e["nbytes"] != 4 * n:
            raise FormatError(f"payload size mismatch for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
        trainable[e["name"]] = bool(e["trainable"])
    return Checkpoint(tensors, trainable, manifest.get("meta", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_checkpoint(model: nn.Module, **meta) -> Checkpoint:
    """Snapshot a toy model; ``meta`` records how to rebuild it."""
    tensors = dict(model.state_dict())
    grads = {n: p.requires_grad for n, p in model.named_parameters()}
    meta = {"kind": getattr(model, "kind", "base"), "model": model.cfg.to_dict(), **meta}
    return Checkpoint(tensors, {n: grads.get(n, False) for n in tensors}, meta)


def model_from_checkpoint(ck: Checkpoint) -> nn.Module:
    from .denoiser import ModelConfig, ToyDenoiser
    from .repcontrol import ConditionAdapter, IdentityProjection, build_dual_model

    cfg = ModelConfig.from_dict(ck.meta["model"])
    kind = ck.meta.get("kind", "base")
    model = ToyDenoiser(cfg)
    if kind == "dual":
        model = build_dual_model(model)
    elif kind == "merged":
        model.adapter = ConditionAdapter(cfg.cond_channels, cfg.latent_channels, cfg.factor)
        model.id_proj = IdentityProjection(cfg.context_dim, cfg.id_tokens)
        model.kind = "merged"
    elif kind != "base":
        raise FormatError(f"unknown model kind {kind!r}")
    missing = set(model.state_dict()) ^ set(ck.tensors)
    if missing:
        raise FormatError(f"checkpoint does not match a {kind} model: {sorted(missing)[:5]}")
    model.load_state_dict(ck.tensors)
    for n, p in model.named_parameters():
        p.requires_grad_(ck.trainable.get(n, False))
    return model.eval()


# ---------------------------------------------------------------- configs


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            args = typing.get_args(typ)
            item = args[0] if args else float
            parts = [p for p in raw.replace(",", " ").split()]
            return tuple(_parse_value(p, item, key) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key!r}")


def _fill(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {sorted(names)}")
        kwargs[key] = _parse_value(raw, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}]: {e}") from None


def read_config(text: str, schema: dict[str, type]) -> dict:
    """Parse INI ``text``; every section and key must exist in ``schema``.

    ``schema`` maps section names to dataclasses; missing sections get defaults.
    """
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none", inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    unknown = [s for s in cp.sections() if s not in schema]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; known: {sorted(schema)}")
    return {name: _fill(cls, dict(cp[name]) if cp.has_section(name) else {}, name) for name, cls in schema.items()}


def load_config(path, schema: dict[str, type]) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return read_config(text, schema)


def dump_config(sections: dict) -> str:
    out = []
    for name, obj in sections.items():
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
