"""Analytic FLOPs / MACs / parameter counts over line-oriented architecture specs.

Spec file grammar (one statement per line, ``#`` starts a comment)::

    spec   NAME
    note   free text                      # assumption printed with every report
    group  NAME role=base|aux|extra [step=0]
    input  NAME map C H W | input NAME tokens T D
    conv   GROUP NAME in=SRC out=C k=K [s=S] [bias=0]
    linear GROUP NAME in=SRC out=D [bias=0] [shared=1]
    attention GROUP NAME q=SRC k=SRC v=SRC heads=H
    norm   GROUP NAME in=SRC [affine=0]
    act    GROUP NAME in=SRC
    glu    GROUP NAME in=SRC              # gated halves: D -> D/2
    add    GROUP NAME in=A,B              # B may be a (1, C) vector broadcast over a map
    params GROUP NAME n=N                 # parameter-only entry (embedding tables)
    concat NAME in=A,B | up NAME in=SRC factor=F
    tokens NAME in=SRC | map NAME in=SRC h=H w=W

Tensors are maps ``(C, H, W)`` or token sets ``(T, D)``; every ``in=`` must name a
tensor defined earlier with a compatible shape. Convs use same padding.

Counting: conv/linear MACs are ``C_in * C_out * k^2 * H_out * W_out`` and
``T * D_in * D_out``, FLOPs twice that; the attention core costs ``2 * Tq * Tk * D``
MACs plus one softmax FLOP per score; norms, activations and adds cost one FLOP
per output element and no MACs. ``shared=1`` linears reuse another layer's
weights and carry no parameters. Groups with ``step=0`` contribute parameters
only (run once per image, not per denoiser step).

Two conventions are offered. ``analytic`` counts everything above. ``module``
counts conv and linear layers only, which is what module-hook profilers report
(attention matmuls and elementwise ops are invisible to them); it is the default
because published compute tables are read that way.

Modes: ``base`` counts base and aux groups, ``merged`` every declared group, and
``dual`` adds to merged a derived ``control-copy`` group duplicating every base
conv/linear (plus the elementwise sum of the two branches).
"""
from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path

ROLES = ("base", "aux", "extra")
CONVENTIONS = ("module", "analytic")
MODES = ("base", "dual", "merged")
COPY_GROUP = "control-copy"
WEIGHTED = ("conv", "linear")
OPS = ("conv", "linear", "attention", "norm", "act", "glu", "add", "params", "concat", "up", "tokens", "map")
FREE = ("concat", "up", "tokens", "map")

Shape = tuple  # ("map", C, H, W) | ("tokens", T, D)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GroupInfo:
    role: str = "base"
    step: bool = True


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    group: str | None = None
    inputs: tuple[str, ...] = ()
    attrs: tuple[tuple[str, int], ...] = ()

    def attr(self, key: str, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        if default is None:
            raise SpecError(f"{self.kind} {self.name!r} is missing {key}=")
        return default


@dataclass(frozen=True)
class LayerDesc:
    """A layer with its input and output shapes resolved."""

    layer: Layer
    in_shapes: tuple[Shape, ...]
    out_shape: Shape


@dataclass
class ArchSpec:
    name: str
    groups: dict[str, GroupInfo]
    layers: list[Layer]
    inputs: dict[str, Shape]
    notes: list[str] = field(default_factory=list)

    def resolve(self) -> list[LayerDesc]:
        """Shape-check every layer against its sources; returns resolved descriptors."""
        shapes = dict(self.inputs)
        out = []
        for layer in self.layers:
            if layer.group is not None and layer.group not in self.groups:
                raise SpecError(f"layer {layer.name!r} uses undeclared group {layer.group!r}")
            if layer.name in shapes:
                raise SpecError(f"tensor {layer.name!r} defined twice")
            missing = [s for s in layer.inputs if s not in shapes]
            if missing:
                raise SpecError(f"layer {layer.name!r} reads undefined tensor(s) {missing}")
            ins = tuple(shapes[s] for s in layer.inputs)
            shape = _out_shape(layer, ins)
            shapes[layer.name] = shape
            out.append(LayerDesc(layer, ins, shape))
        return out

    def validate(self) -> None:
        self.resolve()


def _numel(shape: Shape) -> int:
    return math.prod(shape[1:])


def _width(shape: Shape) -> int:
    return shape[1] if shape[0] == "map" else shape[2]


def _tokens(shape: Shape) -> int:
    return shape[2] * shape[3] if shape[0] == "map" else shape[1]


def _out_shape(layer: Layer, ins: tuple[Shape, ...]) -> Shape:
    k, a = layer.kind, layer.attr
    need = {"add": 2, "concat": 2, "params": 0}.get(k, 1 if k != "attention" else 3)
    if len(ins) != need:
        raise SpecError(f"{k} {layer.name!r} takes {need} input(s), got {len(ins)}")
    if k == "conv":
        (s,) = ins
        if s[0] != "map":
            raise SpecError(f"conv {layer.name!r} needs a map input, got {s}")
        stride = a("s", 1)
        a("out"), a("k")
        return ("map", a("out"), -(-s[2] // stride), -(-s[3] // stride))
    if k == "linear":
        (s,) = ins
        if s[0] == "map":
            return ("map", a("out"), s[2], s[3])
        return ("tokens", s[1], a("out"))
    if k == "attention":
        q, kk, v = ins
        if any(x[0] != "tokens" for x in ins):
            raise SpecError(f"attention {layer.name!r} needs token inputs")
        if q[2] != kk[2] or kk[1] != v[1]:
            raise SpecError(f"attention {layer.name!r}: q {q}, k {kk}, v {v} are incompatible")
        if q[2] % a("heads"):
            raise SpecError(f"attention {layer.name!r}: width {q[2]} not divisible by heads")
        return ("tokens", q[1], v[2])
    if k in ("norm", "act"):
        return ins[0]
    if k == "glu":
        s = ins[0]
        if _width(s) % 2:
            raise SpecError(f"glu {layer.name!r} needs an even width")
        return ("tokens", s[1], s[2] // 2) if s[0] == "tokens" else ("map", s[1] // 2, s[2], s[3])
    if k == "add":
        x, y = ins
        if x == y or (x[0] == "map" and y == ("tokens", 1, x[1])):
            return x
        raise SpecError(f"add {layer.name!r}: shapes {x} and {y} do not match")
    if k == "params":
        a("n")
        return ("tokens", 0, 0)
    if k == "concat":
        x, y = ins
        if x[0] != "map" or y[0] != "map" or x[2:] != y[2:]:
            raise SpecError(f"concat {layer.name!r}: shapes {x} and {y} cannot be stacked")
        return ("map", x[1] + y[1], x[2], x[3])
    if k == "up":
        s = ins[0]
        f = a("factor")
        return ("map", s[1], s[2] * f, s[3] * f)
    if k == "tokens":
        s = ins[0]
        if s[0] != "map":
            raise SpecError(f"tokens {layer.name!r} needs a map input")
        return ("tokens", s[2] * s[3], s[1])
    if k == "map":
        s = ins[0]
        h, w = a("h"), a("w")
        if s[0] != "tokens" or h * w != s[1]:
            raise SpecError(f"map {layer.name!r}: {s} cannot be viewed as {h}x{w}")
        return ("map", s[2], h, w)
    raise SpecError(f"unknown layer kind {k!r}")


@dataclass
class GroupCost:
    flops: int = 0
    macs: int = 0
    params: int = 0

    def __iadd__(self, other: "GroupCost") -> "GroupCost":
        self.flops += other.flops
        self.macs += other.macs
        self.params += other.params
        return self


@dataclass
class CostReport:
    groups: dict[str, GroupCost] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(g.flops for g in self.groups.values())

    @property
    def macs(self) -> int:
        return sum(g.macs for g in self.groups.values())

    @property
    def params(self) -> int:
        return sum(g.params for g in self.groups.values())

    def add(self, group: str, cost: GroupCost) -> None:
        self.groups.setdefault(group, GroupCost())
        self.groups[group] += cost

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "macs": self.macs,
            "params": self.params,
            "groups": {k: vars(v).copy() for k, v in self.groups.items()},
            "notes": list(self.notes),
        }


def layer_cost(desc: LayerDesc) -> GroupCost:
    layer, a = desc.layer, desc.layer.attr
    k = layer.kind
    if k == "conv":
        (s,) = desc.in_shapes
        o = desc.out_shape
        kk = a("k")
        macs = s[1] * o[1] * kk * kk * o[2] * o[3]
        params = s[1] * o[1] * kk * kk + (o[1] if a("bias", 1) else 0)
        return GroupCost(2 * macs, macs, params)
    if k == "linear":
        (s,) = desc.in_shapes
        d_in, d_out = _width(s), _width(desc.out_shape)
        macs = _tokens(s) * d_in * d_out
        params = 0 if a("shared", 0) else d_in * d_out + (d_out if a("bias", 1) else 0)
        return GroupCost(2 * macs, macs, params)
    if k == "attention":
        q, kk, v = desc.in_shapes
        macs = q[1] * kk[1] * q[2] + q[1] * kk[1] * v[2]
        return GroupCost(2 * macs + a("heads") * q[1] * kk[1], macs, 0)
    if k == "norm":
        s = desc.in_shapes[0]
        return GroupCost(_numel(s), 0, 2 * _width(s) if a("affine", 1) else 0)
    if k in ("act", "add", "glu"):
        return GroupCost(_numel(desc.out_shape) * (2 if k == "glu" else 1), 0, 0)
    if k == "params":
        return GroupCost(0, 0, a("n"))
    return GroupCost()


def _convention_cost(desc: LayerDesc, convention: str) -> GroupCost:
    cost = layer_cost(desc)
    if convention == "module" and desc.layer.kind not in WEIGHTED:
        return GroupCost(0, 0, cost.params)
    return cost


def count_layer(desc: LayerDesc, convention: str = "analytic") -> CostReport:
    """Cost of one resolved layer, attributed to its group."""
    if desc.layer.kind not in OPS:
        raise SpecError(f"unknown layer kind {desc.layer.kind!r}")
    if convention not in CONVENTIONS:
        raise SpecError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    rep = CostReport()
    rep.add(desc.layer.group or "-", _convention_cost(desc, convention))
    return rep


def count_model(spec: ArchSpec, mode: str = "base", convention: str = "module") -> CostReport:
    """Per-step (batch 1) cost of the spec under ``mode``."""
    if mode not in MODES:
        raise SpecError(f"mode must be one of {MODES}, got {mode!r}")
    if convention not in CONVENTIONS:
        raise SpecError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    rep = CostReport(notes=list(spec.notes) + [f"counting convention: {convention}"])
    for g in spec.groups:
        if mode != "base" or spec.groups[g].role != "extra":
            rep.groups[g] = GroupCost()
    for desc in spec.resolve():
        g = desc.layer.group
        if g is None:
            continue
        info = spec.groups[g]
        if mode == "base" and info.role == "extra":
            continue
        cost = _convention_cost(desc, convention)
        if not info.step:
            cost = GroupCost(0, 0, cost.params)
        rep.add(g, cost)
        if mode == "dual" and info.role == "base" and desc.layer.kind in WEIGHTED and not desc.layer.attr("shared", 0):
            branch_sum = _numel(desc.out_shape) if info.step and convention == "analytic" else 0
            copy = GroupCost(cost.flops + branch_sum, cost.macs, cost.params)
            rep.add(COPY_GROUP, copy)
    return rep


def overhead_report(base: CostReport, other: CostReport) -> dict:
    """Relative deltas ``(other - base) / base`` overall and per group."""

    def rel(x, y):
        return 0.0 if x == y else math.inf if x == 0 else (y - x) / x

    out = {m: rel(getattr(base, m), getattr(other, m)) for m in ("flops", "macs", "params")}
    groups = {}
    for g in sorted(set(base.groups) | set(other.groups)):
        b, o = base.groups.get(g, GroupCost()), other.groups.get(g, GroupCost())
        groups[g] = {m: rel(getattr(b, m), getattr(o, m)) for m in ("flops", "macs", "params")}
    out["groups"] = groups
    return out


def _kv(tokens: list[str], line_no: int) -> tuple[dict[str, str], list[str]]:
    kv, rest = {}, []
    for t in tokens:
        if "=" in t:
            key, val = t.split("=", 1)
            kv[key] = val
        else:
            rest.append(t)
    return kv, rest


def _int(val: str, key: str, line_no: int) -> int:
    try:
        return int(val)
    except ValueError:
        raise SpecError(f"line {line_no}: {key}= expects an integer, got {val!r}") from None


def parse_spec(text: str) -> ArchSpec:
    name, groups, layers, inputs, notes = "spec", {}, [], {}, []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("note "):
            notes.append(line[5:].strip())
            continue
        parts = shlex.split(line)
        head, args = parts[0], parts[1:]
        kv, pos = _kv(args, no)
        if head == "spec":
            name = args[0]
        elif head == "group":
            role = kv.get("role", "base")
            if role not in ROLES or len(pos) != 1:
                raise SpecError(f"line {no}: bad group declaration {line!r}")
            groups[pos[0]] = GroupInfo(role, kv.get("step", "1") != "0")
        elif head == "input":
            if len(pos) < 2 or pos[1] not in ("map", "tokens"):
                raise SpecError(f"line {no}: bad input declaration {line!r}")
            dims = tuple(_int(d, "dim", no) for d in pos[2:])
            if len(dims) != (3 if pos[1] == "map" else 2):
                raise SpecError(f"line {no}: wrong number of dims for {pos[1]}")
            inputs[pos[0]] = (pos[1], *dims)
        elif head in OPS:
            grouped = head not in FREE
            want = 2 if grouped else 1
            if len(pos) != want:
                raise SpecError(f"line {no}: {head} expects {'GROUP NAME' if grouped else 'NAME'}, got {pos}")
            group, lname = (pos[0], pos[1]) if grouped else (None, pos[0])
            if head == "attention":
                srcs = tuple(kv.pop(x, "") for x in ("q", "k", "v"))
            else:
                srcs = tuple(s for s in kv.pop("in", "").split(",") if s)
            if any(not s for s in srcs):
                raise SpecError(f"line {no}: {head} {lname!r} is missing a source")
            attrs = tuple((key, _int(v, key, no)) for key, v in kv.items())
            layers.append(Layer(head, lname, group, srcs, attrs))
        else:
            raise SpecError(f"line {no}: unknown statement {head!r}")
    spec = ArchSpec(name, groups, layers, inputs, notes)
    spec.validate()
    return spec


def dump_spec(spec: ArchSpec) -> str:
    out = [f"spec {spec.name}"]
    out += [f"note {n}" for n in spec.notes]
    for g, info in spec.groups.items():
        out.append(f"group {g} role={info.role}" + ("" if info.step else " step=0"))
    for n, s in spec.inputs.items():
        out.append(f"input {n} {s[0]} " + " ".join(str(d) for d in s[1:]))
    for l in spec.layers:
        head = [l.kind] + ([l.group] if l.group is not None else []) + [l.name]
        if l.kind == "attention":
            src = [f"{k}={s}" for k, s in zip("qkv", l.inputs)]
        elif l.inputs:
            src = ["in=" + ",".join(l.inputs)]
        else:
            src = []
        out.append(" ".join(head + src + [f"{k}={v}" for k, v in l.attrs]))
    return "\n".join(out) + "\n"


def load_spec(path) -> ArchSpec:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read spec file {path}: {e.strerror}") from e
    return parse_spec(text)


def bundled_spec_path(name: str) -> Path:
    """Path of a spec shipped with the package (``sd15``, ``sd15_controlnet``, ``toy``)."""
    name = name if name.endswith(".spec") else f"{name}.spec"
    return Path(__file__).parent / "data" / name


def _fmt(n: int, unit: str) -> str:
    for scale, suffix in ((1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")):
        if n >= scale:
            return f"{n / scale:.3f} {suffix}{unit}"
    return f"{n} {unit}"


def format_report(rep: CostReport, title: str = "") -> str:
    rows = [title] if title else []
    rows.append(f"{'group':<16}{'FLOPs':>16}{'MACs':>16}{'params':>16}")
    for g, c in rep.groups.items():
        rows.append(f"{g:<16}{_fmt(c.flops, ''):>16}{_fmt(c.macs, ''):>16}{_fmt(c.params, ''):>16}")
    rows.append(f"{'total':<16}{_fmt(rep.flops, ''):>16}{_fmt(rep.macs, ''):>16}{_fmt(rep.params, ''):>16}")
    rows += [f"note: {n}" for n in rep.notes]
    return "\n".join(rows)
