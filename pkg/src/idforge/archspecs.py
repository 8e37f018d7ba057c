"""Builders for the architecture specs counted by :mod:`idforge.profiler`.

``sd15_spec`` describes a Stable-Diffusion-1.5-shaped denoiser (64x64x4 latent,
77 text tokens, channel plan 320/640/1280/1280, 8 heads) together with its
text encoder and autoencoder as parameter-only groups, plus the condition
adapter and identity attention as ``extra`` groups. ``controlnet_spec`` adds a
ControlNet-style encoder copy instead. ``toy_spec`` mirrors :class:`ToyDenoiser`.
"""
from __future__ import annotations

from .profiler import ArchSpec, GroupInfo, Layer

SD_NOTES = (
    "per denoiser step, batch 1, 64x64x4 latent (512x512 image), 77 text tokens",
    "text encoder and autoencoder run once per image: parameters counted, compute not",
    "1 MAC = 2 FLOPs for conv/linear; under the analytic convention also the attention core, and norms, activations, softmax and adds at 1 FLOP per element",
)


class SpecBuilder:
    def __init__(self, name: str):
        self.name = name
        self.groups: dict[str, GroupInfo] = {}
        self.layers: list[Layer] = []
        self.inputs: dict = {}
        self.notes: list[str] = []

    def group(self, name: str, role: str = "base", step: bool = True) -> None:
        self.groups[name] = GroupInfo(role, step)

    def input(self, name: str, *shape) -> str:
        self.inputs[name] = tuple(shape)
        return name

    def _add(self, kind, group, name, inputs, **attrs) -> str:
        self.layers.append(Layer(kind, name, group, tuple(inputs), tuple(attrs.items())))
        return name

    def conv(self, g, name, src, out, k, s=1, bias=True):
        extra = {} if bias else {"bias": 0}
        return self._add("conv", g, name, [src], out=out, k=k, **({"s": s} if s != 1 else {}), **extra)

    def linear(self, g, name, src, out, bias=True, shared=False):
        extra = ({} if bias else {"bias": 0}) | ({"shared": 1} if shared else {})
        return self._add("linear", g, name, [src], out=out, **extra)

    def attention(self, g, name, q, k, v, heads):
        return self._add("attention", g, name, [q, k, v], heads=heads)

    def norm(self, g, name, src, affine=True):
        return self._add("norm", g, name, [src], **({} if affine else {"affine": 0}))

    def act(self, g, name, src):
        return self._add("act", g, name, [src])

    def glu(self, g, name, src):
        return self._add("glu", g, name, [src])

    def add(self, g, name, a, b):
        return self._add("add", g, name, [a, b])

    def params(self, g, name, n):
        return self._add("params", g, name, [], n=n)

    def concat(self, name, a, b):
        return self._add("concat", None, name, [a, b])

    def up(self, name, src, factor=2):
        return self._add("up", None, name, [src], factor=factor)

    def tokens(self, name, src):
        return self._add("tokens", None, name, [src])

    def map(self, name, src, h, w):
        return self._add("map", None, name, [src], h=h, w=w)

    def build(self) -> ArchSpec:
        spec = ArchSpec(self.name, dict(self.groups), list(self.layers), dict(self.inputs), list(self.notes))
        spec.validate()
        return spec


def _resblock(b: SpecBuilder, g, p, x, cin, cout, temb):
    h = b.norm(g, f"{p}.norm1", x)
    h = b.act(g, f"{p}.act1", h)
    h = b.conv(g, f"{p}.conv1", h, cout, 3)
    if temb is not None:
        e = b.act(g, f"{p}.temb_act", temb)
        e = b.linear(g, f"{p}.time_emb_proj", e, cout)
        h = b.add(g, f"{p}.temb_add", h, e)
    h = b.norm(g, f"{p}.norm2", h)
    h = b.act(g, f"{p}.act2", h)
    h = b.conv(g, f"{p}.conv2", h, cout, 3)
    skip = x if cin == cout else b.conv(g, f"{p}.conv_shortcut", x, cout, 1)
    return b.add(g, f"{p}.out", skip, h)


def _cross_attn(b, g, p, x_norm, ctx, c, heads, ids=None, id_group=None):
    q = b.linear(g, f"{p}.to_q", x_norm, c, bias=False)
    k = b.linear(g, f"{p}.to_k", ctx, c, bias=False)
    v = b.linear(g, f"{p}.to_v", ctx, c, bias=False)
    a = b.attention(g, f"{p}.attn", q, k, v, heads)
    if ids is not None:
        # identity tokens reuse the text key/value projections
        ki = b.linear(id_group, f"{p}.id_k", ids, c, bias=False, shared=True)
        vi = b.linear(id_group, f"{p}.id_v", ids, c, bias=False, shared=True)
        ai = b.attention(id_group, f"{p}.id_attn", q, ki, vi, heads)
        a = b.add(id_group, f"{p}.id_sum", a, ai)
    return b.linear(g, f"{p}.to_out", a, c)


def _transformer(b: SpecBuilder, g, p, x, c, hw, ctx, heads=8, ids=None, id_group=None):
    h = b.norm(g, f"{p}.norm", x)
    h = b.conv(g, f"{p}.proj_in", h, c, 1)
    t = b.tokens(f"{p}.seq", h)
    n1 = b.norm(g, f"{p}.norm1", t)
    q = b.linear(g, f"{p}.attn1.to_q", n1, c, bias=False)
    k = b.linear(g, f"{p}.attn1.to_k", n1, c, bias=False)
    v = b.linear(g, f"{p}.attn1.to_v", n1, c, bias=False)
    a = b.attention(g, f"{p}.attn1", q, k, v, heads)
    a = b.linear(g, f"{p}.attn1.to_out", a, c)
    t = b.add(g, f"{p}.res1", t, a)
    n2 = b.norm(g, f"{p}.norm2", t)
    a = _cross_attn(b, g, f"{p}.attn2", n2, ctx, c, heads, ids, id_group)
    t = b.add(g, f"{p}.res2", t, a)
    n3 = b.norm(g, f"{p}.norm3", t)
    f = b.linear(g, f"{p}.ff.proj", n3, 8 * c)
    f = b.glu(g, f"{p}.ff.geglu", f)
    f = b.linear(g, f"{p}.ff.out", f, c)
    t = b.add(g, f"{p}.res3", t, f)
    h = b.map(f"{p}.grid", t, *hw)
    h = b.conv(g, f"{p}.proj_out", h, c, 1)
    return b.add(g, f"{p}.out", x, h)


CHANNELS = (320, 640, 1280, 1280)
ATTN = (True, True, True, False)


def _time_embedding(b, g, p, src):
    t = b.linear(g, f"{p}.linear_1", src, 1280)
    t = b.act(g, f"{p}.act", t)
    return b.linear(g, f"{p}.linear_2", t, 1280)


def _unet_encoder(b, g, p, x, temb, ctx, res, ids=None, id_group=None):
    """Down path and mid block; returns (mid output, skip tensors with channels)."""
    h = b.conv(g, f"{p}conv_in", x, 320, 3)
    skips = [(h, 320)]
    cin = 320
    for i, (c, attn) in enumerate(zip(CHANNELS, ATTN)):
        r = res // 2**i
        for j in range(2):
            h = _resblock(b, g, f"{p}down{i}.res{j}", h, cin, c, temb)
            cin = c
            if attn:
                h = _transformer(b, g, f"{p}down{i}.attn{j}", h, c, (r, r), ctx, ids=ids, id_group=id_group)
            skips.append((h, c))
        if i < 3:
            h = b.conv(g, f"{p}down{i}.downsample", h, c, 3, s=2)
            skips.append((h, c))
    r = res // 8
    h = _resblock(b, g, f"{p}mid.res0", h, 1280, 1280, temb)
    h = _transformer(b, g, f"{p}mid.attn", h, 1280, (r, r), ctx, ids=ids, id_group=id_group)
    h = _resblock(b, g, f"{p}mid.res1", h, 1280, 1280, temb)
    return h, skips


def _sd_inputs(b: SpecBuilder, latent: int) -> tuple[str, str, str]:
    return (
        b.input("latent", "map", 4, latent, latent),
        b.input("text", "tokens", 77, 768),
        b.input("t_sin", "tokens", 1, 320),
    )


def _id_projection(b: SpecBuilder, tokens: int, dim: int) -> str:
    """Identity tokens -> linear map plus a learned per-slot embedding."""
    raw = b.input("face_tokens", "tokens", tokens, dim)
    slots = b.input("id_slots", "tokens", tokens, dim)
    b.params("id-attention", "id_proj.pos", tokens * dim)
    h = b.linear("id-attention", "id_proj.linear", raw, dim)
    return b.add("id-attention", "id_proj", h, slots)


def _unet(b: SpecBuilder, x, ctx, tsin, g="unet", with_ids=False, controls=None, latent=64):
    ids = None
    if with_ids:
        ids = _id_projection(b, 4, 768)
    if "adapter" in b.groups:
        x = b.add("adapter", "latent_in", x, _adapter(b, latent))
    temb = _time_embedding(b, g, "time_embedding", tsin)
    id_group = "id-attention" if with_ids else None
    h, skips = _unet_encoder(b, g, "", x, temb, ctx, latent, ids, id_group)
    if controls is not None:
        mid_ctrl, skip_ctrl = controls
        h = b.add("controlnet", "mid.control_add", h, mid_ctrl)
        skips = [(b.add("controlnet", f"skip{i}.control_add", s, cs), c) for i, ((s, c), cs) in enumerate(zip(skips, skip_ctrl))]
    cin = 1280
    for i, c in enumerate(reversed(CHANNELS)):
        r = latent // 2 ** (3 - i)
        attn = ATTN[3 - i]
        for j in range(3):
            s, sc = skips.pop()
            h = b.concat(f"up{i}.cat{j}", h, s)
            h = _resblock(b, g, f"up{i}.res{j}", h, cin + sc, c, temb)
            cin = c
            if attn:
                h = _transformer(b, g, f"up{i}.attn{j}", h, c, (r, r), ctx, ids=ids, id_group=id_group)
        if i < 3:
            h = b.up(f"up{i}.nearest", h)
            h = b.conv(g, f"up{i}.upsample", h, c, 3)
    h = b.norm(g, "conv_norm_out", h)
    h = b.act(g, "conv_act", h)
    return b.conv(g, "conv_out", h, 4, 3)


def _clip_text(b: SpecBuilder, g="text-encoder", vocab=49408, n=77, d=768, layers=12):
    b.params(g, "token_embedding", vocab * d)
    b.params(g, "position_embedding", n * d)
    x = b.input("text_ids_embedded", "tokens", n, d)
    for i in range(layers):
        p = f"clip.layer{i}"
        h = b.norm(g, f"{p}.ln1", x)
        q = b.linear(g, f"{p}.q", h, d)
        k = b.linear(g, f"{p}.k", h, d)
        v = b.linear(g, f"{p}.v", h, d)
        a = b.attention(g, f"{p}.attn", q, k, v, 12)
        a = b.linear(g, f"{p}.out", a, d)
        x = b.add(g, f"{p}.res1", x, a)
        h = b.norm(g, f"{p}.ln2", x)
        h = b.linear(g, f"{p}.fc1", h, 4 * d)
        h = b.act(g, f"{p}.gelu", h)
        h = b.linear(g, f"{p}.fc2", h, d)
        x = b.add(g, f"{p}.res2", x, h)
    return b.norm(g, "clip.final_ln", x)


def _vae_attn(b, g, p, x, c, r):
    h = b.norm(g, f"{p}.norm", x)
    t = b.tokens(f"{p}.seq", h)
    q = b.linear(g, f"{p}.q", t, c)
    k = b.linear(g, f"{p}.k", t, c)
    v = b.linear(g, f"{p}.v", t, c)
    a = b.attention(g, f"{p}.attn", q, k, v, 1)
    a = b.linear(g, f"{p}.proj", a, c)
    return b.add(g, f"{p}.out", x, b.map(f"{p}.grid", a, r, r))


def _vae(b: SpecBuilder, g="vae", image=512):
    chans = (128, 256, 512, 512)
    x = b.input("image", "map", 3, image, image)
    h = b.conv(g, "enc.conv_in", x, 128, 3)
    cin, r = 128, image
    for i, c in enumerate(chans):
        for j in range(2):
            h = _resblock(b, g, f"enc.down{i}.res{j}", h, cin, c, None)
            cin = c
        if i < 3:
            h = b.conv(g, f"enc.down{i}.downsample", h, c, 3, s=2)
            r //= 2
    h = _resblock(b, g, "enc.mid.res0", h, 512, 512, None)
    h = _vae_attn(b, g, "enc.mid.attn", h, 512, r)
    h = _resblock(b, g, "enc.mid.res1", h, 512, 512, None)
    h = b.norm(g, "enc.norm_out", h)
    h = b.act(g, "enc.act_out", h)
    h = b.conv(g, "enc.conv_out", h, 8, 3)
    b.conv(g, "quant_conv", h, 8, 1)
    z = b.input("vae_latent", "map", 4, r, r)
    h = b.conv(g, "post_quant_conv", z, 4, 1)
    h = b.conv(g, "dec.conv_in", h, 512, 3)
    h = _resblock(b, g, "dec.mid.res0", h, 512, 512, None)
    h = _vae_attn(b, g, "dec.mid.attn", h, 512, r)
    h = _resblock(b, g, "dec.mid.res1", h, 512, 512, None)
    cin = 512
    for i, c in enumerate(reversed(chans)):
        for j in range(3):
            h = _resblock(b, g, f"dec.up{i}.res{j}", h, cin, c, None)
            cin = c
        if i < 3:
            h = b.up(f"dec.up{i}.nearest", h)
            h = b.conv(g, f"dec.up{i}.upsample", h, c, 3)
    h = b.norm(g, "dec.norm_out", h)
    h = b.act(g, "dec.act_out", h)
    return b.conv(g, "dec.conv_out", h, 3, 3)


def _adapter(b: SpecBuilder, latent: int, g="adapter", cond_channels=3):
    """Strided conv stack from the condition image to a 4-channel latent-sized map."""
    x = b.input("condition", "map", cond_channels, latent * 8, latent * 8)
    h = b.conv(g, "adapter.conv0", x, 32, 3)
    h = b.act(g, "adapter.act0", h)
    for i, c in enumerate((64, 128, 256), 1):
        h = b.conv(g, f"adapter.conv{i}", h, c, 3, s=2)
        h = b.act(g, f"adapter.act{i}", h)
    return b.conv(g, "adapter.out", h, 4, 3)


def _controlnet(b: SpecBuilder, x, ctx, tsin, latent: int, g="controlnet"):
    """Trainable encoder copy, hint block and zero convs; returns (mid, skips) residuals."""
    hint = b.input("hint", "map", 3, latent * 8, latent * 8)
    h = hint
    for i, (c, s) in enumerate(((16, 1), (16, 1), (32, 2), (32, 1), (96, 2), (96, 1), (256, 2))):
        h = b.conv(g, f"cn.hint{i}", h, c, 3, s=s)
        h = b.act(g, f"cn.hint_act{i}", h)
    h = b.conv(g, "cn.hint_out", h, 320, 3)
    temb = _time_embedding(b, g, "cn.time_embedding", tsin)
    first = b.conv(g, "cn.conv_in", x, 320, 3)
    first = b.add(g, "cn.hint_add", first, h)
    # the encoder copy starting after conv_in
    skips = [(first, 320)]
    cin, hcur = 320, first
    for i, (c, attn) in enumerate(zip(CHANNELS, ATTN)):
        r = latent // 2**i
        for j in range(2):
            hcur = _resblock(b, g, f"cn.down{i}.res{j}", hcur, cin, c, temb)
            cin = c
            if attn:
                hcur = _transformer(b, g, f"cn.down{i}.attn{j}", hcur, c, (r, r), ctx)
            skips.append((hcur, c))
        if i < 3:
            hcur = b.conv(g, f"cn.down{i}.downsample", hcur, c, 3, s=2)
            skips.append((hcur, c))
    r = latent // 8
    hcur = _resblock(b, g, "cn.mid.res0", hcur, 1280, 1280, temb)
    hcur = _transformer(b, g, "cn.mid.attn", hcur, 1280, (r, r), ctx)
    hcur = _resblock(b, g, "cn.mid.res1", hcur, 1280, 1280, temb)
    outs = [b.conv(g, f"cn.zero{i}", s, c, 1) for i, (s, c) in enumerate(skips)]
    mid = b.conv(g, "cn.zero_mid", hcur, 1280, 1)
    return mid, outs


def sd15_spec(latent: int = 64) -> ArchSpec:
    """SD1.5-shaped denoiser with adapter and identity attention as extra groups."""
    b = SpecBuilder("sd15")
    b.notes += SD_NOTES
    b.group("unet", "base")
    b.group("text-encoder", "aux", step=False)
    b.group("vae", "aux", step=False)
    b.group("adapter", "extra")
    b.group("id-attention", "extra")
    _unet(b, *_sd_inputs(b, latent), with_ids=True, latent=latent)
    _clip_text(b)
    _vae(b, image=latent * 8)
    return b.build()


def controlnet_spec(latent: int = 64) -> ArchSpec:
    """SD1.5-shaped denoiser plus a ControlNet-style encoder copy (extra group)."""
    b = SpecBuilder("sd15_controlnet")
    b.notes += SD_NOTES
    b.group("unet", "base")
    b.group("text-encoder", "aux", step=False)
    b.group("vae", "aux", step=False)
    b.group("controlnet", "extra")
    inputs = _sd_inputs(b, latent)
    controls = _controlnet(b, *inputs, latent)
    _unet(b, *inputs, controls=controls, latent=latent)
    _clip_text(b)
    _vae(b, image=latent * 8)
    return b.build()


def toy_spec(cfg=None, text_tokens: int = 8, id_tokens: int = 4, with_extras: bool = True) -> ArchSpec:
    """Spec mirroring :class:`idforge.denoiser.ToyDenoiser` layer for layer."""
    from .denoiser import ModelConfig

    cfg = cfg or ModelConfig()
    b = SpecBuilder("toy")
    b.notes.append(f"toy denoiser, {cfg.latent_size}x{cfg.latent_size}x{cfg.latent_channels} latent, batch 1")
    b.group("base", "base")
    if with_extras:
        b.group("adapter", "extra")
        b.group("id-attention", "extra")
    L, D = cfg.latent_size, cfg.context_dim
    w0, w1, w2 = cfg.widths
    x = b.input("latent", "map", cfg.latent_channels, L, L)
    ctx = b.input("text", "tokens", text_tokens, D)
    tsin = b.input("t_sin", "tokens", 1, w0)
    ids = None
    if with_extras:
        cond = b.input("condition", "map", cfg.cond_channels, L * cfg.factor, L * cfg.factor)
        h = cond
        widths = [cfg.cond_channels, 16, 32][: 3]
        for i, c in enumerate(widths[1:]):
            h = b.conv("adapter", f"adapter.net.{2 * i}", h, c, 3, s=2)
            h = b.act("adapter", f"adapter.act{i}", h)
        h = b.conv("adapter", "adapter.net.4", h, cfg.latent_channels, 3, s=2)
        x = b.add("adapter", "adapter.inject", x, h)
        ids = _id_projection(b, id_tokens, D)
    t = b.linear("base", "time_embed.linear_1", tsin, cfg.time_dim)
    t = b.act("base", "time_embed.act", t)
    temb = b.linear("base", "time_embed.linear_2", t, cfg.time_dim)
    attn0, attn1 = cfg.attn_levels()
    id_group = "id-attention" if with_extras else None

    def res(p, h, cin, cout):
        return _toy_res(b, p, h, cin, cout, temb)

    def attn(p, h, c, r):
        return _toy_attn(b, p, h, c, r, ctx, ids, id_group, cfg.heads)

    h = b.conv("base", "conv_in", x, w0, 3)
    h = res("down0_res", h, w0, w0)
    if attn0:
        h = attn("down0_attn", h, w0, L)
    skip0 = h
    h = b.conv("base", "down0_ds", h, w0, 3, s=2)
    h = res("down1_res", h, w0, w1)
    if attn1:
        h = attn("down1_attn", h, w1, L // 2)
    skip1 = h
    h = b.conv("base", "down1_ds", h, w1, 3, s=2)
    h = res("mid_res1", h, w1, w2)
    h = res("mid_res2", h, w2, w2)
    h = b.up("up1_nearest", h)
    h = b.conv("base", "up1_us", h, w2, 3)
    h = res("up1_res", b.concat("up1_cat", h, skip1), w2 + w1, w1)
    if attn1:
        h = attn("up1_attn", h, w1, L // 2)
    h = b.up("up0_nearest", h)
    h = b.conv("base", "up0_us", h, w1, 3)
    h = res("up0_res", b.concat("up0_cat", h, skip0), w1 + w0, w0)
    if attn0:
        h = attn("up0_attn", h, w0, L)
    h = b.norm("base", "out_norm", h)
    h = b.act("base", "out_act", h)
    b.conv("base", "conv_out", h, cfg.latent_channels, 3)
    return b.build()


def _toy_res(b, p, x, cin, cout, temb):
    g = "base"
    h = b.norm(g, f"{p}.norm1", x)
    h = b.act(g, f"{p}.act1", h)
    h = b.conv(g, f"{p}.conv1", h, cout, 3)
    e = b.act(g, f"{p}.temb_act", temb)
    e = b.linear(g, f"{p}.emb_proj", e, cout)
    h = b.add(g, f"{p}.temb_add", h, e)
    h = b.norm(g, f"{p}.norm2", h)
    h = b.act(g, f"{p}.act2", h)
    h = b.conv(g, f"{p}.conv2", h, cout, 3)
    skip = x if cin == cout else b.conv(g, f"{p}.skip", x, cout, 1)
    return b.add(g, f"{p}.out", skip, h)


def _toy_attn(b, p, x, c, r, ctx, ids, id_group, heads):
    g = "base"
    h = b.norm(g, f"{p}.norm", x)
    t = b.tokens(f"{p}.seq", h)
    t = b.linear(g, f"{p}.proj_in", t, c)
    s = b.norm(g, f"{p}.sa_norm", t)
    q = b.linear(g, f"{p}.self_attn.to_q", s, c)
    k = b.linear(g, f"{p}.self_attn.to_k", s, c)
    v = b.linear(g, f"{p}.self_attn.to_v", s, c)
    a = b.attention(g, f"{p}.self_attn.core", q, k, v, heads)
    a = b.linear(g, f"{p}.self_attn.to_out", a, c)
    t = b.add(g, f"{p}.res_sa", t, a)
    n = b.norm(g, f"{p}.ca_norm", t)
    q = b.linear(g, f"{p}.cross_attn.to_q", n, c)
    k = b.linear(g, f"{p}.cross_attn.to_k", ctx, c)
    v = b.linear(g, f"{p}.cross_attn.to_v", ctx, c)
    a = b.attention(g, f"{p}.cross_attn.core", q, k, v, heads)
    if ids is not None:
        ki = b.linear(id_group, f"{p}.cross_attn.id_k", ids, c, shared=True)
        vi = b.linear(id_group, f"{p}.cross_attn.id_v", ids, c, shared=True)
        ai = b.attention(id_group, f"{p}.cross_attn.id_core", q, ki, vi, heads)
        a = b.add(id_group, f"{p}.cross_attn.id_sum", a, ai)
    a = b.linear(g, f"{p}.cross_attn.to_out", a, c)
    t = b.add(g, f"{p}.res_ca", t, a)
    f = b.norm(g, f"{p}.ff_norm", t)
    f = b.linear(g, f"{p}.ff_1", f, 2 * c)
    f = b.act(g, f"{p}.ff_act", f)
    f = b.linear(g, f"{p}.ff_2", f, c)
    t = b.add(g, f"{p}.res_ff", t, f)
    t = b.linear(g, f"{p}.proj_out", t, c)
    return b.add(g, f"{p}.out", x, b.map(f"{p}.grid", t, r, r))
