import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from idforge.archspecs import controlnet_spec, sd15_spec, toy_spec
from idforge.denoiser import ToyDenoiser
from idforge.profiler import (
    SpecError,
    bundled_spec_path,
    count_layer,
    count_model,
    dump_spec,
    format_report,
    load_spec,
    overhead_report,
    parse_spec,
)
from idforge.repcontrol import build_dual_model, merge_model, random_conditions

HEADER = "spec t\ngroup g role=base\n"


def one_layer(body, inputs):
    spec = parse_spec(HEADER + inputs + body)
    return spec.resolve()[-1]


def test_conv_cost_oracle():
    d = one_layer("conv g c in=x out=8 k=3 s=2\n", "input x map 4 10 10\n")
    assert d.out_shape == ("map", 8, 5, 5)
    rep = count_layer(d)
    assert rep.macs == 4 * 8 * 9 * 25 and rep.flops == 2 * rep.macs and rep.params == 4 * 8 * 9 + 8
    nb = count_layer(one_layer("conv g c in=x out=8 k=1 bias=0\n", "input x map 4 10 10\n"))
    assert nb.params == 32 and nb.macs == 32 * 100


def test_linear_cost_oracle():
    d = one_layer("linear g l in=x out=6\n", "input x tokens 7 5\n")
    rep = count_layer(d)
    assert (rep.macs, rep.flops, rep.params) == (7 * 5 * 6, 2 * 7 * 5 * 6, 5 * 6 + 6)
    shared = count_layer(one_layer("linear g l in=x out=6 shared=1\n", "input x tokens 7 5\n"))
    assert shared.params == 0 and shared.macs == 210
    on_map = one_layer("linear g l in=x out=6\n", "input x map 5 3 4\n")
    assert count_layer(on_map).macs == 12 * 5 * 6


def test_attention_cost_oracle_and_conventions():
    d = one_layer("attention g a q=q k=k v=k heads=2\n", "input q tokens 10 8\ninput k tokens 6 8\n")
    rep = count_layer(d)
    assert rep.macs == 10 * 6 * 8 * 2 and rep.flops == 2 * rep.macs + 2 * 10 * 6 and rep.params == 0
    assert count_layer(d, "module").flops == 0


def test_elementwise_costs():
    inputs = "input x map 4 3 3\n"
    assert count_layer(one_layer("norm g n in=x\n", inputs)).to_dict()["flops"] == 36
    assert count_layer(one_layer("norm g n in=x\n", inputs)).params == 8
    assert count_layer(one_layer("norm g n in=x affine=0\n", inputs)).params == 0
    assert count_layer(one_layer("act g a in=x\n", inputs)).flops == 36
    glu = one_layer("glu g a in=x\n", inputs)
    assert glu.out_shape == ("map", 2, 3, 3) and count_layer(glu).flops == 36
    assert count_layer(one_layer("params g p n=123\n", inputs)).params == 123


def test_free_reshapes_cost_nothing():
    spec = parse_spec(
        HEADER
        + "input x map 4 2 3\ninput y map 2 2 3\nconcat c in=x,y\nup u in=c factor=2\ntokens t in=u\nmap m in=t h=4 w=6\n"
    )
    shapes = [d.out_shape for d in spec.resolve()]
    assert shapes == [("map", 6, 2, 3), ("map", 6, 4, 6), ("tokens", 24, 6), ("map", 6, 4, 6)]
    assert count_model(spec, convention="analytic").flops == 0


@pytest.mark.parametrize(
    "text,match",
    [
        ("conv g c in=nope out=4 k=3\n", "undefined"),
        ("conv h c in=x out=4 k=3\n", "undeclared group"),
        ("conv g c in=x out=4\n", "missing k"),
        ("conv g c in=x out=4 k=three\n", "integer"),
        ("linear g x in=x out=4\n", "defined twice"),
        ("frob g c in=x\n", "unknown statement"),
        ("add g a in=x,y\n", "do not match"),
        ("attention g a q=x k=x v=x heads=1\n", "token inputs"),
        ("map m in=x h=2 w=2\n", "cannot be viewed"),
        ("group z role=weird\n", "bad group"),
        ("input q vector 3\n", "bad input"),
    ],
)
def test_spec_errors(text, match):
    with pytest.raises(SpecError, match=match):
        parse_spec(HEADER + "input x map 4 8 8\ninput y map 3 8 8\n" + text)


def test_mode_and_convention_validation():
    spec = toy_spec()
    with pytest.raises(SpecError):
        count_model(spec, mode="fast")
    with pytest.raises(SpecError):
        count_model(spec, convention="guess")


def test_missing_spec_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_spec(tmp_path / "absent.spec")


def test_comments_and_notes_are_kept():
    spec = parse_spec("# header\nspec s\nnote batch 1 # trailing\ngroup g role=base\ninput x tokens 2 2\n")
    assert spec.notes == ["batch 1"] and spec.name == "s"
    assert "note: batch 1" in format_report(count_model(spec))


@pytest.mark.parametrize("build", [sd15_spec, controlnet_spec, toy_spec])
def test_dump_parse_round_trip(build):
    spec = build()
    text = dump_spec(spec)
    again = parse_spec(text)
    assert dump_spec(again) == text
    for mode in ("base", "merged", "dual"):
        assert count_model(again, mode).to_dict() == count_model(spec, mode).to_dict()


@pytest.mark.parametrize("name,build", [("sd15", sd15_spec), ("sd15_controlnet", controlnet_spec), ("toy", toy_spec)])
def test_bundled_specs_match_builders(name, build):
    assert bundled_spec_path(name).read_text() == dump_spec(build())


def test_sd15_component_parameter_counts():
    groups = count_model(sd15_spec(), "merged").groups
    assert groups["unet"].params == 859_520_964
    assert groups["text-encoder"].params == 123_060_480
    assert groups["vae"].params == 83_653_863
    assert count_model(controlnet_spec(), "merged").groups["controlnet"].params == 361_279_120


def test_dual_mode_doubles_base_weighted_layers():
    spec = sd15_spec()
    merged, dual = count_model(spec, "merged"), count_model(spec, "dual")
    copy = dual.groups["control-copy"]
    assert copy.macs == merged.groups["unet"].macs
    assert dual.params - merged.params == copy.params


def test_overhead_report():
    base = count_model(sd15_spec(), "base")
    rep = overhead_report(base, count_model(sd15_spec(), "merged"))
    assert 0 < rep["flops"] < 0.03
    assert rep["groups"]["unet"]["flops"] == 0.0
    assert rep["groups"]["adapter"]["params"] == float("inf")


@pytest.mark.parametrize("kind", ["base", "merged"])
def test_toy_spec_matches_hook_measured_model(kind):
    torch.manual_seed(0)
    model = ToyDenoiser()
    if kind == "merged":
        model = merge_model(build_dual_model(model))
    macs = []

    def hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1] * mod.in_channels if isinstance(mod, nn.Conv2d) else mod.in_features
        macs.append(out.numel() * k)

    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            m.register_forward_hook(hook)
    z, t, c = random_conditions(model.cfg, torch.Generator().manual_seed(0))
    if kind == "base":
        c = c.with_ids(()).with_cond(None)
    with torch.no_grad():
        model.eps(z, t, c)
    rep = count_model(toy_spec(), kind, "module")
    assert rep.macs == sum(macs)
    assert rep.params == sum(p.numel() for p in model.parameters())


@given(c=st.integers(1, 8), o=st.integers(1, 8), k=st.sampled_from([1, 3, 5]), hw=st.integers(1, 12), s=st.sampled_from([1, 2]))
@settings(max_examples=40, deadline=None)
def test_conv_counts_agree_with_torch_conv(c, o, k, hw, s):
    d = one_layer(f"conv g c in=x out={o} k={k} s={s}\n", f"input x map {c} {hw} {hw}\n")
    out = nn.Conv2d(c, o, k, stride=s, padding=k // 2)(torch.zeros(1, c, hw, hw))
    assert d.out_shape[1:] == tuple(out.shape[1:])
    assert count_layer(d).params == sum(p.numel() for p in nn.Conv2d(c, o, k).parameters())
