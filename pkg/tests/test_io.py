import json
import struct
from dataclasses import dataclass

import pytest
import torch
from hypothesis import given, settings, strategies as st

from idforge import io as fio
from idforge.io import (
    Checkpoint,
    ConfigError,
    FormatError,
    decode_checkpoint,
    decode_pnm,
    dump_config,
    encode_checkpoint,
    encode_pnm,
    read_config,
)
from idforge.repcontrol import build_dual_model, merge_model, random_conditions


def test_decode_ascii_graymap_with_comments():
    img = decode_pnm(b"P2\n# made by hand\n3 2 # size\n4\n0 1 2\n3 4 0\n")
    assert torch.allclose(img, torch.tensor([[0, 0.25, 0.5], [0.75, 1, 0]]))


def test_decode_binary_pixmap_layout():
    data = b"P6 2 1 255\n" + bytes([255, 0, 0, 0, 0, 255])
    img = decode_pnm(data)
    assert img.shape == (3, 1, 2)
    assert img[:, 0, 0].tolist() == [1, 0, 0] and img[:, 0, 1].tolist() == [0, 0, 1]


def test_decode_sixteen_bit_big_endian():
    img = decode_pnm(b"P5\n1 1\n65535\n" + struct.pack(">H", 32768))
    assert float(img[0, 0]) == pytest.approx(32768 / 65535)


@given(
    h=st.integers(1, 5),
    w=st.integers(1, 5),
    color=st.booleans(),
    binary=st.booleans(),
    maxval=st.sampled_from([1, 15, 255, 1023, 65535]),
    seed=st.integers(0, 1000),
)
@settings(max_examples=60, deadline=None)
def test_pnm_round_trip_is_exact_on_quantized_values(h, w, color, binary, maxval, seed):
    g = torch.Generator().manual_seed(seed)
    shape = (3, h, w) if color else (h, w)
    img = torch.randint(0, maxval + 1, shape, generator=g).double() / maxval
    data = encode_pnm(img, binary, maxval)
    back = decode_pnm(data)
    assert torch.allclose(back.double(), img, atol=1e-6)
    assert encode_pnm(back, binary, maxval) == data


@pytest.mark.parametrize(
    "data",
    [b"P7\n1 1\n255\n\0", b"P5\n2 2\n255\n\0", b"P2\n2 1\n4\n9 0\n", b"P5\n0 1\n255\n", b"P2\n2 1\n", b"P3\nx 1\n255\n0 0 0\n"],
)
def test_malformed_pnm_raises(data):
    with pytest.raises(FormatError):
        decode_pnm(data)


def test_encode_rejects_bad_shapes():
    with pytest.raises(FormatError):
        encode_pnm(torch.zeros(2, 4, 4))
    with pytest.raises(FormatError):
        encode_pnm(torch.zeros(4, 4), maxval=0)


def test_read_mask_needs_graymap(tmp_path):
    fio.write_pnm(tmp_path / "m.ppm", torch.zeros(3, 2, 2))
    with pytest.raises(FormatError):
        fio.read_mask(tmp_path / "m.ppm")
    fio.write_pnm(tmp_path / "m.pgm", torch.ones(2, 2))
    assert torch.equal(fio.read_mask(tmp_path / "m.pgm"), torch.ones(2, 2))


def test_checkpoint_byte_layout():
    ck = Checkpoint({"b": torch.tensor([1.0, -2.0]), "a": torch.tensor([[0.5]])}, {"b": True}, {"k": 1})
    data = encode_checkpoint(ck)
    entries = [
        {"dtype": "float32", "name": "a", "nbytes": 4, "offset": 0, "shape": [1, 1], "trainable": False},
        {"dtype": "float32", "name": "b", "nbytes": 8, "offset": 4, "shape": [2], "trainable": True},
    ]
    manifest = json.dumps({"entries": entries, "meta": {"k": 1}}, sort_keys=True, separators=(",", ":")).encode()
    want = b"IDFGCKPT" + struct.pack("<IQ", 1, len(manifest)) + manifest + struct.pack("<fff", 0.5, 1.0, -2.0)
    assert data == want
    back = decode_checkpoint(data)
    assert torch.equal(back.tensors["b"], torch.tensor([1.0, -2.0])) and back.trainable == {"a": False, "b": True}


def test_checkpoint_is_deterministic_and_order_free():
    t = {"x": torch.randn(3, 4), "y": torch.randn(2)}
    a = encode_checkpoint(Checkpoint(t))
    b = encode_checkpoint(Checkpoint(dict(reversed(list(t.items())))))
    assert a == b == encode_checkpoint(decode_checkpoint(a))


@pytest.mark.parametrize("cut", [4, 30, -1])
def test_corrupt_checkpoint_raises(cut):
    data = encode_checkpoint(Checkpoint({"x": torch.ones(4)}))
    with pytest.raises(FormatError):
        decode_checkpoint(data[:cut])


def test_checkpoint_rejects_wrong_magic_and_version():
    data = encode_checkpoint(Checkpoint({"x": torch.ones(1)}))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTCKPT!" + data[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(data[:8] + struct.pack("<I", 2) + data[12:])


@pytest.mark.parametrize("kind", ["base", "dual", "merged"])
def test_model_checkpoint_round_trip(tiny_model, tmp_path, kind):
    model = tiny_model
    if kind != "base":
        model = build_dual_model(tiny_model)
    if kind == "merged":
        model = merge_model(model)
    path = tmp_path / "m.ckpt"
    fio.save_checkpoint(path, fio.model_checkpoint(model))
    back = fio.model_from_checkpoint(fio.load_checkpoint(path))
    assert getattr(back, "kind", "base") == kind
    assert {n for n, p in back.named_parameters() if p.requires_grad} == {
        n for n, p in model.named_parameters() if p.requires_grad
    }
    z, t, c = random_conditions(model.cfg, torch.Generator().manual_seed(0), n_ids=0 if kind == "base" else 1)
    if kind == "base":
        c = c.with_cond(None)
    with torch.no_grad():
        assert torch.equal(back.eps(z, t, c), model.eps(z, t, c))
    assert fio.encode_checkpoint(fio.model_checkpoint(back)) == path.read_bytes()


def test_checkpoint_kind_mismatch(tiny_model):
    ck = fio.model_checkpoint(tiny_model)
    ck.meta["kind"] = "dual"
    with pytest.raises(FormatError):
        fio.model_from_checkpoint(ck)


@dataclass
class Sec:
    n: int = 1
    lr: float = 0.1
    on: bool = False
    name: str = "x"
    sizes: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")


def test_config_parse_and_dump_round_trip():
    cfg = read_config("[a]\nn = 3\nlr = 1e-3\non = yes\nsizes = 4, 5 6\n", {"a": Sec, "b": Sec})
    assert cfg["a"] == Sec(3, 1e-3, True, "x", (4, 5, 6)) and cfg["b"] == Sec()
    assert read_config(dump_config(cfg), {"a": Sec, "b": Sec}) == cfg


def test_config_inline_comments():
    cfg = read_config("; header\n[a]\nn = 3  ; count\non = no # off\n", {"a": Sec})
    assert cfg["a"].n == 3 and cfg["a"].on is False


@pytest.mark.parametrize(
    "text", ["[c]\nn = 1\n", "[a]\nm = 1\n", "[a]\nn = one\n", "[a]\non = maybe\n", "[a]\nn = -1\n", "no header\n"]
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        read_config(text, {"a": Sec})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        fio.load_config(tmp_path / "none.ini", {"a": Sec})
