import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from idforge.tensor_nn import (
    adain,
    conv2d,
    gaussian_kernel,
    gaussian_window,
    linear,
    masked_adain,
    masked_composite,
    multihead_attention,
    scaled_dot_attention,
)


def conv_loops(x, w, b, stride, pad):
    # direct cross-correlation in float64 numpy
    x = np.pad(x.double().numpy(), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = w.double().numpy()
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = x[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += b.double().numpy()[None, :, None, None]
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (8, 0, 8)])
def test_conv2d_matches_loops(stride, pad, k):
    g = torch.Generator().manual_seed(stride * 10 + k)
    x = torch.randn(2, 3, 16, 16, generator=g)
    w = torch.randn(4, 3, k, k, generator=g)
    b = torch.randn(4, generator=g)
    got = conv2d(x, w, b, stride, pad).double().numpy()
    np.testing.assert_allclose(got, conv_loops(x, w, b, stride, pad), atol=1e-4)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 2, 1, 1))
    with pytest.raises(ValueError, match="4-d"):
        conv2d(torch.zeros(3, 4, 4), torch.zeros(2, 3, 1, 1))
    with pytest.raises(ValueError, match="bias"):
        conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 1, 1), torch.zeros(3))


def test_linear_matches_matmul():
    g = torch.Generator().manual_seed(0)
    x, w, b = torch.randn(5, 7, generator=g), torch.randn(3, 7, generator=g), torch.randn(3, generator=g)
    ref = x.double().numpy() @ w.double().numpy().T + b.double().numpy()
    np.testing.assert_allclose(linear(x, w, b).numpy(), ref, atol=1e-5)
    with pytest.raises(ValueError):
        linear(x, torch.zeros(3, 6))


def attention_loops(q, k, v):
    q, k, v = (t.double().numpy() for t in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = k @ q[i] / math.sqrt(q.shape[1])
        p = np.exp(s - s.max())
        p /= p.sum()
        out[i] = p @ v
    return out


def test_attention_matches_loops_and_rows_sum_to_one():
    g = torch.Generator().manual_seed(1)
    q, k, v = torch.randn(6, 8, generator=g), torch.randn(5, 8, generator=g), torch.randn(5, 3, generator=g)
    out, attn = scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.numpy(), attention_loops(q, k, v), atol=1e-5)
    np.testing.assert_allclose(attn.sum(-1).numpy(), np.ones(6), atol=1e-6)


def test_multihead_is_concatenated_single_heads():
    g = torch.Generator().manual_seed(2)
    q, k, v = torch.randn(6, 8, generator=g), torch.randn(5, 8, generator=g), torch.randn(5, 8, generator=g)
    got = multihead_attention(q, k, v, heads=2)
    ref = np.concatenate([attention_loops(q[:, h * 4 : h * 4 + 4], k[:, h * 4 : h * 4 + 4], v[:, h * 4 : h * 4 + 4]) for h in range(2)], 1)
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-5)


def test_attention_errors():
    with pytest.raises(ValueError, match="empty"):
        scaled_dot_attention(torch.zeros(2, 4), torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValueError, match="widths"):
        scaled_dot_attention(torch.zeros(2, 4), torch.zeros(3, 5), torch.zeros(3, 4))


def adain_numpy(c, s, eps=1e-5):
    c = c.reshape(c.shape[0], -1).astype(np.float64)
    s = s.reshape(s.shape[0], -1).astype(np.float64)
    mc, sc = c.mean(1, keepdims=True), c.std(1, keepdims=True)
    ms, ss = s.mean(1, keepdims=True), s.std(1, keepdims=True)
    return ss * (c - mc) / (sc + eps) + ms


def test_adain_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    c, s = rng.normal(2, 3, (4, 5, 6)), rng.normal(-1, 0.5, (4, 7, 3))
    got = adain(torch.tensor(c, dtype=torch.float32), torch.tensor(s, dtype=torch.float32))
    np.testing.assert_allclose(got.numpy().reshape(4, -1), adain_numpy(c, s), atol=1e-4)


def test_adain_output_takes_style_statistics():
    g = torch.Generator().manual_seed(3)
    c, s = torch.randn(3, 10, 10, generator=g) * 4 + 1, torch.randn(3, 10, 10, generator=g) * 0.3 - 2
    out = adain(c, s).double().reshape(3, -1)
    ref = s.double().reshape(3, -1)
    np.testing.assert_allclose(out.mean(1).numpy(), ref.mean(1).numpy(), atol=1e-5)
    np.testing.assert_allclose(out.std(1, unbiased=False).numpy(), ref.std(1, unbiased=False).numpy(), rtol=1e-3)


def test_adain_constant_style_gives_style_mean():
    c = torch.randn(2, 4, 4)
    s = torch.full((2, 4, 4), 0.7)
    np.testing.assert_allclose(adain(c, s).numpy(), np.full((2, 4, 4), 0.7), atol=1e-6)


def test_masked_adain_matches_subset_adain():
    rng = np.random.default_rng(4)
    c, s = rng.normal(0, 2, (3, 6, 6)), rng.normal(5, 1, (3, 6, 6))
    m = np.zeros((6, 6))
    m[1:4, 2:5] = 1
    got = masked_adain(torch.tensor(c).float(), torch.tensor(s).float(), torch.tensor(m).float(), torch.tensor(1 - m).float())
    cc = c[:, m > 0]
    ss = s[:, m == 0]
    mc, sc = cc.mean(1, keepdims=True), cc.std(1, keepdims=True)
    ms, sd = ss.mean(1, keepdims=True), ss.std(1, keepdims=True)
    ref = sd * (c.reshape(3, -1) - mc) / (sc + 1e-5) + ms
    np.testing.assert_allclose(got.numpy().reshape(3, -1), ref, atol=1e-4)


def test_masked_adain_empty_population_returns_content():
    c = torch.randn(2, 3, 3)
    assert torch.equal(masked_adain(c, torch.randn(2, 3, 3), torch.zeros(3, 3), torch.ones(3, 3)), c)


@given(h=st.integers(0, 4), w=st.integers(0, 4), sigma=st.floats(0.2, 5.0))
@settings(max_examples=40, deadline=None)
def test_gaussian_kernel_normalized_and_flip_symmetric(h, w, sigma):
    k = gaussian_kernel((2 * h + 1, 2 * w + 1), sigma).weights.double()
    assert abs(float(k.sum()) - 1) < 1e-6
    assert torch.allclose(k, k.flip(0), atol=1e-7)
    assert torch.allclose(k, k.flip(1), atol=1e-7)
    assert int(k.argmax()) == h * (2 * w + 1) + w


def test_gaussian_kernel_values_and_errors():
    k = gaussian_kernel((5, 5), 1.0).weights.double()
    r = np.arange(5) - 2
    g = np.exp(-(r[:, None] ** 2 + r[None] ** 2) / 2)
    np.testing.assert_allclose(k.numpy(), g / g.sum(), atol=1e-7)
    with pytest.raises(ValueError):
        gaussian_kernel((4, 5), 1.0)
    with pytest.raises(ValueError):
        gaussian_kernel((5, 5), 0.0)
    assert gaussian_window((4, 6)).size == (4, 6)


def test_masked_composite():
    a, b = torch.ones(2, 3, 3), torch.zeros(2, 3, 3)
    m = torch.zeros(3, 3)
    m[1, 1] = 0.25
    out = masked_composite(a, b, m)
    assert float(out[0, 1, 1]) == 0.25 and float(out.sum()) == 0.5
    with pytest.raises(ValueError):
        masked_composite(a, b, m + 2)
