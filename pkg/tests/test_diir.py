import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import idforge.diir as diir
from idforge.diffusion import ToyAutoencoder, make_schedule
from idforge.diir import (
    CacheMisalignment,
    RestorationJob,
    RestoreConfig,
    attention_fusion,
    latent_fusion,
    multi_fusion,
    renormalize,
    restore,
    restore_multi,
    should_restore,
    smooth_mask,
)
from idforge.embeddings import RegionMask
from idforge.evaluation import broken_job
from idforge.repcontrol import build_dual_model
from idforge.synth import make_dataset
from idforge.tensor_nn import gaussian_kernel


@pytest.mark.parametrize(
    "wh,expected",
    [((99, 99), True), ((100, 50), False), ((50, 100), False), ((1, 1), True), ((150, 150), False)],
)
def test_should_restore_threshold(wh, expected):
    assert should_restore(wh) is expected


def test_should_restore_rejects_empty_faces():
    with pytest.raises(ValueError):
        should_restore((0, 10))


def test_smooth_mask_matches_replicate_padded_oracle():
    grid = torch.zeros(9, 11)
    grid[2:6, 3:8] = 1
    g = gaussian_kernel((5, 5), 1.0)
    got = smooth_mask(RegionMask(grid), g).grid.double().numpy()
    padded = np.pad(grid.double().numpy(), 2, mode="edge")
    w = g.weights.double().numpy()
    want = np.array([[(padded[i : i + 5, j : j + 5] * w).sum() for j in range(11)] for i in range(9)])
    np.testing.assert_allclose(got, np.clip(want, 0, 1), atol=1e-6)
    ones = smooth_mask(RegionMask(torch.ones(6, 6)), g).grid
    assert torch.allclose(ones, torch.ones(6, 6))


def _box_mask(size, x0, y0, w, h):
    grid = torch.zeros(size, size)
    grid[y0 : y0 + h, x0 : x0 + w] = 1
    return RegionMask(grid)


def test_latent_mask_on_latent_grid_is_plain_smoothing():
    m = _box_mask(128, 32, 16, 32, 32)
    cfg = RestoreConfig(smooth_grid=0)
    small = torch.zeros(16, 16)
    small[2:6, 4:8] = 1
    want = smooth_mask(RegionMask(small), gaussian_kernel((5, 5), 1.0)).grid
    assert torch.allclose(diir.latent_mask(m, (16, 16), cfg), want, atol=1e-6)


def test_latent_mask_fine_grid_matches_pooled_oracle():
    m = _box_mask(128, 32, 16, 32, 32)
    fine = np.zeros((64, 64))
    fine[8:24, 16:32] = 1
    padded = np.pad(fine, 2, mode="edge")
    w = gaussian_kernel((5, 5), 1.0).weights.double().numpy()
    sm = np.array([[(padded[i : i + 5, j : j + 5] * w).sum() for j in range(64)] for i in range(64)])
    want = sm.reshape(16, 4, 16, 4).mean(axis=(1, 3))
    got = diir.latent_mask(m, (16, 16), RestoreConfig())
    np.testing.assert_allclose(got.double().numpy(), want, atol=1e-6)


def test_latent_mask_fine_grid_keeps_small_face_interior():
    m = _box_mask(128, 32, 16, 32, 32)  # 4x4 latent cells
    coarse = diir.latent_mask(m, (16, 16), RestoreConfig(smooth_grid=0))
    fine = diir.latent_mask(m, (16, 16), RestoreConfig())
    assert float(fine[3:5, 5:7].min()) == pytest.approx(1.0)
    assert float(coarse[3:5, 5:7].max()) < 0.9
    # support grows by at most one latent cell
    assert float(fine[:1].abs().max()) == 0 and float(fine[7:].abs().max()) == 0
    assert float(fine[:, :3].abs().max()) == 0 and float(fine[:, 9:].abs().max()) == 0


def test_smooth_mask_rejects_unnormalized_kernel():
    g = gaussian_kernel((3, 3), 1.0)
    bad = type(g)(g.size, g.sigma, g.weights * 2)
    with pytest.raises(ValueError):
        smooth_mask(RegionMask(torch.zeros(4, 4)), bad)


def test_fusion_returns_cached_exactly_where_mask_is_zero():
    g = torch.Generator().manual_seed(0)
    live, cached = torch.randn(2, 4, 8, 8, generator=g)
    m = torch.zeros(8, 8)
    m[2:5, 3:6] = torch.rand(3, 3, generator=g) * 0.9 + 0.1
    for fuse in (attention_fusion, latent_fusion):
        out = fuse(live, cached, m)
        assert torch.equal(out[:, m == 0], cached[:, m == 0])
        assert not torch.equal(out[:, m > 0], cached[:, m > 0])
    assert torch.equal(attention_fusion(live, cached, torch.zeros(8, 8)), cached)


def test_fusion_inside_mask_follows_adain_oracle():
    g = torch.Generator().manual_seed(1)
    live, cached = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
    m = torch.zeros(6, 6, dtype=torch.float64)
    m[1:4, 1:4] = 1.0
    out = latent_fusion(live, cached, m).numpy()
    L, C, M = live.numpy(), cached.numpy(), m.numpy().astype(bool)
    for c in range(3):
        content, style = L[c][M], C[c][~M]
        want = style.std() * (content - content.mean()) / (content.std() + 1e-5) + style.mean()
        np.testing.assert_allclose(out[c][M], want, atol=1e-6)
        np.testing.assert_array_equal(out[c][~M], C[c][~M])


def test_full_mask_keeps_live_features():
    live, cached = torch.randn(2, 3, 4, 4)
    assert torch.allclose(attention_fusion(live, cached, torch.ones(4, 4)), live)


def test_fusion_shape_errors():
    with pytest.raises(ValueError):
        attention_fusion(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5), torch.zeros(4, 4))
    with pytest.raises(ValueError):
        latent_fusion(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), torch.zeros(2, 2))


def test_multi_fusion_with_one_mask_equals_single_fusion():
    live, cached = torch.randn(2, 4, 8, 8)
    m = torch.zeros(8, 8)
    m[1:5, 2:6] = 0.7
    assert torch.allclose(multi_fusion(live, cached, [m]), latent_fusion(live, cached, m), atol=1e-6)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_renormalize_caps_overlap_at_one(seed, n):
    g = torch.Generator().manual_seed(seed)
    masks = [torch.rand(6, 6, generator=g) for _ in range(n)]
    out = renormalize(masks)
    total = torch.stack(masks).sum(0)
    assert float(torch.stack(out).sum(0).max()) <= 1 + 1e-6
    under = total <= 1
    for a, b in zip(masks, out):
        assert torch.equal(a[under], b[under])
        assert torch.allclose(b[~under], a[~under] / total[~under])
    assert renormalize([]) == []


@pytest.fixture(scope="module")
def dual(request):
    torch.manual_seed(0)
    from idforge.denoiser import ToyDenoiser

    return build_dual_model(ToyDenoiser()).eval().requires_grad_(False)


def short_job(seed=0, steps=4):
    s = make_dataset(1, seed=20 + seed)[0]
    return s, broken_job(s, seed, steps=steps)


def test_restore_locks_background_to_input(dual):
    s, job = short_job()
    ae = ToyAutoencoder()
    r = restore(job, dual, make_schedule(4), ae)
    keep = r.background_pixels(ae.factor)
    assert keep.any() and not keep.all()
    assert float((r.image - ae.project(job.broken_image))[:, keep].abs().max()) <= 1e-3
    assert r.image.shape == job.broken_image.shape
    assert set(r.timings) == {"invert", "sample"}


def test_empty_mask_warns_and_returns_round_trip(dual):
    s, job = short_job()
    empty = RestorationJob(job.broken_image, RegionMask(torch.zeros(s.size)), job.landmarks, job.identity, job.text, 4)
    ae = ToyAutoencoder()
    with pytest.warns(UserWarning, match="empty face mask"):
        r = restore(empty, dual, make_schedule(4), ae)
    assert torch.allclose(r.image, ae.project(job.broken_image), atol=1e-5)


def test_restore_rejects_step_mismatch(dual):
    _, job = short_job(steps=5)
    with pytest.raises(ValueError):
        restore(job, dual, make_schedule(4))


def test_missing_cache_level_is_detected(dual, monkeypatch):
    _, job = short_job()
    real = diir.invert

    def lossy(*a, **k):
        traj = real(*a, **k)
        for key in [k for k in traj.self_attn if k[0] == 2]:
            del traj.self_attn[key]
        return traj

    monkeypatch.setattr(diir, "invert", lossy)
    with pytest.raises(CacheMisalignment):
        restore(job, dual, make_schedule(4))


def test_job_validates_shapes():
    s, job = short_job()
    with pytest.raises(ValueError):
        RestorationJob(job.broken_image, RegionMask(torch.zeros(8, 8)), job.landmarks, job.identity, job.text)


def test_restore_multi_single_job_equals_restore(dual):
    _, job = short_job()
    sched = make_schedule(4)
    a = restore(job, dual, sched)
    b = restore_multi([job], dual, sched)
    assert torch.equal(a.image, b.image)


def test_restore_multi_keeps_background_and_both_faces(dual):
    s = make_dataset(1, seed=5, n_people=2)[0]
    jobs = [broken_job(s, 0, face=i, steps=4) for i in range(2)]
    image = jobs[0].broken_image.clone()
    x, y, w, h = s.bboxes[1]
    image[:, y : y + h, x : x + w] = jobs[1].broken_image[:, y : y + h, x : x + w]
    jobs = [RestorationJob(image, j.face_mask, j.landmarks, j.identity, j.text, 4) for j in jobs]
    ae = ToyAutoencoder()
    r = restore_multi(jobs, dual, make_schedule(4), ae)
    keep = r.background_pixels(ae.factor)
    assert len(r.masks) == 2
    assert float((r.image - ae.project(image))[:, keep].abs().max()) <= 1e-3
    assert float(torch.stack(r.masks).sum(0).max()) <= 1 + 1e-6
    with pytest.raises(ValueError):
        restore_multi([], dual, make_schedule(4))
    other = RestorationJob(torch.zeros_like(image), jobs[1].face_mask, jobs[1].landmarks, jobs[1].identity, jobs[1].text, 4)
    with pytest.raises(ValueError):
        restore_multi([jobs[0], other], dual, make_schedule(4))
