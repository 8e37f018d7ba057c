import math

import pytest
import torch

from idforge.conditioning import TextEncoder, clone_face_splice
from idforge.denoiser import ToyDenoiser
from idforge.repcontrol import build_dual_model
from idforge.synth import SceneStream, make_dataset
from idforge.training import (
    PretrainConfig,
    TrainConfig,
    TrainingDiverged,
    eval_cfa,
    frozen_state,
    identity_mask,
    pretrain_base,
    sample_conditions,
    stage_condition,
    train_toy,
)
import idforge.training as training


def test_stage_schedule_fractions():
    cfg = TrainConfig(steps=100)
    stages = [cfg.stage(s) for s in range(1, 101)]
    assert stages.count(1) == 10 and stages.count(2) == 20 and stages.count(3) == 70
    assert stages == sorted(stages)


@pytest.mark.parametrize("kw", [{"steps": 0}, {"stages": (0.5, 0.5, 0.5)}, {"stages": (0.5, 0.5)}, {"batch": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_stage_condition_keeps_one_modality_early():
    cond = torch.stack([torch.ones(4, 4), 2 * torch.ones(4, 4)])
    assert torch.equal(stage_condition(cond, 1)[0], torch.zeros(4, 4))
    assert torch.equal(stage_condition(cond, 1)[1], cond[1])
    assert torch.equal(stage_condition(cond, 2)[1], torch.zeros(4, 4))
    assert torch.equal(stage_condition(cond, 3), cond)


def test_identity_mask_is_union_for_spliced_samples():
    s = make_dataset(1, seed=1)[0]
    sp = clone_face_splice(s)
    m = identity_mask(sp).grid
    assert torch.equal(m, (sp.masks[0].grid + sp.masks[1].grid).clamp(0, 1))
    c = sample_conditions(s, s.text, True, s.cond, masked=True)
    assert torch.equal(c.ids[0][1].grid, s.masks[0].grid)
    assert sample_conditions(s, s.text, False, None).ids == ()


def test_zero_mask_identity_equals_no_identity(tiny_model):
    dual = build_dual_model(tiny_model)
    s = make_dataset(1, seed=3)[0]
    c = sample_conditions(s, s.text, True, s.cond, masked=True)
    z = torch.randn(12, 16, 16)
    with torch.no_grad():
        a = dual.eps(z, 500, training._without_identity(c))
        b = dual.eps(z, 500, c.with_ids(()))
    assert torch.allclose(a, b, atol=1e-6)


def test_short_fine_tune_moves_only_trainable_parameters(tiny_model):
    dual = build_dual_model(tiny_model)
    before = frozen_state(dual)
    trainable = {n: p.detach().clone() for n, p in dual.named_parameters() if p.requires_grad}
    log = train_toy(dual, make_dataset(8, seed=4), TextEncoder().null(), TrainConfig(steps=10, batch=2, stages=(0.0, 0.0, 1.0)))
    after = frozen_state(dual)
    assert before.keys() == after.keys()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(not torch.equal(p, trainable[n]) for n, p in dual.named_parameters() if p.requires_grad)
    assert len(log.losses) == 10 and set(log.cfa) == {10}
    assert all(math.isfinite(x) for x in log.losses)


def test_fine_tune_from_stream_and_pretrain_smoke():
    torch.manual_seed(0)
    base = ToyDenoiser()
    null = TextEncoder().null()
    pre = pretrain_base(base, SceneStream(5), null, PretrainConfig(steps=3, batch=2))
    assert len(pre.losses) == 3
    dual = build_dual_model(base)
    log = train_toy(dual, SceneStream(6), null, TrainConfig(steps=10, batch=2))
    assert log.stages == [1] + [2] * 2 + [3] * 7 and set(log.cfa) == {10}


def test_divergence_is_reported(tiny_model, monkeypatch):
    dual = build_dual_model(tiny_model)
    monkeypatch.setattr(training, "diffusion_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDiverged):
        train_toy(dual, make_dataset(4, seed=0), TextEncoder().null(), TrainConfig(steps=2, batch=2))


def test_eval_cfa_is_deterministic(tiny_model):
    dual = build_dual_model(tiny_model)
    sp = [clone_face_splice(s, cell=16) for s in make_dataset(2, seed=8)]
    a, b = eval_cfa(dual, sp), eval_cfa(dual, sp)
    assert a == b and a > 0
