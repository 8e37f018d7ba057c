import hashlib
import json
from pathlib import Path

import pytest
import torch

import idforge
from idforge import io as fio
from idforge.conditioning import TextEncoder
from idforge.denoiser import ToyDenoiser
from idforge.repcontrol import build_dual_model
from idforge.synth import SceneStream
from idforge.training import PretrainConfig, TrainConfig, pretrain_base, train_toy

torch.set_num_threads(1)

# Trained models shared by the slow tests: a base pretrained on fresh scenes and
# the dual model fine-tuned from it. Built once, then cached across sessions.
FIXTURE_PRETRAIN = PretrainConfig(steps=1500, seed=0)
FIXTURE_FINETUNE = TrainConfig(steps=9000, seed=0)

_criteria = pytest.StashKey[list]()


def _source_hash(*cfgs) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(idforge.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(json.dumps([repr(c) for c in cfgs]).encode())
    return h.hexdigest()[:16]


def _cached(request, name: str, build, *cfgs):
    path = Path(request.config.cache.mkdir("idforge-models")) / f"{name}-{_source_hash(*cfgs)}.ckpt"
    if path.exists():
        return fio.model_from_checkpoint(fio.load_checkpoint(path))
    model = build()
    fio.save_checkpoint(path, fio.model_checkpoint(model))
    return model.eval()


@pytest.fixture(scope="session")
def pretrained_base(request):
    """Text-only base denoiser (about 5 minutes to train on first use)."""

    def build():
        torch.manual_seed(0)
        base = ToyDenoiser()
        pretrain_base(base, SceneStream(0), TextEncoder().null(), FIXTURE_PRETRAIN)
        return base

    return _cached(request, "base", build, FIXTURE_PRETRAIN)


@pytest.fixture(scope="session")
def restoration_model(request, pretrained_base):
    """Dual model fine-tuned from ``pretrained_base`` (about 8 minutes on first use)."""

    def build():
        dual = build_dual_model(pretrained_base)
        train_toy(dual, SceneStream(1), TextEncoder().null(), FIXTURE_FINETUNE)
        return dual

    return _cached(request, "dual", build, FIXTURE_PRETRAIN, FIXTURE_FINETUNE)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ToyDenoiser().eval().requires_grad_(False)


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` records one acceptance line for the summary."""

    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n} {title}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        request.config.stash.setdefault(_criteria, []).append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_criteria, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
