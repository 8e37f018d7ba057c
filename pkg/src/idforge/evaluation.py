"""Identity-preservation evaluation on generated scenes."""
from __future__ import annotations

from typing import Sequence

import torch

from .conditioning import TextEncoder, TrainSample
from .diffusion import GuidanceConfig, NoiseSchedule, ToyAutoencoder, sample
from .diir import RestorationJob, RestoreConfig, restore
from .embeddings import Conditions, IdentityEmbedding
from .metrics import EvalResult
from .synth import corrupt_face, face_sim, landmark_raster


def locate_face(image: torch.Tensor, identity: IdentityEmbedding, size: tuple[int, int], stride: int = 8):
    """Window of ``size`` (w, h) most similar to ``identity``; a stand-in face detector."""
    w, h = size
    H, W = image.shape[-2:]
    best = (None, -2.0)
    for y in range(0, H - h + 1, stride):
        for x in range(0, W - w + 1, stride):
            s = face_sim(image, (x, y, w, h), identity)
            if s > best[1]:
                best = ((x, y, w, h), s)
    return best


def scene_conditions(s: TrainSample, masked: bool = True) -> Conditions:
    ids = tuple((ident, m if masked else None) for ident, m in zip(s.identities, s.masks))
    return Conditions(s.text, ids, s.cond)


@torch.no_grad()
def generate(model, s: TrainSample, sched: NoiseSchedule, guidance: float = 5.0, seed: int = 0, ae=None):
    ae = ae or ToyAutoencoder()
    H, W = s.size
    g = torch.Generator().manual_seed(seed)
    z_T = torch.randn(ae.latent_channels, *ae.latent_size(H, W), generator=g)
    z, _ = sample(model, z_T, scene_conditions(s), GuidanceConfig(guidance, TextEncoder().null()), sched)
    return ae.decode(z).clamp(0, 1)


def eval_identity(
    model, scenes: Sequence[TrainSample], sched: NoiseSchedule, guidance: float = 5.0, seed: int = 0, ae=None
) -> EvalResult:
    """Generate each scene and score every face with the overlap-gated similarity."""
    out = EvalResult()
    for i, s in enumerate(scenes):
        img = generate(model, s, sched, guidance, seed + i, ae)
        for ident, box in zip(s.identities, s.bboxes):
            found, raw = locate_face(img, ident, (box[2], box[3]))
            out.add(found, box, max(-1.0, min(1.0, raw)))
    return out


def broken_job(s: TrainSample, seed: int, face: int = 0, steps: int = 30) -> RestorationJob:
    """Restoration job for face ``face`` of ``s`` after corrupting it with ``seed``."""
    box = s.bboxes[face]
    broken = corrupt_face(s.image, box, seed)
    return RestorationJob(broken, s.masks[face], landmark_raster([box], s.size), s.identities[face], s.text, steps)


def eval_restoration(
    model, scenes: Sequence[TrainSample], sched: NoiseSchedule, cfg: RestoreConfig = RestoreConfig(), ae=None
) -> dict:
    """Corrupt the first face of each scene, restore it, and score both versions.

    ``background_max_diff`` compares the output with the autoencoder round trip
    of the broken input over the latent cells the masks leave untouched.
    """
    ae = ae or ToyAutoencoder()
    before, after, bg = [], [], 0.0
    for k, s in enumerate(scenes):
        job = broken_job(s, k, steps=sched.T)
        r = restore(job, model, sched, ae, cfg)
        box = s.bboxes[0]
        before.append(face_sim(job.broken_image, box, job.identity))
        after.append(face_sim(r.image, box, job.identity))
        keep = r.background_pixels(ae.factor)
        bg = max(bg, float((r.image - ae.project(job.broken_image))[:, keep].abs().max()))
    improved = sum(a > b for a, b in zip(after, before))
    return {
        "before": before,
        "after": after,
        "improved": improved,
        "jobs": len(before),
        "mean_gain": (sum(after) - sum(before)) / max(1, len(before)),
        "background_max_diff": bg,
    }
