"""Synthetic identities and scenes standing in for a real portrait dataset.

An identity is a seed. Its face stand-in (the *glyph*) is a smooth random colour
field defined on the unit square, so it can be rendered at any bbox size. Scenes
place faces on an 8-pixel grid, draw a stick body under each face, and are
projected onto the autoencoder's span so the toy autoencoder reproduces them
exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor

from .conditioning import FaceEncoder, TextEncoder, TrainSample
from .diffusion import ToyAutoencoder
from .embeddings import IdentityEmbedding, RegionMask

CANVAS = 128
FACE_SIZES = (16, 24, 32, 40, 48)
GLYPH_CANON = 16
# background texture: cycles per canvas side, components per channel, RMS amplitude
TEXTURE_MAX_FREQ = 8.0
TEXTURE_COMPONENTS = 8
TEXTURE_RMS = 0.15
GLYPH_COMPONENTS = 6
GLYPH_MAX_FREQ = 1.2
LANDMARKS = ((0.3, 0.38), (0.7, 0.38), (0.5, 0.56), (0.35, 0.76), (0.65, 0.76))


@lru_cache(maxsize=None)
def default_encoders() -> tuple[TextEncoder, FaceEncoder, ToyAutoencoder]:
    return TextEncoder(), FaceEncoder(), ToyAutoencoder()


@dataclass(frozen=True)
class SyntheticIdentity:
    key: int
    base: tuple[float, float, float]
    amps: np.ndarray  # (3, K)
    freqs: np.ndarray  # (3, K, 2)
    phases: np.ndarray  # (3, K)
    glyph: Tensor
    embedding: IdentityEmbedding

    def glyph_at(self, h: int, w: int) -> Tensor:
        return _glyph_field(self.base, self.amps, self.freqs, self.phases, h, w)


def _glyph_field(base, amps, freqs, phases, h: int, w: int) -> Tensor:
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    vv, uu = np.meshgrid(v, u, indexing="ij")
    out = np.empty((3, h, w))
    for c in range(3):
        arg = 2 * np.pi * (freqs[c, :, 0, None, None] * uu + freqs[c, :, 1, None, None] * vv) + phases[c, :, None, None]
        out[c] = base[c] + (amps[c, :, None, None] * np.cos(arg)).sum(0)
    return torch.from_numpy(np.clip(out, 0.0, 1.0)).float()


def gen_identity(seed: int) -> SyntheticIdentity:
    """Deterministic identity from a 64-bit seed."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x1D])
    base = tuple(float(x) for x in rng.uniform(0.3, 0.7, 3))
    freqs = rng.uniform(-GLYPH_MAX_FREQ, GLYPH_MAX_FREQ, (3, GLYPH_COMPONENTS, 2))
    phases = rng.uniform(0, 2 * np.pi, (3, GLYPH_COMPONENTS))
    amps = rng.normal(0, 1, (3, GLYPH_COMPONENTS))
    amps *= 0.18 / np.sqrt((amps**2).sum(1, keepdims=True) / 2)
    glyph = _glyph_field(base, amps, freqs, phases, GLYPH_CANON, GLYPH_CANON)
    _, faces, _ = default_encoders()
    return SyntheticIdentity(int(seed), base, amps, freqs, phases, glyph, faces(glyph, int(seed)))


@dataclass(frozen=True)
class Person:
    identity: int
    bbox: tuple[int, int, int, int]  # x, y, w, h
    skeleton: tuple[tuple[tuple[float, float], ...], ...] = ()
    clothing: tuple[float, float, float] = (0.3, 0.3, 0.6)


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (CANVAS, CANVAS)
    people: tuple[Person, ...] = ()
    caption: tuple[int, ...] = ()
    background: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.8, 0.8, 0.8), (0.5, 0.5, 0.5))
    texture: int = 0  # background texture seed, 0 for none

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        people = tuple(
            Person(
                int(p["identity"]),
                tuple(p["bbox"]),
                tuple(tuple(tuple(pt) for pt in line) for line in p["skeleton"]),
                tuple(p["clothing"]),
            )
            for p in d["people"]
        )
        bg = tuple(tuple(c) for c in d["background"])
        return cls(tuple(d["canvas"]), people, tuple(d["caption"]), bg, int(d.get("texture", 0)))


def body_skeleton(bbox: tuple[int, int, int, int]) -> tuple[tuple[tuple[float, float], ...], ...]:
    """Stick-figure polylines hanging below a face box, in pixel coordinates."""
    x, y, w, h = bbox
    cx, neck = x + w / 2, y + h
    hip = neck + 1.4 * h
    arm = 0.9 * w
    return (
        ((cx, neck), (cx, hip)),
        ((cx - arm, neck + 0.9 * h), (cx, neck + 0.25 * h), (cx + arm, neck + 0.9 * h)),
        ((cx - 0.5 * w, hip + 1.2 * h), (cx, hip), (cx + 0.5 * w, hip + 1.2 * h)),
    )


def random_scene(seed: int, n_people: int = 1, canvas: int = CANVAS, face_sizes=FACE_SIZES) -> SceneSpec:
    rng = np.random.default_rng([int(seed), 0x5C])
    people = []
    slot = canvas // max(n_people, 1)
    for i in range(n_people):
        size = int(rng.choice([s for s in face_sizes if s <= slot]))
        lo = i * slot
        xs = [x for x in range(lo, lo + slot - size + 1, 8)]
        x = int(rng.choice(xs))
        y = int(rng.choice(range(8, max(9, canvas // 2 - size + 1), 8)))
        bbox = (x, y, size, size)
        ident = int(rng.integers(0, 2**62))
        clothing = tuple(float(c) for c in rng.uniform(0.1, 0.9, 3))
        people.append(Person(ident, bbox, body_skeleton(bbox), clothing))
    bg = tuple(tuple(float(c) for c in rng.uniform(0.2, 0.9, 3)) for _ in range(2))
    style = int(rng.integers(0, 4))
    hue = int(np.argmax(people[0].clothing)) if people else 3
    caption = (1 + n_people, 5 + style, 10 + hue)
    texture = int(rng.integers(1, 2**62))
    return SceneSpec((canvas, canvas), tuple(people), caption, bg, texture)


def _segment_distance(p0, p1, yy, xx) -> np.ndarray:
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    s = np.zeros_like(xx) if denom == 0 else np.clip(((xx - x0) * dx + (yy - y0) * dy) / denom, 0, 1)
    return np.hypot(xx - (x0 + s * dx), yy - (y0 + s * dy))


def _polyline_mask(lines, H, W, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    out = np.zeros((H, W), dtype=bool)
    for line in lines:
        for p0, p1 in zip(line, line[1:]):
            out |= _segment_distance(p0, p1, yy, xx) <= width / 2
    return out


def landmark_points(bbox) -> list[tuple[float, float]]:
    x, y, w, h = bbox
    return [(x + fx * w, y + fy * h) for fx, fy in LANDMARKS]


def landmark_raster(bboxes, size: tuple[int, int]) -> Tensor:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    out = np.zeros((H, W))
    for bbox in bboxes:
        r = max(1.0, bbox[2] / 16)
        for px, py in landmark_points(bbox):
            out[np.hypot(xx - px, yy - py) <= r] = 1.0
    return torch.from_numpy(out).float()


def _background(spec: SceneSpec) -> np.ndarray:
    H, W = spec.canvas
    c1, c2 = (np.array(c)[:, None, None] for c in spec.background)
    ramp = (np.arange(H)[None, :, None] + 0.5) / H
    wave = 0.05 * np.cos(2 * np.pi * (np.arange(W)[None, None, :] + 0.5) / W)
    return np.clip(c1 * (1 - ramp) + c2 * ramp + wave + _texture(spec.texture, H, W), 0.0, 1.0)


def _texture(seed: int, H: int, W: int) -> np.ndarray:
    """Smooth random colour texture with face-like contrast; seed 0 means none."""
    if not seed:
        return np.zeros((3, H, W))
    rng = np.random.default_rng([int(seed), 0x7E])
    freqs = rng.uniform(-TEXTURE_MAX_FREQ, TEXTURE_MAX_FREQ, (3, TEXTURE_COMPONENTS, 2))
    phases = rng.uniform(0, 2 * np.pi, (3, TEXTURE_COMPONENTS))
    amps = rng.normal(0, 1, (3, TEXTURE_COMPONENTS))
    amps *= TEXTURE_RMS / np.sqrt((amps**2).sum(1, keepdims=True) / 2)
    v = (np.arange(H) + 0.5) / H
    u = (np.arange(W) + 0.5) / W
    vv, uu = np.meshgrid(v, u, indexing="ij")
    out = np.empty((3, H, W))
    for c in range(3):
        arg = 2 * np.pi * (freqs[c, :, 0, None, None] * uu + freqs[c, :, 1, None, None] * vv) + phases[c, :, None, None]
        out[c] = (amps[c, :, None, None] * np.cos(arg)).sum(0)
    return out


def overlaps(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def render_scene(spec: SceneSpec, project: bool = True, draw_faces: bool = True) -> TrainSample:
    """Composite image, condition raster (skeleton, landmarks) and face masks."""
    H, W = spec.canvas
    for i, a in enumerate(spec.people):
        x, y, w, h = a.bbox
        if x < 0 or y < 0 or x + w > W or y + h > H:
            raise ValueError(f"face bbox {a.bbox} outside canvas {spec.canvas}")
        for b in spec.people[i + 1 :]:
            if overlaps(a.bbox, b.bbox):
                raise ValueError(f"overlapping face boxes {a.bbox} and {b.bbox}")
    text_enc, _, ae = default_encoders()
    img = _background(spec)
    skeleton = np.zeros((H, W), dtype=bool)
    identities = []
    masks = []
    for p in spec.people:
        limbs = _polyline_mask(p.skeleton, H, W, max(3.0, p.bbox[2] / 4))
        img[:, limbs] = np.array(p.clothing)[:, None]
        skeleton |= _polyline_mask(p.skeleton, H, W, 1.5)
    for p in spec.people:
        ident = gen_identity(p.identity)
        x, y, w, h = p.bbox
        if draw_faces:
            img[:, y : y + h, x : x + w] = ident.glyph_at(h, w).numpy()
        identities.append(ident.embedding)
        masks.append(RegionMask.from_bbox((H, W), p.bbox))
    image = torch.from_numpy(img).float()
    if project:
        image = ae.project(image)
    cond = torch.stack([torch.from_numpy(skeleton).float(), landmark_raster([p.bbox for p in spec.people], (H, W))])
    return TrainSample(
        image=image,
        cond=cond,
        identity=identities[0] if identities else None,
        text=text_enc(spec.caption),
        masks=tuple(masks),
        caption=tuple(spec.caption),
        identities=tuple(identities),
        bboxes=tuple(p.bbox for p in spec.people),
    )


def corrupt_face(image: Tensor, bbox, seed: int, keep: float = 0.2, noise: float = 0.05) -> Tensor:
    """Break a face: mostly replace it with an unrelated glyph plus noise, then re-project."""
    x, y, w, h = bbox
    rng = np.random.default_rng([int(seed), 0xBAD])
    other = gen_identity(int(rng.integers(0, 2**62))).glyph_at(h, w)
    jitter = torch.from_numpy(rng.normal(0, noise, (3, h, w))).float()
    out = image.clone()
    out[:, y : y + h, x : x + w] = keep * image[:, y : y + h, x : x + w] + (1 - keep) * other + jitter
    _, _, ae = default_encoders()
    return ae.project(out)


def crop(image: Tensor, bbox) -> Tensor:
    x, y, w, h = bbox
    return image[:, y : y + h, x : x + w]


def face_sim(image: Tensor, bbox, identity: IdentityEmbedding) -> float:
    from .conditioning import face_similarity

    _, faces, _ = default_encoders()
    return face_similarity(faces(crop(image, bbox)), identity)


def make_dataset(n: int, seed: int = 0, n_people: int = 1) -> list[TrainSample]:
    return [render_scene(random_scene(seed * 100_003 + i, n_people)) for i in range(n)]


class SceneStream:
    """Unbounded, index-addressable sequence of freshly rendered scenes."""

    def __init__(self, seed: int = 0, n_people: int = 1):
        self.seed = seed
        self.n_people = n_people

    def __getitem__(self, i: int) -> TrainSample:
        if i < 0:
            raise IndexError(i)
        return render_scene(random_scene(_stream_seed(self.seed, i), self.n_people))

    def take(self, start: int, n: int) -> list[TrainSample]:
        return [self[start + k] for k in range(n)]


def _stream_seed(seed: int, i: int) -> int:
    # disjoint from make_dataset seeds for any realistic dataset size
    return (1 << 40) + seed * (1 << 30) + i
