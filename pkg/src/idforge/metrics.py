"""Box overlap and the overlap-gated face similarity score."""
from __future__ import annotations

from dataclasses import dataclass, field

GATE = 0.5

Box = tuple  # (x, y, w, h)


def _valid(b: Box) -> bool:
    if len(b) != 4:
        raise ValueError(f"box must be (x, y, w, h), got {b!r}")
    return b[2] > 0 and b[3] > 0


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes; degenerate boxes give 0."""
    if not (_valid(a) and _valid(b)):
        return 0.0
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_gated_similarity(generated: Box, designated: Box, raw_sim: float, gate: float = GATE) -> float:
    """``raw_sim`` when the generated face overlaps its designated box with IoU > ``gate``, else 0."""
    if not -1.0 - 1e-6 <= raw_sim <= 1.0 + 1e-6:
        raise ValueError(f"similarity must lie in [-1, 1], got {raw_sim}")
    return float(raw_sim) if iou(generated, designated) > gate else 0.0


@dataclass(frozen=True)
class FaceScore:
    iou: float
    raw: float
    gated: float


@dataclass
class EvalResult:
    faces: list[FaceScore] = field(default_factory=list)

    def add(self, generated: Box, designated: Box, raw_sim: float) -> FaceScore:
        s = FaceScore(iou(generated, designated), float(raw_sim), iou_gated_similarity(generated, designated, raw_sim))
        self.faces.append(s)
        return s

    @property
    def mean_iou(self) -> float:
        return sum(f.iou for f in self.faces) / len(self.faces) if self.faces else 0.0

    @property
    def mean_raw(self) -> float:
        return sum(f.raw for f in self.faces) / len(self.faces) if self.faces else 0.0

    @property
    def mean_gated(self) -> float:
        return sum(f.gated for f in self.faces) / len(self.faces) if self.faces else 0.0

    def to_dict(self) -> dict:
        return {
            "faces": [vars(f) for f in self.faces],
            "mean_iou": self.mean_iou,
            "mean_raw": self.mean_raw,
            "mean_gated": self.mean_gated,
        }
