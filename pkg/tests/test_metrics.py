import itertools

import pytest
from hypothesis import given, strategies as st

from idforge.metrics import EvalResult, iou, iou_gated_similarity


def pixel_iou(a, b):
    pa = {(x, y) for x in range(a[0], a[0] + a[2]) for y in range(a[1], a[1] + a[3])}
    pb = {(x, y) for x in range(b[0], b[0] + b[2]) for y in range(b[1], b[1] + b[3])}
    union = pa | pb
    return len(pa & pb) / len(union) if union and pa and pb else 0.0


BOXES = [(x, y, w, h) for x in range(0, 4) for y in range(0, 3) for w in range(1, 4) for h in range(1, 3)]


def test_iou_matches_pixel_counting_on_exhaustive_grid():
    for a, b in itertools.product(BOXES, repeat=2):
        assert iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)


def test_gate_on_exhaustive_grid():
    for a, b in itertools.product(BOXES, repeat=2):
        u = pixel_iou(a, b)
        for raw in (-0.5, 0.0, 0.37, 1.0):
            want = raw if u > 0.5 else 0.0
            assert iou_gated_similarity(a, b, raw) == want, (a, b, u, raw)


def test_gate_boundary_is_exclusive():
    a, b = (0, 0, 2, 1), (0, 0, 1, 1)
    assert iou(a, b) == 0.5
    assert iou_gated_similarity(a, b, 0.9) == 0.0
    third = ((0, 0, 2, 1), (1, 0, 2, 1))
    assert iou(*third) == pytest.approx(1 / 3)
    assert iou_gated_similarity(*third, 0.9) == 0.0
    assert iou_gated_similarity((0, 0, 3, 1), (0, 0, 2, 1), 0.9) == 0.9


def test_degenerate_and_invalid_boxes():
    assert iou((0, 0, 0, 5), (0, 0, 0, 5)) == 0.0
    assert iou((0, 0, 4, 4), (10, 10, 2, 2)) == 0.0
    with pytest.raises(ValueError):
        iou((0, 0, 1), (0, 0, 1, 1))
    with pytest.raises(ValueError):
        iou_gated_similarity((0, 0, 1, 1), (0, 0, 1, 1), 1.5)


@given(
    a=st.tuples(st.integers(-5, 5), st.integers(-5, 5), st.integers(1, 6), st.integers(1, 6)),
    b=st.tuples(st.integers(-5, 5), st.integers(-5, 5), st.integers(1, 6), st.integers(1, 6)),
)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


def test_eval_result_aggregates():
    r = EvalResult()
    assert r.mean_gated == 0.0
    r.add((0, 0, 4, 4), (0, 0, 4, 4), 0.8)
    r.add((0, 0, 4, 4), (8, 8, 4, 4), 0.6)
    assert r.mean_iou == 0.5 and r.mean_raw == pytest.approx(0.7) and r.mean_gated == pytest.approx(0.4)
    d = r.to_dict()
    assert d["faces"][1] == {"iou": 0.0, "raw": 0.6, "gated": 0.0}
