"""Box math against hand-computed values and a brute-force NMS reference."""
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from disdet import boxes as B


def boxes_strategy(n_max=8, hi=100.0):
    def build(draw):
        n = draw(st.integers(0, n_max))
        out = []
        for _ in range(n):
            x1 = draw(st.floats(0, hi - 2))
            y1 = draw(st.floats(0, hi - 2))
            w = draw(st.floats(1, hi - x1))
            h = draw(st.floats(1, hi - y1))
            out.append([x1, y1, x1 + w, y1 + h])
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)

    return st.composite(build)()


# -- IoU ---------------------------------------------------------------

def test_iou_hand_values():
    # inter 5x5=25, union 100+100-25=175
    assert B.iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)
    # inter 2x4=8, union 16+16-8=24
    assert B.iou((0, 0, 4, 4), (2, 0, 6, 4)) == pytest.approx(1 / 3)
    assert B.iou((0, 0, 4, 4), (4, 0, 8, 4)) == 0.0  # touching edges
    assert B.iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0


@given(boxes_strategy(), boxes_strategy())
@settings(max_examples=50, deadline=None)
def test_iou_matrix_matches_scalar(a, b):
    m = B.iou_matrix(a, b)
    assert m.shape == (len(a), len(b))
    for i in range(len(a)):
        for j in range(len(b)):
            assert m[i, j] == pytest.approx(B.iou(a[i], b[j]), abs=1e-12)


@given(boxes_strategy())
@settings(max_examples=50, deadline=None)
def test_iou_matrix_self_diagonal_is_one(a):
    m = B.iou_matrix(a, a)
    assert np.allclose(np.diag(m), 1.0)
    assert np.allclose(m, m.T)
    assert np.all((m >= 0.0) & (m <= 1.0 + 1e-12))


# -- NMS ---------------------------------------------------------------

def nms_reference(bxs, scores, thresh):
    """Independent greedy reference: repeatedly take the best-scoring
    unsuppressed box (ties by lower index), drop overlaps above thresh."""
    alive = list(range(len(bxs)))
    keep = []
    while alive:
        best = max(alive, key=lambda i: (scores[i], -i))
        keep.append(best)
        alive = [i for i in alive if i != best and B.iou(bxs[best], bxs[i]) <= thresh]
    return keep


def test_nms_hand_case():
    bxs = np.array(
        [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=np.float64
    )
    scores = np.array([0.9, 0.8, 0.7])
    # box 1 overlaps box 0 at iou 81/119 > 0.5 and is suppressed
    assert B.nms(bxs, scores, 0.5).tolist() == [0, 2]
    # with a high threshold nothing is suppressed
    assert B.nms(bxs, scores, 0.9).tolist() == [0, 1, 2]


def test_nms_tie_keeps_lower_index():
    bxs = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=np.float64)
    scores = np.array([0.5, 0.5])
    assert B.nms(bxs, scores, 0.5).tolist() == [0]


def test_nms_empty():
    out = B.nms(np.empty((0, 4)), np.empty(0), 0.5)
    assert out.shape == (0,) and out.dtype == np.int64


@given(boxes_strategy(n_max=10, hi=40.0), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
@settings(max_examples=75, deadline=None)
def test_nms_matches_reference(bxs, thresh, seed):
    scores = np.random.default_rng(seed).uniform(0.0, 1.0, size=len(bxs))
    got = B.nms(bxs, scores, thresh).tolist()
    assert got == nms_reference(bxs, scores, thresh)


# -- delta encode / decode ---------------------------------------------

def test_bbox2loc_hand_values():
    # anchor cx 5, w 10; target cx 15, w 20 -> dx 1, dw log 2
    anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
    targets = np.array([[5.0, 0.0, 25.0, 10.0]])
    loc = B.bbox2loc(anchors, targets)[0]
    assert loc == pytest.approx([1.0, 0.0, math.log(2.0), 0.0])


def test_loc2bbox_hand_values():
    # anchor cx 15, cy 15, w 10, h 10; deltas move the center by (1, 2)
    # and double the width: box (6, 12, 26, 22)
    anchors = np.array([[10.0, 10.0, 20.0, 20.0]])
    deltas = np.array([[0.1, 0.2, math.log(2.0), 0.0]])
    out = B.loc2bbox(anchors, deltas)[0]
    assert out == pytest.approx([6.0, 12.0, 26.0, 22.0])


def test_loc2bbox_zero_deltas_identity():
    anchors = np.array([[3.0, 7.0, 13.0, 27.0]])
    out = B.loc2bbox(anchors, np.zeros((1, 4)))
    assert out == pytest.approx(anchors)


def test_loc2bbox_clips_extreme_growth():
    anchors = np.array([[0.0, 0.0, 16.0, 16.0]])
    out = B.loc2bbox(anchors, np.array([[0.0, 0.0, 50.0, 50.0]]))
    assert np.all(np.isfinite(out))
    # width capped at 16 * exp(DELTA_CLIP) = 1000
    assert out[0, 2] - out[0, 0] == pytest.approx(1000.0)


@given(boxes_strategy(n_max=6), boxes_strategy(n_max=6))
@settings(max_examples=50, deadline=None)
def test_encode_decode_roundtrip(anchors, targets):
    n = min(len(anchors), len(targets))
    if n == 0:
        return
    a, t = anchors[:n], targets[:n]
    deltas = B.bbox2loc(a, t)
    # identity holds only below the decode growth cap
    assume(np.all(deltas[:, 2:] < B.DELTA_CLIP - 1e-9))
    back = B.loc2bbox(a, deltas)
    assert np.allclose(back, t, rtol=1e-9, atol=1e-6)


def test_clip_boxes():
    bxs = np.array([[-5.0, -3.0, 200.0, 40.0], [10.0, 10.0, 20.0, 20.0]])
    out = B.clip_boxes(bxs, height=50.0, width=100.0)
    assert out[0].tolist() == [0.0, 0.0, 100.0, 40.0]
    assert out[1].tolist() == [10.0, 10.0, 20.0, 20.0]
    assert bxs[0, 0] == -5.0  # input untouched


# -- anchors ------------------------------------------------------------

def test_base_anchors_geometry():
    scales, ratios = (16.0, 32.0), (0.5, 1.0, 2.0)
    out = B.base_anchors(scales, ratios)
    assert out.shape == (6, 4)
    for i, s in enumerate(scales):
        for j, r in enumerate(ratios):
            x1, y1, x2, y2 = out[i * len(ratios) + j]
            w, h = x2 - x1, y2 - y1
            assert w * h == pytest.approx(s * s)     # area preserved
            assert h / w == pytest.approx(r)          # aspect = ratio
            assert (x1 + x2, y1 + y2) == pytest.approx((0.0, 0.0))  # centered


def test_grid_anchors_layout():
    scales, ratios = (16.0,), (1.0,)
    out = B.grid_anchors(2, 3, 8, scales, ratios)
    assert out.shape == (6, 4)
    # (row, col, anchor) flattening: index = (row * W + col) * A
    cx = 0.5 * (out[:, 0] + out[:, 2])
    cy = 0.5 * (out[:, 1] + out[:, 3])
    expect = [(c + 0.5) * 8 for c in range(3)]
    assert cx.tolist() == pytest.approx(expect * 2)
    assert cy.tolist() == pytest.approx([4.0] * 3 + [12.0] * 3)


def test_grid_anchors_per_cell_block():
    scales, ratios = (16.0, 32.0, 64.0), (0.5, 1.0, 2.0)
    out = B.grid_anchors(4, 5, 8, scales, ratios)
    assert out.shape == (4 * 5 * 9, 4)
    base = B.base_anchors(scales, ratios)
    # block for cell (row 2, col 3) is the base set shifted to its center
    k = (2 * 5 + 3) * 9
    center = np.array([(3 + 0.5) * 8, (2 + 0.5) * 8] * 2)
    assert np.allclose(out[k : k + 9], base + center)
