import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wxalign.detect import (
    Detection,
    DetectLossConfig,
    box_iou,
    decode,
    detection_loss,
    encode,
    head_forward,
    init_head,
    nms,
)
from wxalign.gradcheck import check_detection_loss, check_head
from wxalign.nnet import ShapeError
from wxalign.synthdata import GroundTruth


# --- head --------------------------------------------------------------------


def test_head_zero_everything():
    params = {"head.weight": np.zeros((8, 1, 1, 4)), "head.bias": np.zeros(8)}
    grid, _ = head_forward(np.zeros((2, 5, 5, 4)), params)
    assert grid.shape == (2, 5, 5, 8)
    assert not grid.any()


def test_head_shape():
    params = init_head(64, 3, np.random.default_rng(0))
    grid, _ = head_forward(np.zeros((1, 16, 16, 64), np.float32), params)
    assert grid.shape == (1, 16, 16, 8)


def test_head_channel_mismatch():
    params = init_head(8, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        head_forward(np.zeros((1, 4, 4, 6)), params)


@pytest.mark.parametrize("seed", range(5))
def test_head_fd(seed):
    assert check_head(seed) <= 1e-4


# --- decode ------------------------------------------------------------------


def test_decode_negative_objectness_is_empty():
    grid = np.zeros((4, 4, 8))
    grid[..., 4] = -50
    assert decode(grid, 0.05) == []


def test_decode_cell_center_and_anchor_size():
    grid = np.zeros((4, 4, 8))
    grid[..., 4] = -50
    grid[1, 2, 4] = 50
    grid[1, 2, 6] = 10
    (d,) = decode(grid, 0.25, anchor=(0.3, 0.2))
    assert d.class_id == 1
    assert d.box[0] == pytest.approx((2 + 0.5) / 4)
    assert d.box[1] == pytest.approx((1 + 0.5) / 4)
    assert d.box[2:] == pytest.approx((0.3, 0.2))


def test_decode_confidence_is_product():
    grid = np.zeros((1, 1, 7))
    grid[0, 0, 4] = 0.7
    grid[0, 0, 5:] = [0.1, 0.9]
    (d,) = decode(grid, 0.0)
    p_obj = 1 / (1 + math.exp(-0.7))
    p_cls = math.exp(0.9) / (math.exp(0.1) + math.exp(0.9))
    assert d.confidence == pytest.approx(p_obj * p_cls, rel=1e-12)


gt_strategy = st.builds(
    lambda k, cx, cy, w, h: GroundTruth(k, (cx, cy, w, h)),
    st.integers(0, 2),
    st.floats(0.01, 0.99),
    st.floats(0.01, 0.99),
    st.floats(0.02, 0.9),
    st.floats(0.02, 0.9),
)


@settings(max_examples=80, deadline=None)
@given(st.lists(gt_strategy, max_size=5))
def test_encode_decode_round_trip(gts):
    s = 8
    grid = encode(gts, s, 3)
    dets = decode(grid, 0.5)
    # one survivor per occupied cell: the largest box there
    by_cell = {}
    for g in gts:
        cell = (min(int(g.box[1] * s), s - 1), min(int(g.box[0] * s), s - 1))
        if cell not in by_cell or g.box[2] * g.box[3] > by_cell[cell].box[2] * by_cell[cell].box[3]:
            by_cell[cell] = g
    assert len(dets) == len(by_cell)
    expected = sorted(by_cell.values(), key=lambda g: g.box)
    for g, d in zip(expected, sorted(dets, key=lambda d: d.box)):
        assert d.class_id == g.class_id
        assert np.allclose(d.box, g.box, atol=1e-6, rtol=0)


def test_detection_json_round_trip():
    d = Detection(2, 0.75, (0.5, 0.25, 0.125, 0.0625))
    assert Detection.from_json(d.to_json()) == d
    assert set(json.loads(d.to_json())) == {"class", "conf", "box"}


# --- loss --------------------------------------------------------------------


def test_loss_no_gts_negative_objectness():
    grid = np.zeros((1, 4, 4, 8))
    grid[..., 4] = -40
    loss, _ = detection_loss(grid, [[]])
    assert 0 <= loss < 1e-15


def test_loss_perfect_prediction_is_near_zero():
    gts = [GroundTruth(1, (0.3, 0.6, 0.2, 0.25)), GroundTruth(0, (0.8, 0.1, 0.1, 0.1))]
    grid = encode(gts, 4, 3, saturation=40.0)[None]
    loss, grad = detection_loss(grid, [gts])
    assert loss < 1e-12
    assert np.abs(grad).max() < 1e-12


def test_loss_rejects_boxes_outside():
    with pytest.raises(ValueError):
        detection_loss(np.zeros((1, 4, 4, 8)), [[GroundTruth(0, (1.5, 0.5, 0.1, 0.1))]])


def test_loss_drops_smaller_gt_in_shared_cell():
    big = GroundTruth(0, (0.30, 0.30, 0.2, 0.2))
    small = GroundTruth(1, (0.31, 0.31, 0.1, 0.1))
    grid = np.random.default_rng(0).normal(size=(1, 2, 2, 8))
    assert detection_loss(grid, [[big, small]])[0] == detection_loss(grid, [[big]])[0]
    assert detection_loss(grid, [[small, big]])[0] == detection_loss(grid, [[big]])[0]


def test_loss_weights_must_be_positive():
    with pytest.raises(ValueError):
        DetectLossConfig(box_weight=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(gt_strategy, max_size=4))
def test_loss_non_negative(seed, gts):
    grid = np.random.default_rng(seed).normal(scale=3, size=(1, 4, 4, 8))
    assert detection_loss(grid, [gts])[0] >= 0


@pytest.mark.parametrize("seed", range(5))
def test_loss_fd(seed):
    assert check_detection_loss(seed) <= 1e-4


# --- NMS ---------------------------------------------------------------------


def test_nms_identical_boxes_same_class():
    a = Detection(0, 0.9, (0.5, 0.5, 0.2, 0.2))
    b = Detection(0, 0.8, (0.5, 0.5, 0.2, 0.2))
    assert nms([b, a]) == [a]


def test_nms_identical_boxes_different_class():
    a = Detection(0, 0.9, (0.5, 0.5, 0.2, 0.2))
    b = Detection(1, 0.8, (0.5, 0.5, 0.2, 0.2))
    assert nms([b, a]) == [a, b]


def test_nms_chain():
    # a overlaps b, b overlaps c, a does not overlap c: greedy keeps a and c
    a = Detection(0, 0.9, (0.30, 0.5, 0.2, 0.2))
    b = Detection(0, 0.8, (0.35, 0.5, 0.2, 0.2))
    c = Detection(0, 0.7, (0.40, 0.5, 0.2, 0.2))
    assert box_iou(a.box, b.box) > 0.45 and box_iou(b.box, c.box) > 0.45 and box_iou(a.box, c.box) < 0.45
    assert nms([c, b, a]) == [a, c]


def nms_oracle(dets, thr):
    """The unique subset where each detection is kept iff no kept, better-ranked same-class box overlaps it."""
    order = sorted(dets, key=lambda d: (-d.confidence, d.class_id, *d.box))
    solutions = []
    for mask in itertools.product([False, True], repeat=len(order)):
        ok = True
        for i, d in enumerate(order):
            blocked = any(
                mask[j] and order[j].class_id == d.class_id and box_iou(order[j].box, d.box) > thr for j in range(i)
            )
            if mask[i] == blocked:
                ok = False
                break
        if ok:
            solutions.append([d for d, m in zip(order, mask) if m])
    assert len(solutions) == 1
    return solutions[0]


det_strategy = st.builds(
    lambda k, c, x, y, w, h: Detection(k, c, (x, y, w, h)),
    st.integers(0, 1),
    st.sampled_from([0.3, 0.5, 0.7, 0.9]),
    st.floats(0.2, 0.8),
    st.floats(0.2, 0.8),
    st.floats(0.05, 0.4),
    st.floats(0.05, 0.4),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(det_strategy, max_size=6), st.randoms(use_true_random=False))
def test_nms_matches_exhaustive_oracle(dets, rnd):
    expected = nms_oracle(dets, 0.45)
    assert nms(dets) == expected
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    out = nms(shuffled)
    assert out == expected
    assert all(d in dets for d in out)
    assert [d.confidence for d in out] == sorted((d.confidence for d in out), reverse=True)
