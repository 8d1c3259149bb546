"""Detection machinery: anchors, assignment, box coding, losses, NMS."""

import math

import numpy as np
import pytest

from ts3d import ops
from ts3d.detect import (
    BACKGROUND,
    IGNORE,
    AnchorTemplate,
    DetectionHead,
    assign_targets,
    build_targets,
    canonical_alpha,
    decode_box,
    decode_orientation,
    encode_box,
    encode_orientation,
    focal_loss,
    generate_anchors,
    iou_axis_aligned,
    layer_detection_loss,
    nms_2d,
    orientation_bce,
    smooth_l1,
    total_loss,
    wrap_angle,
)
from ts3d.gradcheck import grad_check
from ts3d.tensor import Tensor, no_grad

CAR = AnchorTemplate(class_id=0, w2d=34.0, h2d=28.0, z=9.0, w=1.7, h=1.5, l=3.9)


# ---------------------------------------------------------------------------
# anchors


def test_anchor_count_full_scale():
    anchors = generate_anchors(80, 18, 16, [CAR])
    assert len(anchors) == 1440


def test_anchor_center_first_cell():
    anchors = generate_anchors(80, 18, 16, [CAR])
    assert np.allclose(anchors.boxes[0, :2], [8.0, 8.0])


def test_anchor_count_desk_grid():
    anchors = generate_anchors(4, 2, 16, [CAR])
    assert len(anchors) == 8


def test_anchor_centers_coincide_with_reference_points():
    from ts3d.decoder import reference_points

    anchors = generate_anchors(6, 4, 16, [CAR])
    refs = reference_points(6, 4)
    assert np.allclose(anchors.boxes[:, 0], refs[:, 0] * 6 * 16)
    assert np.allclose(anchors.boxes[:, 1], refs[:, 1] * 4 * 16)


# ---------------------------------------------------------------------------
# assignment


def test_assign_exact_match_positive():
    anchors = np.array([[10.0, 10.0, 40.0, 40.0]])
    gts = anchors.copy()
    labels = assign_targets(anchors, gts)
    assert labels[0] == 0


def test_assign_disjoint_negative():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
    gts = np.array([[50.0, 50.0, 80.0, 80.0]])
    labels = assign_targets(anchors, gts)
    assert labels[0] == BACKGROUND


def test_assign_band_is_ignored():
    # IoU of 0.45 falls between tau_bg=0.4 and tau_fg=0.5
    anchors = np.array([[0.0, 0.0, 100.0, 45.0]])
    gts = np.array([[0.0, 0.0, 100.0, 100.0]])
    iou = iou_axis_aligned(anchors, gts)[0, 0]
    assert 0.4 < iou < 0.5
    labels = assign_targets(anchors, gts, tau_fg=0.5, tau_bg=0.4)
    assert labels[0] == IGNORE


def test_assign_monotone_in_tau_fg():
    rng = np.random.default_rng(0)
    anchors = np.stack([
        rng.uniform(0, 60, 40), rng.uniform(0, 60, 40),
        rng.uniform(60, 120, 40), rng.uniform(60, 120, 40)], axis=1)
    gts = np.array([[20.0, 20.0, 80.0, 80.0], [40.0, 10.0, 100.0, 60.0]])
    pos_counts = []
    for tau in (0.3, 0.5, 0.7, 0.9):
        labels = assign_targets(anchors, gts, tau_fg=tau, tau_bg=0.2)
        pos_counts.append((labels >= 0).sum())
    assert all(a >= b for a, b in zip(pos_counts, pos_counts[1:]))


def test_assign_ensure_matches_rescues_small_gt():
    anchors = np.array([[0.0, 0.0, 32.0, 32.0], [32.0, 0.0, 64.0, 32.0]])
    gts = np.array([[40.0, 4.0, 52.0, 20.0]])  # IoU too small for tau_fg
    base = assign_targets(anchors, gts, ensure_matches=False)
    assert (base < 0).all()
    forced = assign_targets(anchors, gts, ensure_matches=True)
    assert forced[1] == 0


# ---------------------------------------------------------------------------
# box coding


def _calib():
    return 200.0, 127.5, 63.5  # f, cx, cy


def _random_gt(rng, f, cx, cy):
    z = rng.uniform(5.0, 30.0)
    x = rng.uniform(-0.05, 0.05) * z * 10
    y = 1.5
    h, w, l = rng.uniform(1.2, 1.9), rng.uniform(1.5, 2.0), rng.uniform(3.2, 4.5)
    ry = rng.uniform(-math.pi, math.pi)
    u = f * x / z + cx
    v = f * (y - h / 2) / z + cy
    w2 = f * w / z
    h2 = f * h / z
    return {
        "class_id": 0,
        "box2d": np.array([u - w2 / 2, v - h2 / 2, u + w2 / 2, v + h2 / 2]),
        "location": (x, y, z),
        "dims": (h, w, l),
        "ry": ry,
    }


def test_zero_offsets_identity_decode():
    f, cx, cy = _calib()
    anchor_box = np.array([72.0, 40.0, 34.0, 28.0])
    prior = np.array([9.0, 1.7, 1.5, 3.9])
    offsets = np.zeros(13)
    offsets[11] = 1.0  # cos 2a
    offsets[12] = 1.0  # branch prob
    det = decode_box(anchor_box, prior, offsets, f, cx, cy)
    assert np.allclose(det.box2d, [72 - 17, 40 - 14, 72 + 17, 40 + 14])
    assert det.z == pytest.approx(9.0)
    assert (det.w, det.h, det.l) == (pytest.approx(1.7), pytest.approx(1.5), pytest.approx(3.9))
    assert det.alpha == pytest.approx(0.0)


def test_principal_point_back_projects_to_centered_ray():
    f, cx, cy = _calib()
    anchor_box = np.array([cx, cy, 30.0, 24.0])
    prior = np.array([10.0, 1.7, 1.5, 3.9])
    offsets = np.zeros(13)
    offsets[11] = 1.0
    offsets[12] = 1.0
    det = decode_box(anchor_box, prior, offsets, f, cx, cy)
    assert det.z == pytest.approx(10.0)
    assert det.x == pytest.approx(0.0, abs=1e-12)


def test_bad_calibration_rejected():
    with pytest.raises(ValueError):
        decode_box(np.zeros(4) + 1, np.ones(4), np.zeros(13), 0.0, 0.0, 0.0)


def test_encode_decode_roundtrip_100_boxes():
    rng = np.random.default_rng(1)
    f, cx, cy = _calib()
    for _ in range(100):
        gt = _random_gt(rng, f, cx, cy)
        x1, y1, x2, y2 = gt["box2d"]
        anchor_box = np.array([
            (x1 + x2) / 2 + rng.uniform(-4, 4),
            (y1 + y2) / 2 + rng.uniform(-4, 4),
            (x2 - x1) * rng.uniform(0.8, 1.25),
            (y2 - y1) * rng.uniform(0.8, 1.25),
        ])
        prior = np.array([gt["location"][2] * rng.uniform(0.7, 1.4), 1.7, 1.5, 3.9])
        off = encode_box(anchor_box, prior, gt, f, cx, cy)
        det = decode_box(anchor_box, prior, off, f, cx, cy)
        assert np.allclose(det.box2d, gt["box2d"], atol=1e-6)
        assert np.allclose((det.x, det.y, det.z), gt["location"], atol=1e-6)
        assert np.allclose((det.h, det.w, det.l), gt["dims"], atol=1e-6)
        # orientation is coded modulo pi (footprint identity)
        assert math.sin(2 * det.ry) == pytest.approx(math.sin(2 * gt["ry"]), abs=1e-6)
        assert math.cos(2 * det.ry) == pytest.approx(math.cos(2 * gt["ry"]), abs=1e-6)


def test_offset_roundtrip_canonical_vectors():
    rng = np.random.default_rng(2)
    f, cx, cy = _calib()
    anchor_box = np.array([100.0, 60.0, 30.0, 24.0])
    prior = np.array([12.0, 1.7, 1.5, 3.9])
    for _ in range(50):
        psi = rng.uniform(-math.pi / 4, math.pi / 4 - 1e-6)
        branch = float(rng.integers(0, 2))
        t = np.concatenate([
            rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.3, 0.3, 2),
            rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.4, 0.4, 4),
            [math.sin(2 * psi), math.cos(2 * psi), branch],
        ])
        det = decode_box(anchor_box, prior, t, f, cx, cy)
        gt = {
            "class_id": 0,
            "box2d": det.box2d,
            "location": (det.x, det.y, det.z),
            "dims": (det.h, det.w, det.l),
            "ry": det.ry,
        }
        back = encode_box(anchor_box, prior, gt, f, cx, cy)
        assert np.allclose(back, t, atol=1e-6)


def test_orientation_coding_cases():
    for alpha in (-0.7, 0.0, 0.4, 1.2, 2.9, -2.2):
        s, c, b = encode_orientation(alpha)
        rec = decode_orientation(s, c, b)
        assert canonical_alpha(rec) == pytest.approx(canonical_alpha(alpha), abs=1e-12)


# ---------------------------------------------------------------------------
# heads


def test_head_output_shapes_two_classes():
    rng = np.random.default_rng(3)
    head = DetectionHead(rng, c_dec=16, n_classes=2, anchors_per_cell=1)
    q = Tensor(rng.normal(size=(1440, 16)).astype(np.float32))
    with no_grad():
        cls, reg = head.forward(q)
    assert cls.shape == (1440, 3)  # two classes + background
    assert reg.shape == (1440, 13)


def test_head_anchor_multiplicity():
    rng = np.random.default_rng(4)
    head = DetectionHead(rng, c_dec=8, n_classes=1, anchors_per_cell=3)
    q = Tensor(rng.normal(size=(10, 8)).astype(np.float32))
    with no_grad():
        cls, reg = head.forward(q)
    assert cls.shape == (10, 2)
    assert reg.shape == (30, 13)


def test_head_gradcheck():
    rng = np.random.default_rng(5)
    head = DetectionHead(rng, c_dec=6, n_classes=1, anchors_per_cell=1, dtype=np.float64)
    head.reg_out.w.data[:] = 0.1 * rng.normal(size=head.reg_out.w.data.shape)
    q = Tensor(rng.normal(size=(4, 6)), dtype=np.float64, requires_grad=True)
    p1 = Tensor(np.random.default_rng(6).normal(size=(4, 2)), dtype=np.float64)
    p2 = Tensor(np.random.default_rng(7).normal(size=(4, 13)), dtype=np.float64)

    def f(q_):
        cls, reg = head.forward(q_)
        return ops.add(ops.sum_(ops.mul(cls, p1)), ops.sum_(ops.mul(reg, p2)))

    assert grad_check(f, [q], eps=1e-6) < 1e-5


# ---------------------------------------------------------------------------
# losses


def test_focal_loss_golden_values():
    assert focal_loss(Tensor(np.array([1.0 - 1e-9])), np.array([1.0])).item() == pytest.approx(0.0, abs=1e-6)
    val = focal_loss(Tensor(np.array([0.5]), dtype=np.float64), np.array([1.0])).item()
    assert val == pytest.approx(-20.0 * 0.25 * math.log(0.5), abs=1e-9)
    assert val == pytest.approx(3.4657, abs=1e-3)
    assert focal_loss(Tensor(np.array([1e-9])), np.array([0.0])).item() == pytest.approx(0.0, abs=1e-6)


def test_focal_loss_monotonicity():
    ps = np.linspace(0.02, 0.98, 25)
    pos = [focal_loss(Tensor(np.array([p]), dtype=np.float64), np.array([1.0])).item() for p in ps]
    neg = [focal_loss(Tensor(np.array([p]), dtype=np.float64), np.array([0.0])).item() for p in ps]
    assert all(a >= b for a, b in zip(pos, pos[1:]))  # nonincreasing for target 1
    assert all(a <= b for a, b in zip(neg, neg[1:]))  # nondecreasing for target 0


def test_focal_loss_gradcheck():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(0.1, 0.9, size=(6,)), dtype=np.float64, requires_grad=True)
    t = (rng.uniform(size=6) > 0.5).astype(np.float64)

    def f(x_):
        return focal_loss(x_, t)

    assert grad_check(f, [x], eps=1e-6) < 1e-6


def test_smooth_l1_golden_values():
    z = smooth_l1(Tensor(np.array([2.0]), dtype=np.float64), np.array([2.0]))
    assert z.item() == 0.0
    at_break = smooth_l1(Tensor(np.array([0.04]), dtype=np.float64), np.array([0.0]))
    assert at_break.item() == pytest.approx(0.02, abs=1e-12)
    at_one = smooth_l1(Tensor(np.array([1.0]), dtype=np.float64), np.array([0.0]))
    assert at_one.item() == pytest.approx(0.98, abs=1e-12)


def test_smooth_l1_gradcheck():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(8,)), dtype=np.float64, requires_grad=True)
    t = rng.normal(size=8)

    def f(x_):
        return smooth_l1(x_, t, beta=0.04)

    assert grad_check(f, [x], eps=1e-7) < 1e-5


def test_orientation_bce_golden_values():
    assert orientation_bce(Tensor(np.array([1.0 - 1e-9])), np.array([1.0])).item() == pytest.approx(0.0, abs=1e-6)
    val = orientation_bce(Tensor(np.array([0.5]), dtype=np.float64), np.array([1.0])).item()
    assert val == pytest.approx(-(1 - 0.5) * math.log(0.5), abs=1e-9)
    assert val == pytest.approx(0.3466, abs=1e-4)
    # symmetric treatment of the zero branch
    val0 = orientation_bce(Tensor(np.array([0.5]), dtype=np.float64), np.array([0.0])).item()
    assert val0 == pytest.approx(val, abs=1e-12)


def test_orientation_bce_finite_at_clamp():
    for p in (0.0, 1.0):
        for t in (0.0, 1.0):
            v = orientation_bce(Tensor(np.array([p]), dtype=np.float64), np.array([t])).item()
            assert np.isfinite(v)


# ---------------------------------------------------------------------------
# layer losses and the total


def _toy_targets():
    anchors = generate_anchors(4, 2, 16, [CAR])
    f, cx, cy = _calib()
    gt = {
        "class_id": 0,
        "box2d": np.array([30.0, 10.0, 70.0, 40.0]),
        "location": (0.5, 1.5, 9.0),
        "dims": (1.5, 1.7, 3.9),
        "ry": 0.3,
    }
    return anchors, build_targets(anchors, [gt], f, cx, cy, n_classes=1)


def test_build_targets_produces_positive():
    _, targets = _toy_targets()
    assert targets.n_objects == 1
    assert len(targets.pos_rows) >= 1
    assert targets.offsets.shape == (len(targets.pos_rows), 13)


def test_total_loss_zero_sublosses():
    zero = Tensor(np.zeros(1))
    out = total_loss([(zero, zero, zero)], zero, n_objects=1)
    assert out.item() == 0.0


def test_total_loss_doubles_with_layer_count():
    rng = np.random.default_rng(10)
    parts = tuple(Tensor(np.array([v]), dtype=np.float64) for v in rng.uniform(0.5, 2.0, 3))
    disp = Tensor(np.array([0.7]), dtype=np.float64)
    one = total_loss([parts], disp, n_objects=2).item()
    two = total_loss([parts, parts], disp, n_objects=2).item()
    assert two - disp.item() == pytest.approx(2 * (one - disp.item()), rel=1e-12)


def test_empty_frame_contributes_classification_only():
    anchors = generate_anchors(4, 2, 16, [CAR])
    f, cx, cy = _calib()
    targets = build_targets(anchors, [], f, cx, cy, n_classes=1)
    assert targets.n_objects == 0
    rng = np.random.default_rng(11)
    cls = Tensor(rng.normal(size=(8, 2)), dtype=np.float64)
    reg = Tensor(rng.normal(size=(8, 13)), dtype=np.float64)
    cls_l, reg_l, orient_l = layer_detection_loss(cls, reg, targets)
    assert cls_l.item() > 0
    assert reg_l.item() == 0.0 and orient_l.item() == 0.0


def test_layer_loss_gradients_reach_queries():
    rng = np.random.default_rng(12)
    anchors, targets = _toy_targets()
    head = DetectionHead(rng, c_dec=8, n_classes=1, anchors_per_cell=1, dtype=np.float64)
    q = Tensor(rng.normal(size=(8, 8)), dtype=np.float64, requires_grad=True)
    cls, reg = head.forward(q)
    losses = layer_detection_loss(cls, reg, targets)
    total = total_loss([losses], Tensor(np.zeros(1, dtype=np.float64)), targets.n_objects)
    total.backward()
    assert q.grad is not None and np.abs(q.grad).max() > 0


# ---------------------------------------------------------------------------
# NMS


def test_nms_identical_boxes_keep_one():
    boxes = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
    keep = nms_2d(boxes, np.array([0.9, 0.8]), iou_threshold=0.4)
    assert keep == [0]


def test_nms_disjoint_boxes_all_survive():
    boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [40, 0, 50, 10]], dtype=float)
    keep = nms_2d(boxes, np.array([0.5, 0.9, 0.7]), iou_threshold=0.4)
    assert sorted(keep) == [0, 1, 2]


def _nms_reference(boxes, scores, thr):
    """Independent quadratic reference."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep, dead = [], set()
    for i in order:
        if i in dead:
            continue
        keep.append(i)
        for j in order:
            if j in dead or j == i:
                continue
            iou = iou_axis_aligned(boxes[i][None], boxes[j][None])[0, 0]
            if iou > thr:
                dead.add(j)
    return keep


def test_nms_matches_brute_force_on_200_boxes():
    rng = np.random.default_rng(13)
    x = rng.uniform(0, 80, 200)
    y = rng.uniform(0, 40, 200)
    w = rng.uniform(5, 25, 200)
    h = rng.uniform(5, 25, 200)
    boxes = np.stack([x, y, x + w, y + h], axis=1)
    scores = rng.uniform(size=200)
    assert nms_2d(boxes, scores, 0.4) == _nms_reference(boxes, scores, 0.4)
