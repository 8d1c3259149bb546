"""Anchors, target assignment, box coding, detection losses, and 2D NMS.

Anchors tile the stride-16 query grid; their centers coincide with the
decoder reference points. Each anchor carries a 2D box template plus 3D
priors (mean distance and mean metric size, estimated from training labels).
The regression head predicts a 13-dim offset vector per anchor:

    (du2d, dv2d, dw2d, dh2d, du3d, dv3d, dz, dw, dh, dl, sin2a, cos2a, c_a)

Positions are offsets relative to the anchor box, sizes and distance are
log-ratios against the priors, and orientation encodes the viewing-angle
footprint (period pi) with c_a selecting between the two quarter-turn
branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import Linear
from .tensor import Module, Tensor

HALF_PI = math.pi / 2.0
QUARTER_PI = math.pi / 4.0


# ---------------------------------------------------------------------------
# anchors


@dataclass
class AnchorTemplate:
    """Per-class, per-scale box prior: 2D size in pixels, 3D priors in meters."""

    class_id: int
    w2d: float
    h2d: float
    z: float
    w: float
    h: float
    l: float


@dataclass
class AnchorSet:
    boxes: np.ndarray       # (Na, 4) center-size (u, v, w2d, h2d), pixels
    class_ids: np.ndarray   # (Na,)
    priors: np.ndarray      # (Na, 4): z, w, h, l
    per_cell: int
    wq: int
    hq: int
    stride: int

    def __len__(self):
        return len(self.boxes)

    def corners(self) -> np.ndarray:
        b = self.boxes
        return np.stack(
            [b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2,
             b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1
        )


def generate_anchors(wq: int, hq: int, stride: int, templates) -> AnchorSet:
    """One anchor per (grid cell, template); cell-major, template-minor order."""
    per_cell = len(templates)
    centers_u = (np.arange(wq) + 0.5) * stride
    centers_v = (np.arange(hq) + 0.5) * stride
    gu, gv = np.meshgrid(centers_u, centers_v)
    cells = np.stack([gu.reshape(-1), gv.reshape(-1)], axis=1)  # (Nq, 2)
    boxes = np.empty((wq * hq * per_cell, 4), dtype=np.float64)
    cls = np.empty(wq * hq * per_cell, dtype=np.int64)
    priors = np.empty((wq * hq * per_cell, 4), dtype=np.float64)
    for a, t in enumerate(templates):
        boxes[a::per_cell, 0] = cells[:, 0]
        boxes[a::per_cell, 1] = cells[:, 1]
        boxes[a::per_cell, 2] = t.w2d
        boxes[a::per_cell, 3] = t.h2d
        cls[a::per_cell] = t.class_id
        priors[a::per_cell] = (t.z, t.w, t.h, t.l)
    return AnchorSet(boxes=boxes, class_ids=cls, priors=priors,
                     per_cell=per_cell, wq=wq, hq=hq, stride=stride)


# ---------------------------------------------------------------------------
# assignment


def iou_axis_aligned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N,4) and (M,4) corner boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


BACKGROUND = -1
IGNORE = -2


def assign_targets(anchor_corners: np.ndarray, gt_corners: np.ndarray,
                   tau_fg: float = 0.5, tau_bg: float = 0.4,
                   ensure_matches: bool = False) -> np.ndarray:
    """Label each anchor: matched gt index, BACKGROUND, or IGNORE.

    IoU > tau_fg assigns the anchor to its best-overlap ground truth;
    IoU < tau_bg marks background; the band between is ignored. With
    ``ensure_matches`` every ground truth lacking a positive additionally
    claims its best-overlap anchor (training-enablement extension).
    """
    n = len(anchor_corners)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    if len(gt_corners) == 0:
        return labels
    iou = iou_axis_aligned(anchor_corners, gt_corners)
    best = iou.max(axis=1)
    best_gt = iou.argmax(axis=1)
    labels[best >= tau_bg] = IGNORE
    labels[best > tau_fg] = best_gt[best > tau_fg]
    if ensure_matches:
        for g in range(len(gt_corners)):
            if not (labels[labels >= 0] == g).any():
                order = np.argsort(-iou[:, g])
                for a in order:
                    if iou[a, g] <= 0.01:
                        break
                    if labels[a] < 0:  # do not steal another gt's anchor
                        labels[a] = g
                        break
    return labels


# ---------------------------------------------------------------------------
# orientation coding


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return float(-((-a + math.pi) % (2.0 * math.pi) - math.pi))


def canonical_alpha(alpha: float) -> float:
    """Footprint representative of alpha modulo pi, in [-pi/4, 3pi/4)."""
    return float((alpha + QUARTER_PI) % math.pi - QUARTER_PI)


def encode_orientation(alpha: float):
    """(sin 2psi, cos 2psi, branch): branch 1 keeps psi = alpha, branch 0
    stores psi = alpha - pi/2; psi always falls in [-pi/4, pi/4)."""
    a = canonical_alpha(alpha)
    if a < QUARTER_PI:
        branch, psi = 1.0, a
    else:
        branch, psi = 0.0, a - HALF_PI
    return math.sin(2.0 * psi), math.cos(2.0 * psi), branch


def decode_orientation(sin2a: float, cos2a: float, c_alpha: float) -> float:
    psi = 0.5 * math.atan2(sin2a, cos2a)
    return psi if c_alpha > 0.5 else psi + HALF_PI


# ---------------------------------------------------------------------------
# box coding


@dataclass
class Detection3D:
    class_id: int
    score: float
    x: float
    y: float           # bottom-center, camera coords (y down)
    z: float
    w: float
    h: float
    l: float
    ry: float
    box2d: np.ndarray  # (4,) corners x1, y1, x2, y2
    alpha: float = 0.0


def _project_center(x, y_bottom, z, h, f, cx, cy):
    yc = y_bottom - h / 2.0
    return f * x / z + cx, f * yc / z + cy


def encode_box(anchor_box, anchor_prior, gt, f, cx, cy) -> np.ndarray:
    """13-dim regression target for one (anchor, ground-truth) pair.

    ``gt`` carries corner box2d, location (x, y, z), dims (h, w, l), ry.
    """
    ua, va, wa, ha = anchor_box
    za, wpr, hpr, lpr = anchor_prior
    x1, y1, x2, y2 = gt["box2d"]
    ug, vg = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    wg, hg = max(x2 - x1, 1e-3), max(y2 - y1, 1e-3)
    x, y, z = gt["location"]
    hh, ww, ll = gt["dims"]
    u3, v3 = _project_center(x, y, z, hh, f, cx, cy)
    alpha = wrap_angle(gt["ry"] - math.atan2(x, z))
    s2, c2, branch = encode_orientation(alpha)
    return np.array([
        (ug - ua) / wa,
        (vg - va) / ha,
        math.log(wg / wa),
        math.log(hg / ha),
        (u3 - ua) / wa,
        (v3 - va) / ha,
        math.log(z / za),
        math.log(ww / wpr),
        math.log(hh / hpr),
        math.log(ll / lpr),
        s2,
        c2,
        branch,
    ], dtype=np.float64)


def decode_box(anchor_box, anchor_prior, offsets, f, cx, cy,
               class_id: int = 0, score: float = 1.0) -> Detection3D:
    """Invert encode_box; c_alpha arrives as a probability in [0, 1]."""
    if not np.isfinite(f) or f <= 0:
        raise ValueError("calibration focal length must be positive and finite")
    ua, va, wa, ha = anchor_box
    za, wpr, hpr, lpr = anchor_prior
    o = np.asarray(offsets, dtype=np.float64)
    u2 = ua + o[0] * wa
    v2 = va + o[1] * ha
    w2 = wa * math.exp(o[2])
    h2 = ha * math.exp(o[3])
    u3 = ua + o[4] * wa
    v3 = va + o[5] * ha
    z = za * math.exp(o[6])
    w = wpr * math.exp(o[7])
    h = hpr * math.exp(o[8])
    l = lpr * math.exp(o[9])
    x = (u3 - cx) * z / f
    yc = (v3 - cy) * z / f
    y = yc + h / 2.0
    alpha = decode_orientation(o[10], o[11], o[12])
    ry = wrap_angle(alpha + math.atan2(x, z))
    box2d = np.array([u2 - w2 / 2, v2 - h2 / 2, u2 + w2 / 2, v2 + h2 / 2])
    return Detection3D(class_id=class_id, score=score, x=x, y=y, z=z,
                       w=w, h=h, l=l, ry=ry, box2d=box2d,
                       alpha=wrap_angle(alpha))


# ---------------------------------------------------------------------------
# heads


class DetectionHead(Module):
    """Shared classification / regression stacks applied to every decoder layer.

    Classification emits K+1 sigmoid channels per query cell (the extra
    channel is background); regression emits 13 offsets per anchor. The
    class-channel biases start at the usual rare-foreground prior so early
    focal losses stay tame.
    """

    def __init__(self, rng, c_dec, n_classes, anchors_per_cell, dtype=np.float32):
        super().__init__()
        self.n_classes = n_classes
        self.anchors_per_cell = anchors_per_cell
        prior_bias = -math.log((1.0 - 0.01) / 0.01)
        self.cls_fc = Linear(rng, c_dec, c_dec, dtype=dtype)
        self.cls_out = Linear(rng, c_dec, n_classes + 1, dtype=dtype)
        self.cls_out.b.data[:n_classes] = prior_bias
        self.cls_out.b.data[n_classes] = -prior_bias  # background starts likely
        self.reg_fc = Linear(rng, c_dec, c_dec, dtype=dtype)
        self.reg_out = Linear(rng, c_dec, anchors_per_cell * 13, dtype=dtype, init="zero")

    def forward(self, queries: Tensor):
        nq = queries.shape[0]
        cls = self.cls_out.forward(ops.relu(self.cls_fc.forward(queries)))
        reg = self.reg_out.forward(ops.relu(self.reg_fc.forward(queries)))
        return cls, ops.reshape(reg, (nq * self.anchors_per_cell, 13))


# ---------------------------------------------------------------------------
# losses


def focal_loss(p_hat: Tensor, targets: np.ndarray, alpha: float = 20.0,
               gamma: float = 2.0, weights: np.ndarray | None = None,
               reduction: str = "sum") -> Tensor:
    """Piecewise focal loss on probabilities.

    target 1: -alpha * (1 - p)^gamma * log(p);  target 0: -p^gamma * log(1 - p).
    ``weights`` zeroes out ignored entries.
    """
    eps = 1e-7
    targets = np.asarray(targets)
    p = ops.clamp(p_hat, eps, 1.0 - eps)
    one_minus = ops.sub(Tensor(np.ones(1, dtype=p.dtype)), p)
    pos = ops.scale(ops.mul(ops.pow_const(one_minus, gamma), ops.log(p)), -alpha)
    neg = ops.neg(ops.mul(ops.pow_const(p, gamma), ops.log(one_minus)))
    loss = ops.where(targets > 0.5, pos, neg)
    if weights is not None:
        loss = ops.mul(loss, Tensor(np.asarray(weights, dtype=p.dtype)))
    return ops.sum_(loss) if reduction == "sum" else loss


def smooth_l1(pred: Tensor, target, beta: float = 0.04,
              reduction: str = "sum") -> Tensor:
    """0.5 d^2 / beta below the breakpoint, |d| - beta/2 above."""
    target = target if isinstance(target, Tensor) else Tensor(
        np.asarray(target, dtype=pred.dtype))
    d = ops.sub(pred, target)
    a = ops.abs_(d)
    quad = ops.scale(ops.mul(d, d), 0.5 / beta)
    lin = ops.sub(a, Tensor(np.full(1, 0.5 * beta, dtype=pred.dtype)))
    loss = ops.where(a.data < beta, quad, lin)
    return ops.sum_(loss) if reduction == "sum" else loss


def orientation_bce(p_hat: Tensor, bin_labels: np.ndarray,
                    reduction: str = "sum") -> Tensor:
    """-(1 - p) log p on the probability assigned to the labeled branch."""
    eps = 1e-7
    labels = np.asarray(bin_labels)
    p_true = ops.where(labels > 0.5, p_hat,
                       ops.sub(Tensor(np.ones(1, dtype=p_hat.dtype)), p_hat))
    p = ops.clamp(p_true, eps, 1.0 - eps)
    loss = ops.neg(ops.mul(ops.sub(Tensor(np.ones(1, dtype=p.dtype)), p), ops.log(p)))
    return ops.sum_(loss) if reduction == "sum" else loss


@dataclass
class TargetSet:
    """Per-frame assignment products consumed by the loss."""

    anchor_labels: np.ndarray          # (Na,) gt idx / BACKGROUND / IGNORE
    cell_class: np.ndarray             # (Nq,) class id / BACKGROUND / IGNORE
    pos_rows: np.ndarray               # (P,) anchor row indices
    offsets: np.ndarray                # (P, 13)
    n_objects: int
    cls_targets: np.ndarray = field(init=False)
    cls_weights: np.ndarray = field(init=False)
    n_channels: int = 0

    def finalize(self, n_classes: int):
        nq = len(self.cell_class)
        self.n_channels = n_classes + 1
        t = np.zeros((nq, n_classes + 1), dtype=np.float64)
        w = np.ones((nq, n_classes + 1), dtype=np.float64)
        for i, c in enumerate(self.cell_class):
            if c == IGNORE:
                w[i] = 0.0
            elif c == BACKGROUND:
                t[i, n_classes] = 1.0
            else:
                t[i, c] = 1.0
        self.cls_targets = t
        self.cls_weights = w
        return self


def build_targets(anchors: AnchorSet, frame_labels, f, cx, cy,
                  tau_fg=0.5, tau_bg=0.4, ensure_matches=True,
                  n_classes=1) -> TargetSet:
    """Assign anchors to labeled objects and encode their regression targets.

    ``frame_labels`` is a list of dicts with keys class_id, box2d, location,
    dims, ry (entries with class_id < 0, e.g. DontCare, are excluded).
    """
    usable = [lb for lb in frame_labels if lb["class_id"] >= 0]
    gt_corners = np.array([lb["box2d"] for lb in usable], dtype=np.float64).reshape(-1, 4)
    labels = assign_targets(anchors.corners(), gt_corners, tau_fg, tau_bg, ensure_matches)
    # anchors whose template class disagrees with the matched gt become ignores
    for a in np.nonzero(labels >= 0)[0]:
        if anchors.class_ids[a] != usable[labels[a]]["class_id"]:
            labels[a] = IGNORE

    per = anchors.per_cell
    nq = anchors.wq * anchors.hq
    cell_class = np.full(nq, BACKGROUND, dtype=np.int64)
    lab_cells = labels.reshape(nq, per)
    for i in range(nq):
        row = lab_cells[i]
        if (row >= 0).any():
            g = row[row >= 0][0]
            cell_class[i] = usable[g]["class_id"]
        elif (row == IGNORE).any():
            cell_class[i] = IGNORE

    pos_rows = np.nonzero(labels >= 0)[0]
    offsets = np.zeros((len(pos_rows), 13), dtype=np.float64)
    for j, a in enumerate(pos_rows):
        offsets[j] = encode_box(anchors.boxes[a], anchors.priors[a],
                                usable[labels[a]], f, cx, cy)
    return TargetSet(anchor_labels=labels, cell_class=cell_class,
                     pos_rows=pos_rows, offsets=offsets,
                     n_objects=len(usable)).finalize(n_classes)


def layer_detection_loss(cls_logits: Tensor, reg_out: Tensor, targets: TargetSet,
                         alpha=20.0, gamma=2.0, beta=0.04):
    """(classification, regression, orientation) sums for one decoder layer."""
    probs = ops.sigmoid(cls_logits)
    cls_loss = focal_loss(probs, targets.cls_targets, alpha=alpha, gamma=gamma,
                          weights=targets.cls_weights)
    if len(targets.pos_rows):
        pred = ops.take_rows(reg_out, targets.pos_rows)
        reg_loss = smooth_l1(ops.narrow(pred, 1, 0, 12), targets.offsets[:, :12], beta=beta)
        branch_prob = ops.sigmoid(ops.reshape(ops.narrow(pred, 1, 12, 1),
                                              (len(targets.pos_rows),)))
        orient_loss = orientation_bce(branch_prob, targets.offsets[:, 12])
    else:
        zero = Tensor(np.zeros(1, dtype=cls_logits.dtype))
        reg_loss, orient_loss = zero, zero
    return cls_loss, reg_loss, orient_loss


def total_loss(layer_losses, disp_loss: Tensor, n_objects: int) -> Tensor:
    """Sum over decoder layers of (cls + reg + orient) / |O|, plus the
    per-pixel-averaged disparity term. Frames without objects contribute
    classification only, normalized by 1."""
    norm = 1.0 / max(n_objects, 1)
    out = disp_loss
    for cls_l, reg_l, orient_l in layer_losses:
        term = ops.scale(ops.add(ops.add(cls_l, reg_l), orient_l), norm)
        out = ops.add(out, term)
    return out


# ---------------------------------------------------------------------------
# inference


def nms_2d(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list:
    """Greedy descending-score suppression on (N,4) corner boxes."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if len(boxes) - suppressed.sum() == 1:
            break
        rest = np.nonzero(~suppressed)[0]
        ious = iou_axis_aligned(boxes[i][None, :], boxes[rest])[0]
        for j, v in zip(rest, ious):
            if j != i and v > iou_threshold:
                suppressed[j] = True
    return keep


def decode_detections(anchors: AnchorSet, cls_logits: Tensor, reg_out: Tensor,
                      f, cx, cy, score_threshold=0.1, iou_threshold=0.4):
    """Scores + offsets -> thresholded, per-class NMS-filtered detections."""
    n_classes = cls_logits.shape[1] - 1
    scores = 1.0 / (1.0 + np.exp(-cls_logits.data[:, :n_classes]))
    reg = reg_out.data.reshape(len(anchors), 13)
    detections = []
    per = anchors.per_cell
    for cls_id in range(n_classes):
        cand = []
        for a in range(len(anchors)):
            if anchors.class_ids[a] != cls_id:
                continue
            s = float(scores[a // per, cls_id])
            if s < score_threshold:
                continue
            o = reg[a].copy()
            o[12] = 1.0 / (1.0 + math.exp(-o[12]))  # branch channel is a logit
            cand.append(decode_box(anchors.boxes[a], anchors.priors[a], o,
                                   f, cx, cy, class_id=cls_id, score=s))
        if not cand:
            continue
        boxes = np.stack([d.box2d for d in cand])
        kept = nms_2d(boxes, np.array([d.score for d in cand]), iou_threshold)
        detections.extend(cand[i] for i in kept)
    detections.sort(key=lambda d: -d.score)
    return detections
