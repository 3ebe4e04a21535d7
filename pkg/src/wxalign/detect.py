"""Single-scale, single-anchor grid detection head.

Grid predictions are arrays shaped (N, S, S, 5 + K) holding per cell
``tx, ty, tw, th, objectness logit, class logits``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .nnet import ShapeError, conv2d_backward, conv2d_forward, he_uniform


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    box: tuple  # (cx, cy, w, h), normalized

    def to_json(self):
        return json.dumps({"class": int(self.class_id), "conf": float(self.confidence), "box": [float(v) for v in self.box]})

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(int(d["class"]), float(d["conf"]), tuple(d["box"]))


@dataclass(frozen=True)
class DetectLossConfig:
    box_weight: float = 5.0
    obj_weight: float = 1.0
    noobj_weight: float = 0.5
    cls_weight: float = 1.0
    anchor: tuple = (0.3, 0.3)

    def __post_init__(self):
        if min(self.box_weight, self.obj_weight, self.noobj_weight, self.cls_weight) <= 0:
            raise ValueError("detection loss weights must be positive")


def sigmoid(x):
    # split by sign for stability
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------


def init_head(in_channels, num_classes, rng, prefix="head", dtype=np.float32):
    params = OrderedDict()
    params[f"{prefix}.weight"] = he_uniform(rng, (5 + num_classes, 1, 1, in_channels), in_channels, dtype) * 0.1
    bias = np.zeros(5 + num_classes, dtype=dtype)
    bias[4] = -4.0  # start with most cells predicting background
    params[f"{prefix}.bias"] = bias
    return params


def head_forward(features, params, prefix="head"):
    """1x1 convolution from the feature map to raw grid logits."""
    weight = params[f"{prefix}.weight"]
    if features.ndim != 4 or features.shape[3] != weight.shape[3]:
        raise ShapeError(f"head: feature shape {features.shape} incompatible with weight shape {weight.shape}")
    return conv2d_forward(features, weight, params[f"{prefix}.bias"], 1, 0)


def head_backward(grad_grid, cache, prefix="head"):
    grad_x, gw, gb = conv2d_backward(grad_grid, cache)
    return grad_x, OrderedDict([(f"{prefix}.weight", gw), (f"{prefix}.bias", gb)])


# ---------------------------------------------------------------------------
# decode / encode
# ---------------------------------------------------------------------------


def decode(grid, conf_threshold=0.25, anchor=(0.3, 0.3)):
    """Turn one image's (S, S, 5+K) logits into detections above ``conf_threshold``."""
    s = grid.shape[0]
    g = np.asarray(grid, dtype=np.float64)
    obj = sigmoid(g[..., 4])
    cls = softmax(g[..., 5:])
    class_id = cls.argmax(axis=-1)
    conf = obj * cls.max(axis=-1)
    rows, cols = np.nonzero(conf >= conf_threshold)
    out = []
    for r, c in zip(rows, cols):
        tx, ty, tw, th = g[r, c, :4]
        cx = (c + sigmoid(np.array([tx]))[0]) / s
        cy = (r + sigmoid(np.array([ty]))[0]) / s
        out.append(
            Detection(int(class_id[r, c]), float(conf[r, c]), (float(cx), float(cy), anchor[0] * float(np.exp(tw)), anchor[1] * float(np.exp(th))))
        )
    return out


@dataclass
class GridTargets:
    mask: np.ndarray  # (S, S) bool, cell owns an object
    xy: np.ndarray  # (S, S, 2) in-cell offsets in [0, 1)
    wh: np.ndarray  # (S, S, 2) log size ratios to the anchor
    cls: np.ndarray  # (S, S) int


def assign_targets(gts, s, anchor=(0.3, 0.3)):
    """Assign each ground truth to the cell holding its center; one per cell, largest kept."""
    mask = np.zeros((s, s), dtype=bool)
    xy = np.zeros((s, s, 2))
    wh = np.zeros((s, s, 2))
    cls = np.zeros((s, s), dtype=np.int64)
    area = np.zeros((s, s))
    for g in gts:
        cx, cy, w, h = g.box
        if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
            raise ValueError(f"ground truth box outside [0, 1]: {g.box}")
        col = min(int(cx * s), s - 1)
        row = min(int(cy * s), s - 1)
        if mask[row, col] and area[row, col] >= w * h:
            continue
        mask[row, col] = True
        area[row, col] = w * h
        xy[row, col] = (cx * s - col, cy * s - row)
        wh[row, col] = (np.log(w / anchor[0]), np.log(h / anchor[1]))
        cls[row, col] = g.class_id
    return GridTargets(mask, xy, wh, cls)


def encode(gts, s, num_classes, anchor=(0.3, 0.3), saturation=30.0):
    """A grid of logits that decodes back to exactly ``gts``."""
    t = assign_targets(gts, s, anchor)
    grid = np.zeros((s, s, 5 + num_classes))
    xy = np.clip(t.xy, 1e-12, 1 - 1e-12)
    grid[..., 0:2] = np.log(xy) - np.log1p(-xy)
    grid[..., 2:4] = t.wh
    grid[..., 4] = np.where(t.mask, saturation, -saturation)
    grid[..., 5:] = -saturation
    rows, cols = np.nonzero(t.mask)
    grid[rows, cols, 5 + t.cls[rows, cols]] = saturation
    return grid


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def detection_loss(grid, gts_batch, cfg=DetectLossConfig()):
    """Loss summed over cells, averaged over the batch; returns ``(loss, grad)``.

    Box term: squared error on (sigmoid(tx), sigmoid(ty), tw, th). Objectness:
    binary cross-entropy, weighted separately for assigned and empty cells.
    Class: softmax cross-entropy on assigned cells.
    """
    n, s, _, ch = grid.shape
    k = ch - 5
    g = np.asarray(grid, dtype=np.float64)
    grad = np.zeros_like(g)
    total = 0.0
    for b in range(n):
        t = assign_targets(gts_batch[b], s, cfg.anchor)
        m = t.mask
        cell = g[b]

        sxy = sigmoid(cell[..., 0:2])
        dxy = (sxy - t.xy) * m[..., None]
        dwh = (cell[..., 2:4] - t.wh) * m[..., None]
        total += cfg.box_weight * (np.sum(dxy**2) + np.sum(dwh**2))
        grad[b, ..., 0:2] = cfg.box_weight * 2 * dxy * sxy * (1 - sxy)
        grad[b, ..., 2:4] = cfg.box_weight * 2 * dwh

        z = cell[..., 4]
        p = sigmoid(z)
        # BCE(z, 1) = softplus(-z); BCE(z, 0) = softplus(z)
        total += cfg.obj_weight * np.sum(softplus(-z)[m]) + cfg.noobj_weight * np.sum(softplus(z)[~m])
        grad[b, ..., 4] = np.where(m, cfg.obj_weight * (p - 1), cfg.noobj_weight * p)

        if m.any() and k > 0:
            logits = cell[..., 5:][m]
            labels = t.cls[m]
            lse = np.logaddexp.reduce(logits, axis=-1)
            total += cfg.cls_weight * np.sum(lse - logits[np.arange(len(labels)), labels])
            dl = softmax(logits)
            dl[np.arange(len(labels)), labels] -= 1
            gcls = np.zeros((s, s, k))
            gcls[m] = cfg.cls_weight * dl
            grad[b, ..., 5:] = gcls
    return total / n, (grad / n).astype(grid.dtype)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _rank_key(d):
    return (-d.confidence, d.class_id, d.box[0], d.box[1], d.box[2], d.box[3])


def nms(dets, iou_threshold=0.45):
    """Greedy per-class suppression; output sorted by descending confidence."""
    kept = []
    for d in sorted(dets, key=_rank_key):
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept
