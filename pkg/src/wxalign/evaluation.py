"""VOC-style detection metrics: IoU matching, all-point AP@50, mAP, P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .imaging import FOG_LEVELS, FogParams, Image, sample_gamma, to_bytes
from .pipeline import predict_batch
from .seeding import derive_seed
from .synthdata import degrade


@dataclass(frozen=True)
class MatchRecord:
    confidence: float
    is_tp: bool
    class_id: int
    image_id: int


@dataclass
class EvalReport:
    map50: float
    per_class: list  # [{"class": k, "ap": ap}]
    precision: float
    recall: float
    f1: float
    counts: dict
    levels: list | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "map50": self.map50,
            "per_class": self.per_class,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": self.counts,
        }
        if self.levels is not None:
            d["levels"] = self.levels
        d.update(self.extra)
        return d


REPORT_SCHEMA = {
    "type": "object",
    "required": ["map50", "per_class", "precision", "recall", "f1", "counts"],
    "properties": {
        "map50": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "ap"],
                "properties": {"class": {"type": "integer"}, "ap": {"type": "number", "minimum": 0, "maximum": 1}},
            },
        },
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "counts": {
            "type": "object",
            "required": ["images", "instances"],
            "properties": {"images": {"type": "integer"}, "instances": {"type": "integer"}},
        },
        "levels": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["beta", "precision", "recall", "map50", "f1"],
                "properties": {
                    k: {"type": "number", "minimum": 0, "maximum": 1}
                    for k in ("beta", "precision", "recall", "map50", "f1")
                },
            },
        },
    },
}


def validate_report(doc):
    """Raise ``jsonschema.ValidationError`` unless ``doc`` matches the report schema."""
    jsonschema.validate(doc, REPORT_SCHEMA)


def iou(a, b):
    """IoU of two (cx, cy, w, h) boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"boxes need positive width and height: {a}, {b}")
    ix = max(0.0, min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2))
    iy = max(0.0, min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def match_detections(dets, gts, iou_threshold=0.5, image_id=0):
    """Greedy matching for one image and one class.

    Detections are visited by descending confidence (ties by cx, cy); each
    takes the unmatched ground truth with highest IoU if that IoU reaches the
    threshold, otherwise it is a false positive.
    """
    taken = [False] * len(gts)
    records = []
    for d in sorted(dets, key=lambda d: (-d.confidence, d.box[0], d.box[1])):
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        records.append(MatchRecord(d.confidence, best >= 0, d.class_id, image_id))
    return records


def _ranked(records):
    # stable: equal confidences keep (image id, visit) order
    return sorted(records, key=lambda r: (-r.confidence, r.image_id))


def average_precision(records, n_gt):
    """All-point interpolated AP: area under the monotone precision envelope."""
    if n_gt == 0:
        return 0.0
    ranked = _ranked(records)
    if not ranked:
        return 0.0
    tp = np.cumsum([r.is_tp for r in ranked], dtype=np.float64)
    fp = np.cumsum([not r.is_tp for r in ranked], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def prf1(tp, fp, n_gt):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score(detections, labels, num_classes, iou_threshold=0.5, report_conf=0.25):
    """Metrics from per-image detection and ground-truth lists."""
    if len(detections) != len(labels):
        raise ValueError("need one detection list per image")
    records = {k: [] for k in range(num_classes)}
    n_gt = {k: 0 for k in range(num_classes)}
    tp_at = fp_at = 0
    for image_id, (dets, gts) in enumerate(zip(detections, labels)):
        for k in range(num_classes):
            g_k = [g for g in gts if g.class_id == k]
            d_k = [d for d in dets if d.class_id == k]
            n_gt[k] += len(g_k)
            records[k].extend(match_detections(d_k, g_k, iou_threshold, image_id))
            hi = [d for d in d_k if d.confidence >= report_conf]
            recs = match_detections(hi, g_k, iou_threshold, image_id)
            tp_at += sum(r.is_tp for r in recs)
            fp_at += sum(not r.is_tp for r in recs)
    per_class = [
        {"class": k, "ap": average_precision(records[k], n_gt[k])} for k in range(num_classes) if n_gt[k] > 0
    ]
    total_gt = sum(n_gt.values())
    mean_ap = float(np.mean([c["ap"] for c in per_class])) if per_class else 0.0
    precision, recall, f1 = prf1(tp_at, fp_at, total_gt)
    return EvalReport(
        mean_ap, per_class, precision, recall, f1, {"images": len(labels), "instances": total_gt}
    )


def evaluate_arrays(bundle, images_u8, labels, iou_threshold=0.5, conf=0.05, report_conf=0.25, nms_threshold=0.45):
    if len(images_u8) == 0:
        raise ValueError("evaluation needs at least one image")
    dets = predict_batch(bundle, images_u8, conf, nms_threshold)
    return score(dets, labels, bundle.config.num_classes, iou_threshold, report_conf)


def load_split(manifest):
    images = np.stack([to_bytes(manifest.load_image(e).data) for e in manifest.entries])
    labels = [manifest.load_labels(e) for e in manifest.entries]
    return images, labels


def evaluate(bundle, manifest, iou_threshold=0.5, conf=0.05, report_conf=0.25):
    if len(manifest) == 0:
        raise ValueError("evaluation needs a non-empty manifest")
    images, labels = load_split(manifest)
    return evaluate_arrays(bundle, images, labels, iou_threshold, conf, report_conf)


def degrade_arrays(images_u8, params):
    """Degrade uint8 rasters, re-quantized as if written to disk."""
    return np.stack([to_bytes(degrade(Image(im.astype(np.float64) / 255.0), params).data) for im in images_u8])


def fog_arrays(images_u8, level, atmospheric_light=0.5):
    return degrade_arrays(images_u8, FogParams.from_level(level, atmospheric_light))


def degraded_test_arrays(images_u8, kind, seed, atmospheric_light=0.5):
    """The hardest fog level, or one seeded gamma per image for low light."""
    if kind == "fog":
        return fog_arrays(images_u8, FOG_LEVELS - 1, atmospheric_light)
    if kind == "lowlight":
        rng = np.random.default_rng(derive_seed(seed, "lowlight-test"))
        return np.stack([degrade_arrays(im[None], sample_gamma(rng))[0] for im in images_u8])
    raise ValueError(f"unknown degradation kind {kind!r}")


def per_level_report(bundle, images_u8, labels, kind="fog", atmospheric_light=0.5, **kw):
    """Evaluate the clean test set under each of the ten fog levels."""
    if kind != "fog":
        raise ValueError(f"per-level reports are defined for fog only, got {kind!r}")
    base = evaluate_arrays(bundle, images_u8, labels, **kw)
    rows = []
    for level in range(FOG_LEVELS):
        params = FogParams.from_level(level, atmospheric_light)
        r = evaluate_arrays(bundle, degrade_arrays(images_u8, params), labels, **kw)
        rows.append(
            {"beta": params.beta, "precision": r.precision, "recall": r.recall, "map50": r.map50, "f1": r.f1}
        )
    base.levels = rows
    return base


# kept for side-by-side display only
FULL_SCALE_FOG_LEVELS = [
    {"beta": 0.05, "precision": 0.658, "recall": 0.779, "map50": 0.751, "f1": 0.711},
    {"beta": 0.06, "precision": 0.641, "recall": 0.786, "map50": 0.756, "f1": 0.704},
    {"beta": 0.07, "precision": 0.629, "recall": 0.799, "map50": 0.760, "f1": 0.702},
    {"beta": 0.08, "precision": 0.621, "recall": 0.802, "map50": 0.759, "f1": 0.697},
    {"beta": 0.09, "precision": 0.613, "recall": 0.807, "map50": 0.761, "f1": 0.694},
    {"beta": 0.10, "precision": 0.602, "recall": 0.807, "map50": 0.760, "f1": 0.687},
    {"beta": 0.11, "precision": 0.596, "recall": 0.806, "map50": 0.761, "f1": 0.682},
    {"beta": 0.12, "precision": 0.584, "recall": 0.805, "map50": 0.757, "f1": 0.673},
    {"beta": 0.13, "precision": 0.577, "recall": 0.800, "map50": 0.750, "f1": 0.667},
    {"beta": 0.14, "precision": 0.566, "recall": 0.796, "map50": 0.742, "f1": 0.658},
]
