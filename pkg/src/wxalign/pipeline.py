"""The three training stages and inference.

Stage A trains backbone + head on clean scenes. Stage B copies the clean
backbone and fine-tunes the copy with the Barlow loss against frozen
reference features. Stage C pairs the fine-tuned backbone with the untouched
clean head.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import barlow
from .detect import DetectLossConfig, decode, detection_loss, head_backward, head_forward, init_head, nms
from .imaging import to_bytes
from .nnet import (
    Adam,
    BackboneConfig,
    ShapeError,
    backbone_backward,
    backbone_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    init_backbone,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

STAGES = ("clean", "aligned", "hybrid")
EMBEDDINGS = ("spatial", "pooled")


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 3
    anchor: tuple = (0.3, 0.3)
    projector_dim: int = 64
    # "spatial": every feature-map location is one Barlow sample;
    # "pooled": one globally averaged vector per image
    embedding: str = "spatial"

    def __post_init__(self):
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if not 1 <= self.projector_dim <= self.backbone.out_channels:
            raise ValueError(
                f"projector_dim must be in [1, {self.backbone.out_channels}], got {self.projector_dim}"
            )

    def to_dict(self):
        return {
            "backbone": self.backbone.to_dict(),
            "num_classes": self.num_classes,
            "anchor": list(self.anchor),
            "projector_dim": self.projector_dim,
            "embedding": self.embedding,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            BackboneConfig.from_dict(d["backbone"]),
            int(d["num_classes"]),
            tuple(d["anchor"]),
            int(d["projector_dim"]),
            d.get("embedding", "spatial"),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_clean: float = 0.02
    lr_align: float | None = None
    align_epochs: int = 10
    align_batch_size: int = 16
    lam: float = barlow.DEFAULT_LAMBDA
    seed: int = 7

    @property
    def align_lr(self):
        return self.lr_clean / 100 if self.lr_align is None else self.lr_align


@dataclass
class ModelBundle:
    config: ModelConfig
    backbone: OrderedDict
    head: OrderedDict
    stage: str
    seed: int
    projector: OrderedDict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        w = self.head.get("head.weight")
        if w is not None and w.shape[3] != self.config.backbone.out_channels:
            raise ShapeError(
                f"head expects {w.shape[3]} input channels, backbone gives {self.config.backbone.out_channels}"
            )

    def inference_params(self):
        return OrderedDict(list(self.backbone.items()) + list(self.head.items()))

    def to_bytes(self):
        params = self.inference_params()
        if self.projector:
            params.update(self.projector)
        meta = {"config": self.config.to_dict(), "stage": self.stage, "seed": self.seed}
        meta.update(self.extra)
        return save_checkpoint(params, meta)

    @classmethod
    def from_bytes(cls, data):
        params, meta = load_checkpoint(data)
        config = ModelConfig.from_dict(meta.pop("config"))
        stage = meta.pop("stage")
        seed = meta.pop("seed")
        groups = {"backbone": OrderedDict(), "head": OrderedDict(), "projector": OrderedDict()}
        for name, value in params.items():
            groups[name.split(".", 1)[0]][name] = value
        return cls(config, groups["backbone"], groups["head"], stage, seed, groups["projector"] or None, meta)


def params_digest(params):
    """SHA-256 over the serialized tensors; names included."""
    h = hashlib.sha256()
    for name, value in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return h.hexdigest()


def init_bundle(config, seed):
    rng = np.random.default_rng(derive_seed(seed, "init"))
    backbone = init_backbone(config.backbone, rng)
    head = init_head(config.backbone.out_channels, config.num_classes, rng)
    return ModelBundle(config, backbone, head, "clean", seed)


def to_input(images_u8):
    return images_u8.astype(np.float32) / np.float32(255.0)


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


# ---------------------------------------------------------------------------
# stage A
# ---------------------------------------------------------------------------


def train_clean(images, labels, model_cfg, cfg, log_fn=None):
    """Jointly train backbone and head with the detection loss.

    ``images`` is a uint8 array (N, H, W, 3), ``labels`` a list of N
    ground-truth lists. Returns ``(bundle, per-epoch mean losses)``.
    """
    if len(images) == 0:
        raise ValueError("train_clean needs a non-empty dataset")
    bundle = init_bundle(model_cfg, cfg.seed)
    loss_cfg = DetectLossConfig(anchor=model_cfg.anchor)
    params = bundle.inference_params()
    opt = Adam(lr=cfg.lr_clean)
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "train-clean", epoch)).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = to_input(images[idx])
            feats, bcache = backbone_forward(model_cfg.backbone, params, x)
            grid, hcache = head_forward(feats, params)
            loss, ggrid = detection_loss(grid, [labels[i] for i in idx], loss_cfg)
            _check_finite(loss, "detection loss")
            gfeat, hgrads = head_backward(ggrid, hcache)
            _, bgrads = backbone_backward(model_cfg.backbone, gfeat, bcache, input_grad=False)
            bgrads.update(hgrads)
            opt.step(params, bgrads)
            losses.append(loss)
        mean = float(np.mean(losses))
        history.append(mean)
        if log_fn:
            log_fn({"stage": "clean", "epoch": epoch, "loss": mean})
        log.info("clean epoch %d loss %.4f", epoch, mean)
    bundle.backbone = OrderedDict((k, params[k]) for k in bundle.backbone)
    bundle.head = OrderedDict((k, params[k]) for k in bundle.head)
    return bundle, history


# ---------------------------------------------------------------------------
# reference features
# ---------------------------------------------------------------------------

FEATURE_STORE_MAGIC = b"WFST"
FEATURE_STORE_VERSION = 1


class FeatureStore(OrderedDict):
    """Frozen reference-backbone features keyed by clean source id.

    Values are pooled vectors (C,) or full feature maps (S, S, C),
    depending on the embedding mode they were cached for.
    """

    def to_bytes(self):
        body = bytearray(FEATURE_STORE_MAGIC)
        body += struct.pack("<II", FEATURE_STORE_VERSION, len(self))
        for sid, value in self.items():
            arr = np.asarray(value, dtype="<f4")
            body += struct.pack("<QB", int(sid), arr.ndim)
            body += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
        return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if data[:4] != FEATURE_STORE_MAGIC:
            raise ValueError(f"bad feature store magic {data[:4]!r}")
        if len(data) < 16 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
            raise ValueError("feature store CRC mismatch or truncation")
        version, count = struct.unpack_from("<II", data, 4)
        if version != FEATURE_STORE_VERSION:
            raise ValueError(f"unsupported feature store version {version}")
        pos = 12
        store = cls()
        for _ in range(count):
            sid, ndim = struct.unpack_from("<QB", data, pos)
            pos += 9
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            store[sid] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * size
        return store

    def matrix(self, source_ids):
        return np.stack([self[int(s)] for s in source_ids])


def reference_features(config, backbone, images_u8, batch_size=64):
    """Backbone features in the shape the embedding mode consumes."""
    out = []
    for start in range(0, len(images_u8), batch_size):
        feats, _ = backbone_forward(config.backbone, backbone, to_input(images_u8[start:start + batch_size]))
        out.append(global_avg_pool_forward(feats)[0] if config.embedding == "pooled" else feats)
    if out:
        return np.concatenate(out)
    h, w, c = config.backbone.output_shape()
    return np.zeros((0, c) if config.embedding == "pooled" else (0, h, w, c), np.float32)


def cache_reference_features(bundle, images_u8, source_ids):
    if bundle.stage != "clean":
        raise ValueError(f"reference features come from a clean bundle, got stage {bundle.stage!r}")
    feats = reference_features(bundle.config, bundle.backbone, images_u8)
    return FeatureStore((int(s), v) for s, v in zip(source_ids, feats))


def _embedding_rows(feats, embedding):
    """Barlow samples from a feature batch: ``(rows (n, C), cache for the backward)``."""
    if embedding == "pooled":
        return global_avg_pool_forward(feats)
    return feats.reshape(-1, feats.shape[-1]), feats.shape


def _embedding_rows_backward(grad_rows, cache, embedding):
    if embedding == "pooled":
        return global_avg_pool_backward(grad_rows, cache)
    return grad_rows.reshape(cache)


# ---------------------------------------------------------------------------
# stage B
# ---------------------------------------------------------------------------


@dataclass
class PairSet:
    """Clean/counterpart pairs: ``source_ids[i]`` names the clean parent of ``images[i]``."""

    source_ids: np.ndarray
    images: np.ndarray  # uint8 (M, H, W, 3)
    origins: list

    def __len__(self):
        return len(self.source_ids)


def align_adverse(bundle, pairs, cfg, ref_images=None, store=None, log_fn=None):
    """Fine-tune a copy of the clean backbone on the Barlow loss.

    Reference features come from ``store`` (see ``cache_reference_features``)
    or, without a store, from recomputing the frozen backbone on
    ``ref_images`` (a mapping source id -> uint8 image). Returns
    ``(aligned bundle, per-step log records)``.
    """
    if len(pairs) == 0:
        raise ValueError("align_adverse needs a non-empty pair set")
    if bundle.stage != "clean":
        raise ValueError(f"align_adverse starts from a clean bundle, got stage {bundle.stage!r}")
    mcfg = bundle.config
    ref_backbone = bundle.backbone
    adv = OrderedDict((k, v.copy()) for k, v in ref_backbone.items())
    proj = barlow.init_projector(
        mcfg.backbone.out_channels, mcfg.projector_dim, np.random.default_rng(derive_seed(cfg.seed, "projector"))
    )
    params = OrderedDict(list(adv.items()) + list(proj.items()))
    opt = Adam(lr=cfg.align_lr)
    records = []
    m = len(pairs)
    for epoch in range(cfg.align_epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "align", epoch)).permutation(m)
        for step, start in enumerate(range(0, m, cfg.align_batch_size)):
            idx = order[start:start + cfg.align_batch_size]
            if len(idx) < 2:
                continue
            sids = pairs.source_ids[idx]
            if store is not None:
                ref = store.matrix(sids)
            else:
                ref = reference_features(mcfg, ref_backbone, np.stack([ref_images[int(s)] for s in sids]))
            feats, bcache = backbone_forward(mcfg.backbone, params, to_input(pairs.images[idx]))
            expected = feats.shape[-1:] if mcfg.embedding == "pooled" else feats.shape[1:]
            if ref.shape[1:] != expected:
                raise ShapeError(f"reference features {ref.shape[1:]} do not match {mcfg.embedding} embedding {expected}")
            ref_rows = ref.reshape(-1, ref.shape[-1])
            adv_rows, ecache = _embedding_rows(feats, mcfg.embedding)
            z_ref, ref_cache = barlow.project(ref_rows.astype(np.float64), _f64(params, "projector"))
            z_adv, adv_cache = barlow.project(adv_rows.astype(np.float64), _f64(params, "projector"))
            res = barlow.barlow_forward_backward(z_ref, z_adv, cfg.lam)
            _check_finite(res.loss, "Barlow loss")
            pgrads, grows = barlow.barlow_backward(res, ref_cache, adv_cache)
            gfeat = _embedding_rows_backward(grows.astype(np.float32), ecache, mcfg.embedding)
            _, grads = backbone_backward(mcfg.backbone, gfeat, bcache, input_grad=False)
            for k, v in pgrads.items():
                grads[k] = v.astype(np.float32)
            opt.step(params, grads)
            rec = {
                "epoch": epoch,
                "step": step,
                "loss": res.loss,
                "inv_term": res.inv_term,
                "red_term": res.red_term,
            }
            records.append(rec)
            if log_fn:
                log_fn(rec)
        log.info(
            "align epoch %d mean loss %.4f",
            epoch,
            np.mean([r["loss"] for r in records if r["epoch"] == epoch] or [np.nan]),
        )
    aligned = ModelBundle(
        mcfg,
        OrderedDict((k, params[k]) for k in adv),
        OrderedDict((k, v.copy()) for k, v in bundle.head.items()),
        "aligned",
        cfg.seed,
        OrderedDict((k, params[k]) for k in proj),
        {"lambda": cfg.lam},
    )
    return aligned, records


def _f64(params, prefix):
    return {k: v.astype(np.float64) for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# stage C and inference
# ---------------------------------------------------------------------------


def assemble_hybrid(aligned, clean):
    """Fine-tuned backbone + clean head. The projector is dropped."""
    if aligned.config.backbone.out_channels != clean.head["head.weight"].shape[3]:
        raise ShapeError(
            f"aligned backbone gives {aligned.config.backbone.out_channels} channels,"
            f" clean head expects {clean.head['head.weight'].shape[3]}"
        )
    if aligned.config.backbone != clean.config.backbone:
        raise ShapeError("aligned and clean bundles use different backbone configs")
    return ModelBundle(
        clean.config,
        OrderedDict((k, v.copy()) for k, v in aligned.backbone.items()),
        OrderedDict((k, v.copy()) for k, v in clean.head.items()),
        "hybrid",
        aligned.seed,
        extra=dict(aligned.extra),
    )


def layer_sequence(bundle):
    """The ops an inference pass executes, for structural comparisons."""
    seq = [(type(s).__name__, tuple(sorted(asdict(s).items()))) for s in bundle.config.backbone.layers]
    seq.append(("head", bundle.head["head.weight"].shape))
    return seq


def forward_grids(bundle, images_u8, batch_size=64):
    size = bundle.config.backbone.input_size
    if images_u8.ndim != 4 or images_u8.shape[1:3] != (size, size):
        raise ValueError(f"images must be {size}x{size}, got shape {images_u8.shape[1:3]}")
    out = []
    for start in range(0, len(images_u8), batch_size):
        feats, _ = backbone_forward(bundle.config.backbone, bundle.backbone, to_input(images_u8[start:start + batch_size]))
        grid, _ = head_forward(feats, bundle.head)
        out.append(grid)
    return np.concatenate(out)


def predict(bundle, image, conf_threshold=0.25, nms_threshold=0.45):
    """Detections for one image (an ``Image`` or a uint8 HxWx3 array)."""
    arr = image if isinstance(image, np.ndarray) else to_bytes(image.data)
    grid = forward_grids(bundle, arr[None])[0]
    return nms(decode(grid, conf_threshold, bundle.config.anchor), nms_threshold)


def predict_batch(bundle, images_u8, conf_threshold=0.25, nms_threshold=0.45):
    grids = forward_grids(bundle, images_u8)
    return [nms(decode(g, conf_threshold, bundle.config.anchor), nms_threshold) for g in grids]


def clone_bundle(bundle):
    return copy.deepcopy(bundle)


__all__ = [
    "FeatureStore",
    "ModelBundle",
    "ModelConfig",
    "NumericError",
    "PairSet",
    "TrainConfig",
    "align_adverse",
    "assemble_hybrid",
    "cache_reference_features",
    "forward_grids",
    "init_bundle",
    "layer_sequence",
    "param_count",
    "params_digest",
    "predict",
    "predict_batch",
    "train_clean",
]
