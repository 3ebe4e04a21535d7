"""Run configuration: a JSON document with fixed sections, strict about keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from . import barlow
from .nnet import BackboneConfig
from .pipeline import EMBEDDINGS, ModelConfig, TrainConfig
from .synthdata import DEGRADATION_KINDS, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    rows: int = 64
    cols: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 14
    train_count: int = 500
    test_count: int = 100


@dataclass(frozen=True)
class ModelSection:
    backbone: dict | None = None  # None: the default three-conv backbone
    anchor: tuple = (0.3, 0.3)
    projector_dim: int = 64
    embedding: str = "spatial"


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.02


@dataclass(frozen=True)
class AlignSection:
    kind: str = "fog"
    # spelled "lambda" in the JSON document
    lam: float = barlow.DEFAULT_LAMBDA
    epochs: int = 10
    lr: float = 0.0002
    batch_size: int = 16
    atmospheric_light: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    iou: float = 0.5
    conf: float = 0.05
    report_conf: float = 0.25
    nms: float = 0.45


@dataclass(frozen=True)
class SeedSection:
    master: int = 7


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "align": AlignSection,
    "eval": EvalSection,
    "seeds": SeedSection,
}
_JSON_ALIASES = {("align", "lambda"): "lam"}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    align: AlignSection = field(default_factory=AlignSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        d = self.dataset
        if d.train_count < 1 or d.test_count < 1:
            raise ConfigError("dataset counts must be positive")
        if d.rows != d.cols:
            raise ConfigError(f"the detector expects square rasters, got {d.rows}x{d.cols}")
        if self.align.kind not in DEGRADATION_KINDS:
            raise ConfigError(f"align.kind must be one of {DEGRADATION_KINDS}, got {self.align.kind!r}")
        if self.model.embedding not in EMBEDDINGS:
            raise ConfigError(f"model.embedding must be one of {EMBEDDINGS}, got {self.model.embedding!r}")
        if self.align.lam < 0:
            raise ConfigError("align.lambda must be non-negative")
        if self.train.epochs < 0 or self.align.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.train.batch_size < 1 or self.align.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 1 and align.batch_size >= 2")
        if not 0 <= self.align.atmospheric_light <= 1:
            raise ConfigError("align.atmospheric_light must be in [0, 1]")
        if self.seeds.master < 0 or self.seeds.master >= 2**64:
            raise ConfigError("seeds.master must be an unsigned 64-bit integer")
        try:
            self.scene_spec()
            self.model_config()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def scene_spec(self):
        d = self.dataset
        return SceneSpec(d.rows, d.cols, d.num_classes, d.min_objects, d.max_objects, d.min_size, d.max_size)

    def model_config(self):
        m = self.model
        backbone = BackboneConfig(input_size=self.dataset.rows)
        if m.backbone is not None:
            backbone = BackboneConfig.from_dict(m.backbone)
            if backbone.input_size != self.dataset.rows:
                raise ConfigError(f"backbone input_size {backbone.input_size} != dataset rows {self.dataset.rows}")
        return ModelConfig(backbone, self.dataset.num_classes, tuple(m.anchor), m.projector_dim, m.embedding)

    def train_config(self, lam=None):
        return TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            lr_clean=self.train.lr,
            lr_align=self.align.lr,
            align_epochs=self.align.epochs,
            align_batch_size=self.align.batch_size,
            lam=self.align.lam if lam is None else lam,
            seed=self.seeds.master,
        )

    def with_seed(self, seed):
        return replace(self, seeds=SeedSection(seed))

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            for (sec, alias), attr in _JSON_ALIASES.items():
                if sec == name:
                    section[alias] = section.pop(attr)
            if "anchor" in section:
                section["anchor"] = list(section["anchor"])
            out[name] = section
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            raw = doc.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            raw = dict(raw)
            for (sec, alias), attr in _JSON_ALIASES.items():
                if sec != name:
                    continue
                if attr in raw:
                    raise ConfigError(f"unknown keys in {name!r}: {attr} (spelled {alias!r})")
                if alias in raw:
                    raw[attr] = raw.pop(alias)
            allowed = {f.name: f for f in fields(section_cls)}
            bad = sorted(set(raw) - set(allowed))
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {', '.join(bad)}")
            values = {}
            for key, value in raw.items():
                values[key] = _coerce(name, key, allowed[key], value)
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def _coerce(section, key, f, value):
    default = f.default
    where = f"{section}.{key}"
    if key == "backbone":
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object or null")
        return value
    if key == "anchor":
        if not (isinstance(value, (list, tuple)) and len(value) == 2 and all(_is_number(v) for v in value)):
            raise ConfigError(f"{where} must be a pair of numbers")
        return (float(value[0]), float(value[1]))
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{where}: booleans are not accepted")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not _is_number(value):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_json(fh.read())
