"""Toy detection corpus: colored shapes on smooth noise, plus degraded mixed sets.

A corpus directory holds ``images/*.ppm``, ``labels/*.txt`` and a
``manifest.json``. Mixed sets reference their clean parents by source id.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import (
    FOG_LEVELS,
    FogParams,
    Image,
    LowLightParams,
    apply_fog,
    apply_lowlight,
    fog_beta_for_level,
    read_ppm,
    sample_gamma,
    save_ppm,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MAX_CLASSES = 16
MAX_OBJECTS = 8
DEGRADATION_KINDS = ("fog", "lowlight")

SHAPES = ("disc", "square", "triangle", "diamond")
# base RGB per class; each object jitters around it
COLOR_FAMILIES = (
    (0.90, 0.20, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.80, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.35, 0.20),
)


class LabelParseError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple  # (cx, cy, w, h), normalized

    def __post_init__(self):
        cx, cy, w, h = self.box
        if not (0 < w <= 1 and 0 < h <= 1):
            raise ValueError(f"box size must be in (0, 1], got {self.box}")


@dataclass(frozen=True)
class SceneSpec:
    rows: int = 64
    cols: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 14
    background_grid: int = 4
    background_range: tuple = (0.25, 0.75)
    color_jitter: float = 0.08

    def __post_init__(self):
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}], got {self.num_classes}")
        if not 0 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValueError(f"object count range must satisfy 0 <= min <= max <= {MAX_OBJECTS}")
        if not 2 <= self.min_size <= self.max_size < min(self.rows, self.cols):
            raise ValueError("object size range must fit inside the raster")

    def shape_for(self, class_id):
        return SHAPES[class_id % len(SHAPES)]

    def color_for(self, class_id):
        return COLOR_FAMILIES[(class_id // len(SHAPES) + class_id) % len(COLOR_FAMILIES)]


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _smooth_noise(rng, rows, cols, grid, lo, hi):
    """Bilinear upsampling of a coarse random grid, one grid per channel."""
    coarse = rng.uniform(lo, hi, size=(grid + 1, grid + 1, 3))
    ys = np.linspace(0, grid, rows)
    xs = np.linspace(0, grid, cols)
    y0 = np.minimum(np.floor(ys).astype(int), grid - 1)
    x0 = np.minimum(np.floor(xs).astype(int), grid - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _shape_mask(shape, size):
    # pixel-center sampling inside a size x size box
    u = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(u, u, indexing="ij")
    if shape == "disc":
        return (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.25
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return np.abs(x - 0.5) <= 0.5 * y
    return np.abs(x - 0.5) + np.abs(y - 0.5) <= 0.5


def generate_scene(spec, rng):
    """Render one scene. Objects that cannot be placed without overlap are skipped."""
    data = _smooth_noise(rng, spec.rows, spec.cols, spec.background_grid, *spec.background_range)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed = []  # (r0, c0, size)
    labels = []
    for _ in range(n_objects):
        class_id = int(rng.integers(spec.num_classes))
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        color = np.clip(np.asarray(spec.color_for(class_id)) + rng.uniform(-1, 1, 3) * spec.color_jitter, 0, 1)
        for _attempt in range(20):
            r0 = int(rng.integers(0, spec.rows - size + 1))
            c0 = int(rng.integers(0, spec.cols - size + 1))
            # keep a 1-pixel gap so boxes never touch
            if all(
                r0 + size + 1 <= pr or pr + ps + 1 <= r0 or c0 + size + 1 <= pc or pc + ps + 1 <= c0
                for pr, pc, ps in placed
            ):
                break
        else:
            continue
        mask = _shape_mask(spec.shape_for(class_id), size)
        patch = data[r0:r0 + size, c0:c0 + size]
        patch[mask] = color
        placed.append((r0, c0, size))
        labels.append(
            GroundTruth(
                class_id,
                ((c0 + size / 2) / spec.cols, (r0 + size / 2) / spec.rows, size / spec.cols, size / spec.rows),
            )
        )
    return Image(np.clip(data, 0.0, 1.0)), labels


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def save_labels(labels):
    lines = [f"{g.class_id} {g.box[0]:.6f} {g.box[1]:.6f} {g.box[2]:.6f} {g.box[3]:.6f}\n" for g in labels]
    return "".join(lines).encode("ascii")


def load_labels(raw):
    if isinstance(raw, bytes):
        raw = raw.decode("ascii")
    out = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise LabelParseError(f"expected 5 fields, got {len(tokens)}", lineno)
        try:
            class_id = int(tokens[0])
            coords = tuple(float(t) for t in tokens[1:])
        except ValueError:
            raise LabelParseError(f"unparseable number in {line!r}", lineno) from None
        if class_id < 0:
            raise LabelParseError(f"negative class id {class_id}", lineno)
        if not all(0.0 <= v <= 1.0 for v in coords) or coords[2] == 0 or coords[3] == 0:
            raise LabelParseError(f"coordinates outside [0, 1] or empty box: {coords}", lineno)
        out.append(GroundTruth(class_id, coords))
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    image: str
    labels: str
    origin: str  # clean | fog | lowlight
    source_id: int
    level: int | None = None
    beta: float | None = None
    gamma: float | None = None

    def to_dict(self):
        d = {"image": self.image, "labels": self.labels, "origin": self.origin, "level": self.level}
        if self.beta is not None:
            d["beta"] = self.beta
        if self.gamma is not None:
            d["gamma"] = self.gamma
        d["source_id"] = self.source_id
        return d

    def degradation(self, atmospheric_light=0.5):
        if self.origin == "fog":
            return FogParams(self.beta, atmospheric_light, self.level)
        if self.origin == "lowlight":
            return LowLightParams(self.gamma)
        return None


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list = field(default_factory=list)
    root: Path = Path(".")
    kind: str = "clean"

    def __len__(self):
        return len(self.entries)

    def path(self, rel):
        return self.root / rel

    def clean_entries(self):
        return [e for e in self.entries if e.origin == "clean"]

    def to_json(self):
        doc = {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "seed": self.seed,
            "kind": self.kind,
            "entries": [e.to_dict() for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    def write(self, directory=None):
        directory = Path(directory or self.root)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        entries = [
            ManifestEntry(
                image=e["image"],
                labels=e["labels"],
                origin=e["origin"],
                source_id=int(e["source_id"]),
                level=e.get("level"),
                beta=e.get("beta"),
                gamma=e.get("gamma"),
            )
            for e in doc["entries"]
        ]
        return cls(doc["split"], doc["seed"], entries, path.parent, doc.get("kind", "clean"))

    def load_labels(self, entry):
        return load_labels(self.path(entry.labels).read_bytes())

    def load_image(self, entry):
        return read_ppm(self.path(entry.image))


def image_seed(seed, split, index):
    return derive_seed(seed, "scene", split, index)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def generate_dataset(spec, count, split, seed, out_dir, threads=1):
    """Write ``count`` scenes under ``out_dir`` and return the manifest."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    def make(index):
        rng = np.random.default_rng(image_seed(seed, split, index))
        image, labels = generate_scene(spec, rng)
        stem = f"{index:06d}"
        (out_dir / "images" / f"{stem}.ppm").write_bytes(save_ppm(image))
        (out_dir / "labels" / f"{stem}.txt").write_bytes(save_labels(labels))
        return ManifestEntry(f"images/{stem}.ppm", f"labels/{stem}.txt", "clean", index)

    entries = _map(make, range(count), threads)
    manifest = DatasetManifest(split, seed, entries, out_dir)
    manifest.write()
    log.info("wrote %d %s scenes to %s", count, split, out_dir)
    return manifest


def degrade(image, params):
    if isinstance(params, FogParams):
        return apply_fog(image, params)
    return apply_lowlight(image, params)


def degradation_schedule(kind, seed, source_id, atmospheric_light=0.5):
    """The ten degradation parameter sets applied to one clean source."""
    if kind == "fog":
        return [FogParams.from_level(i, atmospheric_light) for i in range(FOG_LEVELS)]
    if kind == "lowlight":
        rng = np.random.default_rng(derive_seed(seed, "lowlight", source_id))
        return [sample_gamma(rng) for _ in range(FOG_LEVELS)]
    raise ValueError(f"unknown degradation kind {kind!r}; expected one of {DEGRADATION_KINDS}")


def build_mixed_dataset(clean, kind, seed, out_dir, atmospheric_light=0.5, threads=1):
    """Clean originals plus ten degraded copies of each: 11 N entries."""
    if kind not in DEGRADATION_KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}; expected one of {DEGRADATION_KINDS}")
    out_dir = Path(out_dir)
    missing = [str(clean.path(e.image)) for e in clean.clean_entries() if not clean.path(e.image).is_file()]
    if missing:
        raise FileNotFoundError("missing clean source images: " + ", ".join(missing))
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def rel(p):
        return os.path.relpath(p, out_dir)

    def make(entry):
        image = clean.load_image(entry)
        labels_rel = rel(clean.path(entry.labels))
        rows = [ManifestEntry(rel(clean.path(entry.image)), labels_rel, "clean", entry.source_id)]
        for level, params in enumerate(degradation_schedule(kind, seed, entry.source_id, atmospheric_light)):
            name = f"images/{entry.source_id:06d}_{kind}{level}.ppm"
            (out_dir / name).write_bytes(save_ppm(degrade(image, params)))
            rows.append(
                ManifestEntry(
                    name,
                    labels_rel,
                    kind,
                    entry.source_id,
                    level=level,
                    beta=params.beta if kind == "fog" else None,
                    gamma=params.gamma if kind == "lowlight" else None,
                )
            )
        return rows

    groups = _map(make, clean.clean_entries(), threads)
    entries = [e for group in groups for e in group]
    manifest = DatasetManifest(clean.split, seed, entries, out_dir, kind)
    manifest.write()
    log.info("wrote %d-entry %s mixed set to %s", len(entries), kind, out_dir)
    return manifest
