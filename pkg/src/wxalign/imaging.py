"""Image rasters, binary PPM I/O and the fog / low-light degradations."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

DEFAULT_ATMOSPHERIC_LIGHT = 0.5
FOG_LEVELS = 10
GAMMA_RANGE = (1.5, 5.0)


class PPMFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Image:
    """An RGB raster with float intensities in [0, 1], shaped (rows, cols, 3)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"image data must be rows x cols x 3, got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        self.data = data

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @classmethod
    def blank(cls, rows, cols, value=0.0):
        return cls(np.full((rows, cols, 3), value, dtype=np.float64))

    def copy(self):
        return Image(self.data.copy())

    def quantized(self):
        """Values exactly as they survive an 8-bit save/load round trip."""
        return Image(to_bytes(self.data).astype(np.float64) / 255.0)


@dataclass(frozen=True)
class FogParams:
    beta: float
    atmospheric_light: float = DEFAULT_ATMOSPHERIC_LIGHT
    level_index: int | None = None

    @classmethod
    def from_level(cls, i, atmospheric_light=DEFAULT_ATMOSPHERIC_LIGHT):
        return cls(fog_beta_for_level(i), atmospheric_light, i)


@dataclass(frozen=True)
class LowLightParams:
    gamma: float


@dataclass(frozen=True)
class DepthField:
    d: np.ndarray

    @property
    def rows(self):
        return self.d.shape[0]

    @property
    def cols(self):
        return self.d.shape[1]


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def to_bytes(data):
    # round half up, so 0.5 -> 128
    return np.clip(np.floor(np.asarray(data) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_ppm(raw):
    """Decode a binary P6 PPM with maxval 255."""
    raw = bytes(raw)
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise PPMFormatError("truncated header", pos)
        fields.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = fields
    if magic != b"P6":
        raise PPMFormatError(f"bad magic {magic!r}, expected b'P6'", 0)
    try:
        cols, rows, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise PPMFormatError("non-numeric header field", pos) from None
    if cols < 1 or rows < 1:
        raise PPMFormatError(f"invalid dimensions {cols}x{rows}", pos)
    if maxval != 255:
        raise PPMFormatError(f"unsupported maxval {maxval}", pos)
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PPMFormatError("missing whitespace after header", pos)
    pos += 1
    need = rows * cols * 3
    if len(raw) - pos < need:
        raise PPMFormatError(f"truncated payload: need {need} bytes, have {len(raw) - pos}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(rows, cols, 3)
    return Image(pixels.astype(np.float64) / 255.0)


def load_ppm_bytes(raw):
    """Like ``load_ppm`` but returns the raw uint8 raster (rows, cols, 3)."""
    return to_bytes(load_ppm(raw).data)


def save_ppm(image):
    header = f"P6\n{image.cols} {image.rows}\n255\n".encode("ascii")
    return header + to_bytes(image.data).tobytes()


def read_ppm(path):
    with open(path, "rb") as fh:
        return load_ppm(fh.read())


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(save_ppm(image))


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------


def depth_field(rows, cols):
    """Radial pseudo-depth: largest at the center, falling 0.04 per pixel."""
    if rows < 1 or cols < 1:
        raise ValueError(f"depth_field needs positive dimensions, got {rows}x{cols}")
    r = np.arange(rows, dtype=np.float64)[:, None]
    c = np.arange(cols, dtype=np.float64)[None, :]
    rho = np.sqrt((r - rows / 2.0) ** 2 + (c - cols / 2.0) ** 2)
    d = -0.04 * rho + np.sqrt(max(rows, cols))
    return DepthField(np.maximum(d, 0.0))


def transmission(depth, beta):
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    d = depth.d if isinstance(depth, DepthField) else np.asarray(depth, dtype=np.float64)
    return np.exp(-beta * d)


def apply_fog(image, params):
    t = transmission(depth_field(image.rows, image.cols), params.beta)[:, :, None]
    a = params.atmospheric_light
    out = image.data * t + a * (1.0 - t)
    return Image(np.clip(out, 0.0, 1.0))


def fog_beta_for_level(i):
    if not (isinstance(i, (int, np.integer)) and 0 <= i < FOG_LEVELS):
        raise ValueError(f"fog level must be an integer in [0, {FOG_LEVELS - 1}], got {i!r}")
    # integer arithmetic keeps 0.05 and 0.14 exact
    return (i + 5) / 100


def apply_lowlight(image, params):
    if params.gamma < 1:
        raise ValueError(f"gamma must be >= 1 (darkening only), got {params.gamma}")
    return Image(np.power(image.data, params.gamma))


def sample_gamma(rng):
    lo, hi = GAMMA_RANGE
    return LowLightParams(float(rng.uniform(lo, hi)))


# ---------------------------------------------------------------------------
# debug rendering
# ---------------------------------------------------------------------------

_PALETTE = np.array(
    [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.5, 0.0], [0.0, 1.0, 0.0]]
)


def box_to_pixels(box, rows, cols):
    """Normalized (cx, cy, w, h) to inclusive pixel corners (r0, c0, r1, c1)."""
    cx, cy, w, h = box
    tol = 1e-9  # absorbs float noise in box edges that sit on pixel boundaries
    c0 = int(np.floor((cx - w / 2) * cols + tol))
    c1 = int(np.ceil((cx + w / 2) * cols - tol)) - 1
    r0 = int(np.floor((cy - h / 2) * rows + tol))
    r1 = int(np.ceil((cy + h / 2) * rows - tol)) - 1
    return r0, c0, r1, c1


def render_detections(image, detections, color=None):
    """Draw 1-pixel box outlines on a copy of ``image``; off-raster parts are clipped."""
    out = image.data.copy()
    rows, cols = image.rows, image.cols
    for det in detections:
        r0, c0, r1, c1 = box_to_pixels(det.box, rows, cols)
        rgb = _PALETTE[det.class_id % len(_PALETTE)] if color is None else np.asarray(color)
        rr0, rr1 = max(r0, 0), min(r1, rows - 1)
        cc0, cc1 = max(c0, 0), min(c1, cols - 1)
        if rr0 > rr1 or cc0 > cc1:
            continue
        if 0 <= r0 < rows:
            out[r0, cc0:cc1 + 1] = rgb
        if 0 <= r1 < rows:
            out[r1, cc0:cc1 + 1] = rgb
        if 0 <= c0 < cols:
            out[rr0:rr1 + 1, c0] = rgb
        if 0 <= c1 < cols:
            out[rr0:rr1 + 1, c1] = rgb
    return Image(out)
