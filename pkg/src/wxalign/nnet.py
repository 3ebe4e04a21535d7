"""Small dense-array neural network substrate.

Tensors are plain numpy arrays in NHWC layout (batch, height, width,
channels); conv weights are (out, k, k, in). Every layer exposes a
``*_forward`` returning ``(output, cache)`` and a ``*_backward`` taking the
upstream gradient plus that cache. Tests run in float64; training runs in
float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view



class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,H,W,C) with ``weight`` (O,k,k,C)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[3]:
        raise ShapeError(
            f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    n, h, w, c = x.shape
    o, kh, kw, _ = weight.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # rows: (n, ho, wo); columns: (kh, kw, c) to match the weight layout
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ weight.reshape(o, -1).T + bias
    return out.reshape(n, ho, wo, o), (x.shape, cols, weight, stride, pad)


def conv2d_backward(grad_out, cache, need_input_grad=True):
    if cache is None:
        raise CacheError("conv2d_backward called without a forward cache")
    x_shape, cols, weight, stride, pad = cache
    n, h, w, c = x_shape
    o, kh, kw, _ = weight.shape
    _, ho, wo, _ = grad_out.shape
    g = grad_out.reshape(-1, o)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    if not need_input_grad:
        return None, grad_w, grad_b
    dcols = (g @ weight.reshape(o, -1)).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    grad_x = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    return grad_x, grad_w, grad_b


def leaky_relu_forward(x, slope=0.1):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(grad_out, cache):
    if cache is None:
        raise CacheError("leaky_relu_backward called without a forward cache")
    x, slope = cache
    # x == 0 takes the slope branch
    return np.where(x > 0, grad_out, slope * grad_out)


def global_avg_pool_forward(x):
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool: empty spatial dims in {x.shape}")
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(grad_out, cache):
    if cache is None:
        raise CacheError("global_avg_pool_backward called without a forward cache")
    n, h, w, c = cache
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, None, None, :], (n, h, w, c)).copy()


def linear_forward(x, weight, bias):
    """``y = x @ weight + bias`` with weight shaped (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}"
            f" / bias shape {bias.shape}"
        )
    return x @ weight + bias, (x, weight)


def linear_backward(grad_out, cache):
    if cache is None:
        raise CacheError("linear_backward called without a forward cache")
    x, weight = cache
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    k: int
    in_ch: int
    out_ch: int
    stride: int = 1
    pad: int = 1
    kind: str = "conv"


@dataclass(frozen=True)
class LeakyReLUSpec:
    slope: float = 0.1
    kind: str = "leaky_relu"


@dataclass(frozen=True)
class GlobalAvgPoolSpec:
    kind: str = "global_avg_pool"


_SPEC_TYPES = {"conv": ConvSpec, "leaky_relu": LeakyReLUSpec, "global_avg_pool": GlobalAvgPoolSpec}


@dataclass(frozen=True)
class BackboneConfig:
    layers: tuple = field(
        default_factory=lambda: (
            ConvSpec(3, 3, 16, 1, 1),
            LeakyReLUSpec(0.1),
            ConvSpec(3, 16, 32, 2, 1),
            LeakyReLUSpec(0.1),
            ConvSpec(3, 32, 64, 2, 1),
            LeakyReLUSpec(0.1),
        )
    )
    input_size: int = 64

    def __post_init__(self):
        channels = 3
        size = self.input_size
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                if spec.in_ch != channels:
                    raise ShapeError(f"conv expects {spec.in_ch} input channels, previous layer gives {channels}")
                channels = spec.out_ch
                size = conv_output_size(size, spec.k, spec.stride, spec.pad)
            elif isinstance(spec, GlobalAvgPoolSpec):
                size = 1
            if size < 1:
                raise ShapeError(f"backbone spatial size collapses below 1 at {spec}")

    def output_shape(self):
        """(height, width, channels) of the feature map for one image."""
        channels, size = 3, self.input_size
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                channels = spec.out_ch
                size = conv_output_size(size, spec.k, spec.stride, spec.pad)
            elif isinstance(spec, GlobalAvgPoolSpec):
                size = 1
        return size, size, channels

    @property
    def out_channels(self):
        return self.output_shape()[2]

    def to_dict(self):
        return {"input_size": self.input_size, "layers": [asdict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("kind")
            if kind not in _SPEC_TYPES:
                raise ValueError(f"unknown layer kind {kind!r}")
            layers.append(_SPEC_TYPES[kind](**spec))
        return cls(layers=tuple(layers), input_size=int(d["input_size"]))


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_backbone(config, rng, prefix="backbone", dtype=np.float32):
    params = OrderedDict()
    for idx, spec in enumerate(config.layers):
        if isinstance(spec, ConvSpec):
            fan_in = spec.in_ch * spec.k * spec.k
            params[f"{prefix}.{idx}.weight"] = he_uniform(
                rng, (spec.out_ch, spec.k, spec.k, spec.in_ch), fan_in, dtype
            )
            params[f"{prefix}.{idx}.bias"] = np.zeros(spec.out_ch, dtype=dtype)
    return params


def backbone_forward(config, params, x, prefix="backbone"):
    """Run the layer stack; returns ``(features, caches)``."""
    caches = []
    for idx, spec in enumerate(config.layers):
        if isinstance(spec, ConvSpec):
            x, cache = conv2d_forward(
                x, params[f"{prefix}.{idx}.weight"], params[f"{prefix}.{idx}.bias"], spec.stride, spec.pad
            )
        elif isinstance(spec, LeakyReLUSpec):
            x, cache = leaky_relu_forward(x, spec.slope)
        else:
            x, cache = global_avg_pool_forward(x)
            x = x[:, None, None, :]
        caches.append(cache)
    return x, caches


def backbone_backward(config, grad, caches, prefix="backbone", input_grad=True):
    """Backpropagate through the stack; returns ``(grad_input, grads)``.

    With ``input_grad=False`` the first layer skips its input gradient and
    ``grad_input`` is None.
    """
    if caches is None or len(caches) != len(config.layers):
        raise CacheError("backbone_backward needs the caches from backbone_forward")
    grads = OrderedDict()
    for idx in reversed(range(len(config.layers))):
        spec = config.layers[idx]
        cache = caches[idx]
        if isinstance(spec, ConvSpec):
            grad, gw, gb = conv2d_backward(grad, cache, need_input_grad=input_grad or idx > 0)
            grads[f"{prefix}.{idx}.bias"] = gb
            grads[f"{prefix}.{idx}.weight"] = gw
        elif isinstance(spec, LeakyReLUSpec):
            grad = leaky_relu_backward(grad, cache)
        else:
            grad = global_avg_pool_backward(grad[:, 0, 0, :], cache)
    ordered = OrderedDict((k, grads[k]) for k in reversed(list(grads)))
    return grad, ordered


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (same keys, same shapes)."""
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state):
    state.step(params, grads)
    return params, state


def param_count(params):
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"WARL"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, meta=None):
    """Serialize named tensors (stored as float32 LE) plus a JSON meta blob."""
    body = bytearray()
    body += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")  # tobytes() is C order; ascontiguousarray would promote 0-d
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(meta_raw)) + meta_raw
    payload = CHECKPOINT_MAGIC + bytes(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def load_checkpoint(data):
    data = bytes(data)
    if len(data) < 16:
        raise CheckpointFormatError("truncated checkpoint", len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}", 0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointFormatError("CRC mismatch", len(data) - 4)

    pos = 12
    end = len(payload)

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise CheckpointFormatError("truncated checkpoint", pos)
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    params = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    if pos != end:
        raise CheckpointFormatError("trailing bytes before CRC", pos)
    return params, meta
