"""Central finite-difference checks for every analytic backward pass.

Each suite runs several seeds in float64 and reports its worst relative
error, ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import barlow, detect, nnet
from .synthdata import GroundTruth

STEP = 1e-5
TOLERANCE = 1e-4


def numerical_grad(f, x, h=STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _worst(pairs):
    return max(rel_error(a, n) for a, n in pairs)


def check_conv(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y, _ = nnet.conv2d_forward(x, w, b, stride, 1)
    g = rng.normal(size=y.shape)

    def f():
        return float(np.sum(nnet.conv2d_forward(x, w, b, stride, 1)[0] * g))

    _, cache = nnet.conv2d_forward(x, w, b, stride, 1)
    gx, gw, gb = nnet.conv2d_backward(g, cache)
    return _worst([(gx, numerical_grad(f, x)), (gw, numerical_grad(f, w)), (gb, numerical_grad(f, b))])


def check_leaky_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 4, 2))
    x[np.abs(x) < 1e-2] += 0.05  # stay away from the kink
    g = rng.normal(size=x.shape)

    def f():
        return float(np.sum(nnet.leaky_relu_forward(x, 0.1)[0] * g))

    _, cache = nnet.leaky_relu_forward(x, 0.1)
    return rel_error(nnet.leaky_relu_backward(g, cache), numerical_grad(f, x))


def check_global_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 5))
    g = rng.normal(size=(2, 5))

    def f():
        return float(np.sum(nnet.global_avg_pool_forward(x)[0] * g))

    _, cache = nnet.global_avg_pool_forward(x)
    return rel_error(nnet.global_avg_pool_backward(g, cache), numerical_grad(f, x))


def check_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(4, 3))

    def f():
        return float(np.sum(nnet.linear_forward(x, w, b)[0] * g))

    _, cache = nnet.linear_forward(x, w, b)
    gx, gw, gb = nnet.linear_backward(g, cache)
    return _worst([(gx, numerical_grad(f, x)), (gw, numerical_grad(f, w)), (gb, numerical_grad(f, b))])


def tiny_backbone_config():
    return nnet.BackboneConfig(
        layers=(
            nnet.ConvSpec(3, 3, 4, 1, 1),
            nnet.LeakyReLUSpec(0.1),
            nnet.ConvSpec(3, 4, 6, 2, 1),
            nnet.LeakyReLUSpec(0.1),
        ),
        input_size=8,
    )


def _random_gts(rng, n_images, max_objects=3):
    out = []
    for _ in range(n_images):
        gts = []
        for _ in range(int(rng.integers(0, max_objects + 1))):
            w, h = rng.uniform(0.1, 0.4, size=2)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            gts.append(GroundTruth(int(rng.integers(0, 3)), (cx, cy, w, h)))
        out.append(gts)
    return out


def check_backbone_composition(seed):
    """Backbone -> head -> detection loss, on a 2-conv net with 8x8 input."""
    rng = np.random.default_rng(seed)
    cfg = tiny_backbone_config()
    params = nnet.init_backbone(cfg, rng, dtype=np.float64)
    for k in params:
        if k.endswith("bias"):
            params[k] += rng.normal(scale=0.1, size=params[k].shape)
    params.update(detect.init_head(cfg.out_channels, 3, rng, dtype=np.float64))
    params["head.weight"] *= 10
    x = rng.uniform(size=(2, 8, 8, 3))
    gts = _random_gts(rng, 2)

    def f():
        feats, _ = nnet.backbone_forward(cfg, params, x)
        grid, _ = detect.head_forward(feats, params)
        return detect.detection_loss(grid, gts)[0]

    feats, bcache = nnet.backbone_forward(cfg, params, x)
    grid, hcache = detect.head_forward(feats, params)
    _, ggrid = detect.detection_loss(grid, gts)
    gfeat, grads = detect.head_backward(ggrid, hcache)
    _, bgrads = nnet.backbone_backward(cfg, gfeat, bcache)
    grads.update(bgrads)
    return _worst([(grads[k], numerical_grad(f, params[k])) for k in params])


def check_head(seed):
    rng = np.random.default_rng(seed)
    params = detect.init_head(5, 3, rng, dtype=np.float64)
    params["head.bias"] += rng.normal(size=8)
    feats = rng.normal(size=(2, 3, 3, 5))
    g = rng.normal(size=(2, 3, 3, 8))

    def f():
        return float(np.sum(detect.head_forward(feats, params)[0] * g))

    _, cache = detect.head_forward(feats, params)
    gx, grads = detect.head_backward(g, cache)
    pairs = [(gx, numerical_grad(f, feats))] + [(grads[k], numerical_grad(f, params[k])) for k in params]
    return _worst(pairs)


def check_detection_loss(seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(2, 4, 4, 8))
    gts = _random_gts(rng, 2)

    def f():
        return detect.detection_loss(grid, gts)[0]

    _, g = detect.detection_loss(grid, gts)
    return rel_error(g, numerical_grad(f, grid))


def check_barlow(seed, lam=barlow.DEFAULT_LAMBDA):
    """Barlow loss through the shared projector into both pooled inputs' parameters."""
    rng = np.random.default_rng(seed)
    pooled_ref = rng.normal(size=(4, 10))
    pooled_adv = rng.normal(size=(4, 10))
    proj = barlow.init_projector(10, 8, rng, dtype=np.float64)
    proj["projector.bias"] += rng.normal(size=8)

    def f():
        zr, _ = barlow.project(pooled_ref, proj)
        za, _ = barlow.project(pooled_adv, proj)
        return barlow.barlow_forward_backward(zr, za, lam).loss

    zr, rc = barlow.project(pooled_ref, proj)
    za, ac = barlow.project(pooled_adv, proj)
    res = barlow.barlow_forward_backward(zr, za, lam)
    grads, gpooled = barlow.barlow_backward(res, rc, ac)
    pairs = [(gpooled, numerical_grad(f, pooled_adv))]
    pairs += [(grads[k], numerical_grad(f, proj[k])) for k in ("projector.weight",)]
    pairs.append((res.grad_adv, numerical_grad(lambda: barlow.barlow_forward_backward(zr, za, lam).loss, za)))
    pairs.append((res.grad_ref, numerical_grad(lambda: barlow.barlow_forward_backward(zr, za, lam).loss, zr)))
    worst = _worst(pairs)
    # centering makes the loss flat in the projector bias
    if np.max(np.abs(grads["projector.bias"])) > 1e-8:
        worst = max(worst, 1.0)
    return worst


SUITES = OrderedDict(
    [
        ("conv2d", (check_conv, TOLERANCE)),
        ("leaky_relu", (check_leaky_relu, TOLERANCE)),
        ("global_avg_pool", (check_global_avg_pool, TOLERANCE)),
        ("linear", (check_linear, TOLERANCE)),
        ("head", (check_head, TOLERANCE)),
        ("backbone_composition", (check_backbone_composition, TOLERANCE)),
        ("detection_loss", (check_detection_loss, TOLERANCE)),
        ("barlow", (check_barlow, TOLERANCE)),
    ]
)


def run_all(seed=0, n_seeds=5):
    """``{suite: {"worst_rel_error", "tolerance", "passed"}}`` over ``n_seeds`` seeds per suite."""
    results = OrderedDict()
    for name, (fn, tol) in SUITES.items():
        worst = max(fn(seed * 1000 + k) for k in range(n_seeds))
        results[name] = {"worst_rel_error": worst, "tolerance": tol, "passed": bool(worst <= tol)}
    return results
