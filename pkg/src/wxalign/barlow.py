"""Barlow Twins alignment of an adverse-condition backbone to a frozen reference.

Both branches share one linear projector. The reference branch never
receives a gradient into its backbone; the projector receives gradient from
both branches.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .nnet import ShapeError, he_uniform, linear_backward, linear_forward

DEFAULT_LAMBDA = 0.001
DEFAULT_EPS = 1e-9


@dataclass
class CrossCorr:
    matrix: np.ndarray
    lam: float = DEFAULT_LAMBDA
    eps: float = DEFAULT_EPS


def init_projector(in_dim, out_dim, rng, prefix="projector", dtype=np.float32):
    if out_dim > in_dim:
        raise ShapeError(f"projector must reduce dimensionality: {in_dim} -> {out_dim}")
    params = OrderedDict()
    params[f"{prefix}.weight"] = he_uniform(rng, (in_dim, out_dim), in_dim, dtype)
    params[f"{prefix}.bias"] = np.zeros(out_dim, dtype=dtype)
    return params


def project(pooled, params, prefix="projector"):
    """Pooled features (B, C) to raw embeddings (B, D); returns ``(z, cache)``."""
    return linear_forward(pooled, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def batch_normalize(z):
    """Center each embedding column over the batch.

    Column scaling happens inside ``cross_correlation``.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"batch_normalize needs a batch of at least 2 rows, got shape {z.shape}")
    return z - z.mean(axis=0, keepdims=True)


def cross_correlation(z_ref, z_adv, lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS):
    """Normalized cross-correlation between centered embedding batches."""
    if z_ref.shape != z_adv.shape or z_ref.ndim != 2:
        raise ShapeError(f"cross_correlation: shapes {z_ref.shape} and {z_adv.shape} differ")
    n_ref = np.sqrt(np.sum(z_ref**2, axis=0)) + eps
    n_adv = np.sqrt(np.sum(z_adv**2, axis=0)) + eps
    c = (z_ref.T @ z_adv) / np.outer(n_ref, n_adv)
    return CrossCorr(c, lam, eps)


def loss_terms(c):
    """(invariance sum, unweighted off-diagonal sum) of a correlation matrix."""
    m = c.matrix if isinstance(c, CrossCorr) else np.asarray(c)
    diag = np.diagonal(m)
    inv = float(np.sum((1.0 - diag) ** 2))
    red = float(np.sum(m**2) - np.sum(diag**2))
    return inv, red


def barlow_loss(c, lam=None):
    if lam is None:
        lam = c.lam if isinstance(c, CrossCorr) else DEFAULT_LAMBDA
    inv, red = loss_terms(c)
    return inv + lam * red


def invariance_term(z_ref, z_adv):
    """Single-sample invariance penalty for unit-normalized vectors."""
    return float((1.0 - np.dot(z_ref, z_adv)) ** 2)


@dataclass
class BarlowResult:
    loss: float
    inv_term: float
    red_term: float
    corr: CrossCorr
    grad_ref: np.ndarray  # gradient wrt raw (uncentered) reference embeddings
    grad_adv: np.ndarray  # gradient wrt raw adverse embeddings


def barlow_forward_backward(z_ref_raw, z_adv_raw, lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS):
    """Loss and exact gradients with respect to both raw embedding batches."""
    zr = batch_normalize(z_ref_raw)
    za = batch_normalize(z_adv_raw)
    sr = np.sqrt(np.sum(zr**2, axis=0))
    sa = np.sqrt(np.sum(za**2, axis=0))
    nr, na = sr + eps, sa + eps
    corr = cross_correlation(zr, za, lam, eps)
    c = corr.matrix
    inv, red = loss_terms(corr)

    d = c.shape[0]
    g = 2.0 * lam * c
    g[np.diag_indices(d)] = -2.0 * (1.0 - np.diagonal(c))

    ds = g / np.outer(nr, na)
    gc = g * c
    dnr = -gc.sum(axis=1) / nr
    dna = -gc.sum(axis=0) / na
    # d|z|/dz = z/|z|; a zero column has zero z, so its term vanishes
    with np.errstate(invalid="ignore", divide="ignore"):
        kr = np.where(sr > 0, dnr / sr, 0.0)
        ka = np.where(sa > 0, dna / sa, 0.0)
    gzr = za @ ds.T + zr * kr
    gza = zr @ ds + za * ka
    # centering backward
    gzr -= gzr.mean(axis=0, keepdims=True)
    gza -= gza.mean(axis=0, keepdims=True)
    return BarlowResult(inv + lam * red, inv, red, corr, gzr, gza)


def barlow_backward(result, ref_cache, adv_cache, prefix="projector"):
    """Chain the embedding gradients through the shared projector.

    Returns ``(projector grads, grad wrt adverse pooled features)``. The
    reference pooled features get no gradient: their backbone is frozen.
    """
    if ref_cache is None or adv_cache is None:
        raise RuntimeError("barlow_backward needs projector caches from both branches")
    _, gw_ref, gb_ref = linear_backward(result.grad_ref, ref_cache)
    grad_pooled_adv, gw_adv, gb_adv = linear_backward(result.grad_adv, adv_cache)
    grads = OrderedDict(
        [(f"{prefix}.weight", gw_ref + gw_adv), (f"{prefix}.bias", gb_ref + gb_adv)]
    )
    return grads, grad_pooled_adv
