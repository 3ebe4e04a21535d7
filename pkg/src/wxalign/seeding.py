"""Seed splitting: a master seed fans out to named, independent streams."""

import hashlib

import numpy as np


def derive_seed(master, *names):
    """64-bit seed from ``master`` and a path of names, via SHA-256.

    Sibling names give unrelated streams, so rerunning one stage never
    perturbs another.
    """
    key = ":".join([str(int(master))] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(master, *names):
    return np.random.default_rng(derive_seed(master, *names))
