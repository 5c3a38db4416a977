"""Counter-based random streams.

Every draw is a pure function of ``(key, counter)``: a stream key is derived
from ``(seed, path_index, label, purpose)`` by repeated SplitMix64 mixing, so
adding or removing particles never shifts another particle's noise.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .labels import Label

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_DIGIT = np.uint64(0xD1B54A32D192ED03)
_ROOT_KEY = np.uint64(0x243F6A8885A308D3)

# stream purposes
NOISE = 1
BRIDGE_BIRTH = 2
BRIDGE_DEATH = 3
CLOCK = 4
OFFSPRING = 5


def _u64(v) -> np.ndarray:
    return np.asarray(v).astype(np.uint64, copy=False)


def splitmix64(z) -> np.ndarray:
    z = np.atleast_1d(_u64(z))
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive(*parts) -> np.ndarray:
    """Fold integer parts (scalars or broadcastable arrays) into a 64-bit key."""
    h = np.atleast_1d(np.uint64(0x6A09E667F3BCC909))
    for part in parts:
        h = splitmix64(h ^ _u64(part))
    return h


def child_label_keys(parent_keys: np.ndarray, digits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return splitmix64(_u64(parent_keys) ^ ((_u64(digits) + np.uint64(1)) * _DIGIT))


def label_key(label: Label) -> np.uint64:
    """Key of a label, consistent with :func:`child_label_keys` applied digit by digit."""
    key = np.atleast_1d(_ROOT_KEY)
    for d in label:
        key = child_label_keys(key, np.array([d]))
    return key[0]


def uniforms(keys: np.ndarray, purpose: int, counter) -> np.ndarray:
    """One uniform in the open interval (0, 1) per key."""
    bits = splitmix64(derive(keys, purpose, counter))
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(keys: np.ndarray, purpose: int, counter, dim: int = 1) -> np.ndarray:
    """Standard normals of shape ``(len(keys), dim)`` by inverse CDF."""
    keys = np.atleast_1d(_u64(keys))
    counters = np.asarray(counter, dtype=np.int64) * dim
    cols = [ndtri(uniforms(keys, purpose, counters + j)) for j in range(dim)]
    return np.stack(cols, axis=-1).reshape(keys.shape[0], dim)
