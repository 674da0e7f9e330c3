"""Max-shifted log-space reductions.

The shift is applied so that a constant input returns that constant
bit-for-bit: ``exp(0) == 1`` and the mean of ones is exactly one.
"""

from __future__ import annotations

import numpy as np


def _shift(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def log_mean_exp(a, axis: int = -1, weights=None) -> np.ndarray:
    """``log(mean(exp(a)))`` along ``axis``; ``weights`` (summing to one) replace the mean.

    Entries equal to ``-inf`` contribute zero but still count in the
    denominator; an all ``-inf`` slice gives ``-inf``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        raise ValueError("log_mean_exp of an empty slice")
    m = _shift(a, axis)
    scaled = np.exp(a - m)
    if weights is None:
        s = np.mean(scaled, axis=axis, keepdims=True)
    else:
        s = np.sum(scaled * np.asarray(weights, dtype=np.float64), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m
    return np.squeeze(out, axis=axis)


def log_sum_exp(a, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    m = _shift(a, axis)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(a, axis: int = -1) -> np.ndarray:
    """Normalized ``exp(a)``; ``-inf`` entries get weight zero."""
    a = np.asarray(a, dtype=np.float64)
    w = np.exp(a - _shift(a, axis))
    return w / np.sum(w, axis=axis, keepdims=True)
