"""Flat parameter-vector kernel and seeded random streams.

Every model parameter, gradient and mean-field estimate in the package is a
1-D ``float64`` numpy array.  The helpers below validate shapes and
finiteness so that dimension bugs surface at the call site instead of as
silent broadcasting.
"""
from __future__ import annotations

import enum

import numpy as np


class Stream(enum.IntEnum):
    """Role tags used as the first spawn-key entry of a random stream."""

    INIT = 1
    PARTITION = 2
    SAMPLING = 3
    LOCAL = 4
    RATE_BATCH = 5
    FIXED_POINT = 6
    SYNTHETIC = 7
    SPLIT = 8
    PROBE = 9


def rng_stream(seed: int, *stream_id: int) -> np.random.Generator:
    """Return an independent generator keyed by ``(seed, *stream_id)``.

    Streams come from ``SeedSequence`` spawn keys, so the draws of one
    client never depend on how many draws another client made first.
    """
    key = tuple(int(s) for s in stream_id)
    if any(s < 0 for s in key) or seed < 0:
        raise ValueError("seed and stream ids must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: len(a)={a.shape[0]} vs len(b)={b.shape[0]}")


def check_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise FloatingPointError(f"non-finite entry in {what} at index {bad}")
    return v


def dot(a, b) -> float:
    """Inner product in float64.

    The BLAS kernel multiplies element-wise before accumulating in a fixed
    lane order, so ``dot(a, b) == dot(b, a)`` holds bit-for-bit.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _check_pair(a, b)
    return float(np.dot(a, b))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``y + alpha * x`` as a new array."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    _check_pair(x, y)
    return check_finite(y + float(alpha) * x, "axpy result")


def l2norm(v) -> float:
    v = as_vector(v)
    return float(np.sqrt(dot(v, v)))
