"""Seeded random streams and small statistics helpers.

All randomness in the package flows through :func:`make_rng`, which wraps
numpy's counter-based Philox generator.  A stream is identified by a
``(seed, stream)`` pair; the stream id occupies the upper 64 bits of the
128-bit Philox key so sub-streams never share a counter sequence.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Philox-backed generator for ``(seed, stream)``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    key = (int(seed) & _MASK64) | ((int(stream) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``.

    Children are keyed from 64-bit draws of the parent, so the parent stream
    advances deterministically.
    """
    keys = rng.integers(0, 2**63, size=(n, 2), dtype=np.int64)
    return [
        np.random.Generator(np.random.Philox(key=int(a) | (int(b) << 64)))
        for a, b in keys
    ]


def gauss_sample(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return rng.standard_normal((n, d))


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile; ``q`` is a fraction in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    return float(np.percentile(arr, 100.0 * q, method="linear"))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two arrays, flattened."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    aa, bb = a @ a, b @ b
    if aa == 0.0 and bb == 0.0:
        raise ValueError("undefined cosine")
    if aa == 0.0 or bb == 0.0:
        return 0.0
    # one square root of the product keeps cos(a, a) exactly 1
    return float(np.clip(a @ b / np.sqrt(aa * bb), -1.0, 1.0))


def batch_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample cosine similarity over all but the leading axis."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    num = np.einsum("ij,ij->i", a, b)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    out = np.zeros(a.shape[0])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def mean_and_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return float(x.mean()), float("inf")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(n))
