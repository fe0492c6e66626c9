"""Shared numerics: parameter vectors, softmax, KL divergence, rank correlation
and seeded random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays; :func:`as_params`
normalizes input and :func:`check_finite` is the guard every module calls
after producing new parameters.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left its valid domain."""


class InfiniteDivergenceError(ValueError):
    """KL(p || q) is infinite because q vanishes where p does not."""


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined (one of the sequences is constant)."""


def as_params(values, dim: int | None = None) -> np.ndarray:
    """Return a fresh 1-D float64 copy of ``values`` and validate it."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("parameter vector must be non-empty")
    if dim is not None and arr.size != dim:
        raise ValueError(f"expected dimension {dim}, got {arr.size}")
    return check_finite(arr, "parameters")


def check_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(np.asarray(arr).reshape(-1)))
        raise NumericalError(f"{what} has non-finite entries at {bad[:8].tolist()}")
    return arr


# ---------------------------------------------------------------------------
# random streams


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``.

    Built on ``SeedSequence`` spawn keys, so ``rng_stream(s, k, t)`` for
    different ``(k, t)`` are statistically independent and each one is
    reproducible bit-for-bit.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("seed and stream ids must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


# ---------------------------------------------------------------------------
# distributions


def softmax(logits: Sequence[float]) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax needs a non-empty 1-D sequence")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit table (one distribution per row)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("softmax_rows needs a 2-D table with at least one column")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """``sum p_i ln(p_i / q_i)`` with the convention ``0 ln(0/q) = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InfiniteDivergenceError("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    # identical entries contribute exactly zero
    terms = np.where(ps == qs, 0.0, ps * np.log(ps / qs))
    return max(float(terms.sum()), 0.0)


# ---------------------------------------------------------------------------
# ranks


def midranks(xs: Sequence[float]) -> np.ndarray:
    """1-based ranks where ties share the average of their positions."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank_correlation(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("sequences must be 1-D and of equal length")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx = midranks(x) - (x.size + 1) / 2.0
    ry = midranks(y) - (y.size + 1) / 2.0
    sxx = float(rx @ rx)
    syy = float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero rank variance")
    r = float(rx @ ry) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))
