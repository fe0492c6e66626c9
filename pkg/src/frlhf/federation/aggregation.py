"""Server-side combination of client deltas."""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from frlhf.core import check_finite
from frlhf.federation.wire import ProtocolError
from frlhf.local import ClientUpdate


class DimensionMismatchError(ProtocolError):
    """Client updates disagree on the parameter dimension."""


class AggregationStrategy(str, Enum):
    FEDAVG_UNIFORM = "fedavg_uniform"
    FEDAVG_WEIGHTED = "fedavg_weighted"
    COORDINATE_MEDIAN = "coordinate_median"


def _shifted_mean(X: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    # Centring on the first row keeps identical inputs exactly identical.
    x0 = X[0]
    D = X - x0
    if w is None:
        return x0 + D.mean(axis=0)
    return x0 + (w @ D) / w.sum()


def aggregate(updates: Sequence[ClientUpdate], strategy: AggregationStrategy | str) -> np.ndarray:
    """Aggregate client deltas into one delta.

    Updates are ordered by client id first, so the result only depends on the
    multiset of updates and never on arrival order.
    """
    strategy = AggregationStrategy(strategy)
    if len(updates) == 0:
        raise ValueError("no client updates to aggregate")
    dims = {u.delta.shape[0] for u in updates}
    if len(dims) != 1:
        raise DimensionMismatchError(f"client updates have differing dimensions {sorted(dims)}")
    ordered = sorted(updates, key=lambda u: (u.client_id, u.round))
    X = np.stack([u.delta for u in ordered])
    if strategy is AggregationStrategy.FEDAVG_UNIFORM:
        out = _shifted_mean(X)
    elif strategy is AggregationStrategy.FEDAVG_WEIGHTED:
        n = np.array([u.n_samples for u in ordered], dtype=np.float64)
        if np.any(n < 0) or n.sum() <= 0:
            raise ValueError("weighted aggregation needs non-negative sample counts with a positive total")
        out = _shifted_mean(X, n)
    else:
        S = np.sort(X, axis=0)
        m = S.shape[0]
        out = S[m // 2] if m % 2 else S[m // 2 - 1] + 0.5 * (S[m // 2] - S[m // 2 - 1])
    return check_finite(out, "aggregated delta")
