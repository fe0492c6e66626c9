"""Rule-based feedback simulators, bounded feedback, reward shaping and a
linear reward model trained from feedback events."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Sequence

import numpy as np

from frlhf.core import check_finite

DIRECT = "direct"
COMPARATIVE = "comparative"


@dataclass(frozen=True)
class FeedbackOracleConfig:
    noise_sd: float = 0.0
    threshold: float = 0.5
    h_max: float = 1.0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.h_max <= 0:
            raise ValueError("h_max must be > 0")


@dataclass(frozen=True)
class FeedbackEvent:
    kind: Literal["direct", "comparative"]
    value: float
    context: tuple = ()

    def __post_init__(self):
        if self.kind not in (DIRECT, COMPARATIVE):
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError("feedback value must be finite")


def clip_feedback(value, h_max: float):
    """Enforce ``|H| <= h_max``; works on scalars and arrays."""
    if h_max < 0:
        raise ValueError("h_max must be >= 0")
    out = np.clip(value, -h_max, h_max)
    return float(out) if np.ndim(out) == 0 else out


def _check_rating(r: float, name: str) -> None:
    if not 1.0 <= r <= 5.0:
        raise ValueError(f"{name} must lie in [1, 5], got {r}")


def direct_feedback(
    predicted_rating: float,
    true_rating: float,
    cfg: FeedbackOracleConfig,
    rng: np.random.Generator | None = None,
    context: tuple = (),
) -> FeedbackEvent:
    """-1 when the prediction is too high, +1 when too low, 0 when about right,
    judged against the true rating perturbed by ``N(0, noise_sd^2)``."""
    _check_rating(predicted_rating, "predicted_rating")
    _check_rating(true_rating, "true_rating")
    noisy = true_rating
    if cfg.noise_sd > 0:
        if rng is None:
            raise ValueError("noisy feedback needs an rng")
        noisy = true_rating + rng.normal(0.0, cfg.noise_sd)
    if predicted_rating > noisy + cfg.threshold:
        raw = -1.0
    elif predicted_rating < noisy - cfg.threshold:
        raw = 1.0
    else:
        raw = 0.0
    return FeedbackEvent(DIRECT, clip_feedback(raw, cfg.h_max), tuple(context))


def comparative_feedback(
    true_a: float,
    true_b: float,
    predicted_pref: int,
    rng: np.random.Generator | None = None,
    cfg: FeedbackOracleConfig | None = None,
    context: tuple = (),
) -> FeedbackEvent:
    """True preference (+1 first, -1 second, 0 tie) when it differs from the
    predicted one, else 0."""
    if predicted_pref not in (-1, 0, 1):
        raise ValueError("predicted_pref must be -1, 0 or 1")
    _check_rating(true_a, "true_a")
    _check_rating(true_b, "true_b")
    cfg = cfg or FeedbackOracleConfig()
    a, b = true_a, true_b
    if cfg.noise_sd > 0:
        if rng is None:
            raise ValueError("noisy feedback needs an rng")
        a, b = a + rng.normal(0.0, cfg.noise_sd), b + rng.normal(0.0, cfg.noise_sd)
    true_pref = int(np.sign(a - b))
    raw = float(true_pref) if true_pref != predicted_pref else 0.0
    return FeedbackEvent(COMPARATIVE, clip_feedback(raw, cfg.h_max), tuple(context))


def shape_reward(intrinsic, feedback_value, lam: float):
    """``R = R0 + lam * H``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return intrinsic + lam * feedback_value


# ---------------------------------------------------------------------------
# reward model


class OneHotFeatures:
    """One-hot encoding of ``(state, action)`` contexts."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions
        self.dim = n_states * n_actions

    def index(self, context) -> int:
        s, a = int(context[0]), int(context[1])
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise ValueError(f"context {context} outside {self.n_states}x{self.n_actions}")
        return s * self.n_actions + a

    def __call__(self, context) -> np.ndarray:
        phi = np.zeros(self.dim)
        phi[self.index(context)] = 1.0
        return phi


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Linear reward model ``H(x) = clip(w . phi(x), -h_max, h_max)``.

    ``features`` maps an event context to a feature vector; the default is
    one-hot over ``(state, action)``.
    """

    weights: np.ndarray
    lr: float = 0.1
    h_max: float = 1.0
    features: Callable[[Any], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "weights", check_finite(w, "reward model weights"))

    @classmethod
    def tabular(cls, n_states: int, n_actions: int, lr: float = 0.1, h_max: float = 1.0) -> "RewardModel":
        return cls(np.zeros(n_states * n_actions), lr, h_max, OneHotFeatures(n_states, n_actions))

    def phi(self, context) -> np.ndarray:
        phi = np.asarray(self.features(context) if self.features else context, dtype=np.float64)
        if phi.shape != self.weights.shape:
            raise ValueError(f"feature dimension {phi.shape} does not match weights {self.weights.shape}")
        return phi

    def raw(self, context) -> float:
        return float(self.weights @ self.phi(context))

    def predict(self, context) -> float:
        return clip_feedback(self.raw(context), self.h_max)

    def table(self, n_states: int, n_actions: int) -> np.ndarray:
        """Clipped predictions for every ``(s, a)`` (one-hot models only)."""
        if not isinstance(self.features, OneHotFeatures):
            raise TypeError("table() requires one-hot (state, action) features")
        return clip_feedback(self.weights.reshape(n_states, n_actions), self.h_max)


def reward_model_update(model: RewardModel, batch: Sequence[FeedbackEvent]) -> RewardModel:
    """One least-squares (LMS) step per event towards its feedback value."""
    if len(batch) == 0:
        raise ValueError("empty feedback batch")
    w = model.weights.copy()
    onehot = model.features if isinstance(model.features, OneHotFeatures) else None
    for ev in batch:
        if onehot is not None:
            j = onehot.index(ev.context)
            w[j] += model.lr * (ev.value - w[j])
        else:
            phi = model.phi(ev.context)
            w += model.lr * (ev.value - w @ phi) * phi
    return replace(model, weights=check_finite(w, "reward model weights"))


# ---------------------------------------------------------------------------
# logs


def write_feedback_log(path: str | Path, rows: Iterable[tuple[int, int, FeedbackEvent]]) -> None:
    """CSV with columns ``round, client, kind, context, value``; ``context`` is
    the ``:``-joined context tuple."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "kind", "context", "value"])
        for rnd, client, ev in rows:
            w.writerow([rnd, client, ev.kind, ":".join(str(c) for c in ev.context), repr(float(ev.value))])
