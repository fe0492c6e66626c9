"""Synthetic latent-factor movie-rating task framed as a contextual bandit.

Ratings follow ``r(u, i) = clip(u . v_i + 3 + noise, 1, 5)`` and an item is a
"high" rating when ``r >= 4``.  The observed state is the item; the hidden
context is the user who rated it.  Action 1 predicts "high", action 0 predicts
"low"; the intrinsic reward is +1 for a correct prediction and -1 otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from frlhf.environments.mdp import EnvironmentSpec

HIGH_RATING = 4.0
PREDICT_LOW, PREDICT_HIGH = 0, 1


@dataclass(frozen=True, eq=False)
class RatingTable:
    """Ground truth for one client: dense ratings over its users and all items,
    plus the observed (user, item) pairs split into train and eval."""

    user_factors: np.ndarray  # (U, dim)
    item_factors: np.ndarray  # (I, dim)
    noise: np.ndarray  # (U, I)
    ratings: np.ndarray  # (U, I)
    train_pairs: np.ndarray  # (n_train, 2) local user index, item
    eval_pairs: np.ndarray  # (n_eval, 2)
    user_offset: int = 0

    @property
    def labels(self) -> np.ndarray:
        return self.ratings >= HIGH_RATING

    @property
    def n_users(self) -> int:
        return self.ratings.shape[0]

    @property
    def n_items(self) -> int:
        return self.ratings.shape[1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "item_id", "rating", "label"])
            for u in range(self.n_users):
                for i in range(self.n_items):
                    r = float(self.ratings[u, i])
                    w.writerow([u + self.user_offset, i, repr(r), int(r >= HIGH_RATING)])


def rating_from_factors(u: np.ndarray, v: np.ndarray, noise=0.0) -> np.ndarray:
    return np.clip(u @ v.T + 3.0 + noise, 1.0, 5.0)


class RecommenderEnv:
    """Sampling view of one client's training interactions.

    Implements the same ``initial_state`` / ``step`` interface as
    :class:`EnvironmentSpec`; :attr:`spec` is the equivalent tabular bandit
    (expected rewards over the client's training users) for exact evaluation.
    """

    n_actions = 2
    r_max = 1.0

    def __init__(self, table: RatingTable, gamma: float = 0.0):
        if len(table.train_pairs) == 0:
            raise ValueError("client has no training interactions")
        self.table = table
        self.gamma = float(gamma)
        self.n_states = table.n_items
        users, items = table.train_pairs[:, 0], table.train_pairs[:, 1]
        counts = np.bincount(items, minlength=self.n_states).astype(np.float64)
        self.context_dist = counts / counts.sum()
        self._cum_context = np.cumsum(self.context_dist)
        order = np.argsort(items, kind="stable")
        self._users_by_item = np.split(users[order], np.cumsum(counts.astype(int))[:-1])
        labels = table.labels
        sign = np.zeros(self.n_states)
        for i, us in enumerate(self._users_by_item):
            if us.size:
                sign[i] = np.mean(np.where(labels[us, i], 1.0, -1.0))
        R = np.stack([-sign, sign], axis=1)
        P = np.broadcast_to(self.context_dist, (self.n_states, 2, self.n_states))
        self.spec = EnvironmentSpec(P, R, self.context_dist, self.gamma, r_max=1.0)

    def _draw_item(self, rng: np.random.Generator) -> int:
        return min(int(np.searchsorted(self._cum_context, rng.random(), side="right")), self.n_states - 1)

    def initial_state(self, rng: np.random.Generator) -> int:
        return self._draw_item(rng)

    def sample_user(self, item: int, rng: np.random.Generator) -> int:
        us = self._users_by_item[item]
        return int(us[rng.integers(us.size)])

    def step(self, state: int, action: int, rng: np.random.Generator) -> tuple[float, int]:
        u = self.sample_user(state, rng)
        correct = bool(self.table.labels[u, state]) == (action == PREDICT_HIGH)
        return (1.0 if correct else -1.0), self._draw_item(rng)

    def sample_train_records(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(len(self.table.train_pairs), size=n)
        return self.table.train_pairs[idx]


def _draw_users(n_users, latent_dim, rng, centre, spread):
    c = np.zeros(latent_dim) if centre is None else np.asarray(centre, dtype=np.float64)
    return c + spread * rng.normal(size=(n_users, latent_dim)) / np.sqrt(latent_dim)


def make_recommender_env(
    n_users_per_client: int,
    n_items: int,
    latent_dim: int,
    noise_sd: float,
    rng: np.random.Generator,
    *,
    item_factors: np.ndarray | None = None,
    user_factors: np.ndarray | None = None,
    user_centre: np.ndarray | None = None,
    user_spread: float = 1.0,
    density: float = 0.5,
    train_fraction: float = 0.8,
    gamma: float = 0.0,
    user_offset: int = 0,
) -> tuple[RecommenderEnv, RatingTable]:
    """One client's environment and its ground-truth rating table.

    Each user observes every item independently with probability ``density``;
    observed pairs are split ``train_fraction`` / rest into disjoint train and
    eval sets (every user keeps at least one eval pair when it has two or more
    observations).
    """
    if min(n_users_per_client, n_items, latent_dim) < 1:
        raise ValueError("sizes must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    if not 0 < density <= 1 or not 0 < train_fraction <= 1:
        raise ValueError("density and train_fraction must lie in (0, 1]")
    if item_factors is None:
        item_factors = rng.normal(size=(n_items, latent_dim)) / np.sqrt(latent_dim)
    V = np.asarray(item_factors, dtype=np.float64)
    if user_factors is None:
        user_factors = _draw_users(n_users_per_client, latent_dim, rng, user_centre, user_spread)
    U = np.asarray(user_factors, dtype=np.float64)
    if V.shape != (n_items, latent_dim) or U.shape != (n_users_per_client, latent_dim):
        raise ValueError("factor shapes do not match the requested sizes")
    noise = rng.normal(scale=noise_sd, size=(U.shape[0], V.shape[0])) if noise_sd > 0 else np.zeros((U.shape[0], V.shape[0]))
    ratings = rating_from_factors(U, V, noise)

    train, held = [], []
    for u in range(U.shape[0]):
        items = np.flatnonzero(rng.random(n_items) < density)
        if items.size == 0:
            items = np.array([rng.integers(n_items)])
        items = rng.permutation(items)
        n_train = int(round(train_fraction * items.size))
        if items.size >= 2:
            n_train = min(max(n_train, 1), items.size - 1) if train_fraction < 1 else items.size
        train.extend((u, i) for i in items[:n_train])
        held.extend((u, i) for i in items[n_train:])
    table = RatingTable(
        user_factors=U,
        item_factors=V,
        noise=noise,
        ratings=ratings,
        train_pairs=np.array(train, dtype=np.int64).reshape(-1, 2),
        eval_pairs=np.array(held, dtype=np.int64).reshape(-1, 2),
        user_offset=user_offset,
    )
    return RecommenderEnv(table, gamma=gamma), table


def make_recommender_federation(
    K: int,
    n_users_per_client: int,
    n_items: int,
    latent_dim: int,
    noise_sd: float,
    rng: np.random.Generator,
    *,
    item_mean: float = 1.0,
    item_sd: float = 1.0,
    client_sd: float = 0.7,
    user_spread: float = 0.5,
    density: float = 0.5,
    train_fraction: float = 0.8,
    gamma: float = 0.0,
) -> list[tuple[RecommenderEnv, RatingTable]]:
    """``K`` clients sharing one item catalogue.

    Item factors are ``item_mean * e + item_sd * N(0, I) / sqrt(dim)`` with a
    common unit direction ``e``; each client's users scatter (``user_spread``)
    around a client taste centre ``e + client_sd * N(0, I) / sqrt(dim)``, so
    clients agree on item popularity but differ in taste.
    """
    e = np.ones(latent_dim) / np.sqrt(latent_dim)
    V = item_mean * e + item_sd * rng.normal(size=(n_items, latent_dim)) / np.sqrt(latent_dim)
    clients = []
    for k in range(K):
        centre = e + client_sd * rng.normal(size=latent_dim) / np.sqrt(latent_dim)
        clients.append(
            make_recommender_env(
                n_users_per_client,
                n_items,
                latent_dim,
                noise_sd,
                rng,
                item_factors=V,
                user_centre=centre,
                user_spread=user_spread,
                density=density,
                train_fraction=train_fraction,
                gamma=gamma,
                user_offset=k * n_users_per_client,
            )
        )
    return clients
