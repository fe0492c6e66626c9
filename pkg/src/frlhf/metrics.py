"""Evaluation: personalization score, global intrinsic performance and the
per-round recommender report (accuracy, rank correlation, values)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from frlhf.core import InfiniteDivergenceError, UndefinedCorrelationError, kl_divergence, softmax_rows, spearman_rank_correlation
from frlhf.environments.mdp import EnvironmentSpec, exact_value, rollout_batch, state_visitation, tabular_policy
from frlhf.environments.recommender import PREDICT_HIGH, PREDICT_LOW, RatingTable, RecommenderEnv


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0

    def __float__(self) -> float:
        return float(self.value)


# ---------------------------------------------------------------------------
# personalization


@dataclass(frozen=True, eq=False)
class PersonalizationInputs:
    pi_client: np.ndarray  # (S, A)
    pi_global: np.ndarray  # (S, A)
    rho: np.ndarray  # (S,)

    def __post_init__(self):
        pk = np.asarray(self.pi_client, dtype=np.float64)
        pg = np.asarray(self.pi_global, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if pk.ndim != 2 or pk.shape != pg.shape:
            raise ValueError(f"policies must share one (S, A) shape, got {pk.shape} and {pg.shape}")
        if rho.shape != (pk.shape[0],) or np.any(rho < 0) or abs(rho.sum() - 1) > 1e-12:
            raise ValueError("rho must be a distribution over the policy's states")
        object.__setattr__(self, "pi_client", pk)
        object.__setattr__(self, "pi_global", pg)
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class PersonalizationScore:
    value: float
    stderr: float = 0.0
    infinite: bool = False
    infinite_states: tuple = ()

    def __float__(self) -> float:
        return float(self.value)


def _state_kls(inp: PersonalizationInputs, states) -> tuple[np.ndarray, list[int]]:
    out = np.zeros(len(states))
    bad = []
    for j, s in enumerate(states):
        try:
            out[j] = kl_divergence(inp.pi_client[s], inp.pi_global[s])
        except InfiniteDivergenceError:
            out[j] = np.inf
            bad.append(int(s))
    return out, bad


def personalization_score(
    inp: PersonalizationInputs,
    mode: str = "exact",
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> PersonalizationScore:
    """``E_{s ~ rho} KL(pi_client(.|s) || pi_global(.|s))``.

    ``mode="exact"`` enumerates states; ``"sampled"`` averages over
    ``n_samples`` draws of ``s`` and reports a standard error.  An infinite
    divergence at a reachable state is flagged in the result, not raised.
    """
    if mode == "exact":
        support = np.flatnonzero(inp.rho > 0)
        kls, bad = _state_kls(inp, support)
        if bad:
            return PersonalizationScore(np.inf, 0.0, True, tuple(bad))
        return PersonalizationScore(max(float(inp.rho[support] @ kls), 0.0))
    if mode == "sampled":
        if not n_samples or n_samples < 2 or rng is None:
            raise ValueError("sampled mode needs n_samples >= 2 and an rng")
        S = inp.rho.size
        per_state, bad = _state_kls(inp, range(S))
        states = rng.choice(S, size=n_samples, p=inp.rho)
        vals = per_state[states]
        hit = sorted(set(bad) & set(states.tolist()))
        if hit:
            return PersonalizationScore(np.inf, 0.0, True, tuple(hit))
        return PersonalizationScore(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples)))
    raise ValueError(f"unknown mode {mode!r}")


def personalization_from_params(theta_client, theta_global, env: EnvironmentSpec, rho: str | np.ndarray = "initial") -> PersonalizationScore:
    """Exact score for two tabular softmax parameter vectors on ``env``.

    ``rho="initial"`` (default) weights states by the initial distribution,
    ``"visitation"`` by the global policy's discounted state visitation.
    """
    S, A = env.n_states, env.n_actions
    pk = tabular_policy(theta_client, S, A)
    pg = tabular_policy(theta_global, S, A)
    if isinstance(rho, str):
        if rho == "initial":
            rho = env.initial_dist
        elif rho == "visitation":
            rho = state_visitation(env, pg)
        else:
            raise ValueError(f"unknown state distribution {rho!r}")
    return personalization_score(PersonalizationInputs(pk, pg, rho))


# ---------------------------------------------------------------------------
# global performance


def mc_value(env: EnvironmentSpec, pi: np.ndarray, n_episodes: int, horizon: int, rng: np.random.Generator, reward=None) -> Estimate:
    """Monte-Carlo discounted return of ``pi`` with its standard error."""
    R = env.intrinsic_reward if reward is None else np.asarray(reward, dtype=np.float64)
    states, actions = rollout_batch(env, pi, horizon, n_episodes, rng)
    returns = (R[states, actions] * env.gamma ** np.arange(horizon)).sum(axis=1)
    se = returns.std(ddof=1) / np.sqrt(n_episodes) if n_episodes > 1 else 0.0
    return Estimate(float(returns.mean()), float(se))


def global_performance(
    envs: Sequence[EnvironmentSpec],
    pi: np.ndarray,
    mode: str = "exact",
    n_episodes: int = 1000,
    horizon: int = 100,
    rng: np.random.Generator | None = None,
) -> Estimate:
    """Mean intrinsic value ``(1/K) sum_k J_k^0(pi)``; shaping never enters."""
    if len(envs) == 0:
        raise ValueError("need at least one client environment")
    if mode == "exact":
        return Estimate(float(np.mean([exact_value(e, pi) for e in envs])))
    if mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        ests = [mc_value(e, pi, n_episodes, horizon, rng) for e in envs]
        se = np.sqrt(sum(e.stderr**2 for e in ests)) / len(ests)
        return Estimate(float(np.mean([e.value for e in ests])), float(se))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# recommender evaluation


def item_scores(q: np.ndarray) -> np.ndarray:
    """Preference score per item: ``Q[i, high] - Q[i, low]``."""
    q = np.asarray(q, dtype=np.float64)
    return q[:, PREDICT_HIGH] - q[:, PREDICT_LOW]


def prediction_metrics(scores: np.ndarray, table: RatingTable, pairs: np.ndarray | None = None) -> tuple[float, float | None, int]:
    """Accuracy of ``score > 0`` vs the high-rating label and Spearman
    correlation between scores and true ratings over ``pairs`` (eval set by
    default).  Returns ``(accuracy, spearman or None, n)``."""
    pairs = table.eval_pairs if pairs is None else pairs
    if len(pairs) == 0:
        raise ValueError("empty evaluation set")
    u, i = pairs[:, 0], pairs[:, 1]
    s = np.asarray(scores, dtype=np.float64)[i]
    acc = float(np.mean((s > 0) == table.labels[u, i]))
    try:
        rho = spearman_rank_correlation(s, table.ratings[u, i])
    except UndefinedCorrelationError:
        rho = None
    return acc, rho, len(pairs)


@dataclass
class ClientEvaluation:
    client_id: int
    n_eval: int
    accuracy: float
    spearman: float | None
    j_estimate: float  # eval-set mean intrinsic reward of the local predictor
    j_stderr: float
    j0_client: float  # exact intrinsic value of the local softmax policy
    personalization: float


@dataclass
class EvaluationReport:
    round: int
    clients: list[ClientEvaluation]
    weighted_accuracy: float
    j_estimate: float  # mean over clients of the local eval-set reward
    j_global: float  # mean intrinsic value of the global softmax policy
    personalization_mean: float = field(init=False)
    median_spearman: float | None = field(init=False)

    def __post_init__(self):
        self.personalization_mean = float(np.mean([c.personalization for c in self.clients]))
        rhos = [c.spearman for c in self.clients if c.spearman is not None]
        self.median_spearman = float(np.median(rhos)) if rhos else None

    def to_json(self) -> dict:
        return asdict(self)

    def rows(self):
        for c in self.clients:
            for key in ("accuracy", "spearman", "j_estimate", "j_stderr", "j0_client", "personalization", "n_eval"):
                v = getattr(c, key)
                yield self.round, c.client_id, key, "" if v is None else v
        for key in ("weighted_accuracy", "j_estimate", "j_global", "personalization_mean", "median_spearman"):
            v = getattr(self, key)
            yield self.round, "global", key, "" if v is None else v


def softmax_policy(q: np.ndarray, temperature: float) -> np.ndarray:
    return softmax_rows(np.asarray(q, dtype=np.float64) / temperature)


def evaluate_round(
    round: int,
    local_q: Sequence[np.ndarray],
    global_q: np.ndarray,
    clients: Sequence[tuple[RecommenderEnv, RatingTable]],
    temperature: float = 1.0,
) -> EvaluationReport:
    """Score each client's local model on its held-out pairs.

    The policy view of a Q-table is ``softmax(Q / temperature)``; personalization
    compares local and global policies under the client's item distribution.
    """
    if len(local_q) != len(clients):
        raise ValueError("one local model per client required")
    pi_g = softmax_policy(global_q, temperature)
    evals, values_g = [], []
    for k, (q, (env, table)) in enumerate(zip(local_q, clients)):
        scores = item_scores(q)
        acc, rho, n = prediction_metrics(scores, table)
        reward = 2.0 * acc - 1.0  # rewards are +1 / -1
        se = float(np.sqrt(max(1.0 - reward**2, 0.0) / max(n - 1, 1)))
        pi_k = softmax_policy(q, temperature)
        p = personalization_score(PersonalizationInputs(pi_k, pi_g, env.context_dist))
        evals.append(ClientEvaluation(k, n, acc, rho, float(reward), se, exact_value(env.spec, pi_k), float(p)))
        values_g.append(exact_value(env.spec, pi_g))
    n_tot = sum(e.n_eval for e in evals)
    w_acc = sum(e.n_eval * e.accuracy for e in evals) / n_tot
    return EvaluationReport(
        round=round,
        clients=evals,
        weighted_accuracy=float(w_acc),
        j_estimate=float(np.mean([e.j_estimate for e in evals])),
        j_global=float(np.mean(values_g)),
    )


def write_reports(reports: Sequence[EvaluationReport], jsonl_path: str | Path, csv_path: str | Path) -> None:
    with open(jsonl_path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "metric", "value"])
        for r in reports:
            for row in r.rows():
                w.writerow([row[0], row[1], row[2], repr(row[3]) if isinstance(row[3], float) else row[3]])
