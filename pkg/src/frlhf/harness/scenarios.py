"""Problem builders, client trainers and vectorized simulators behind the
experiment scenarios."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from frlhf.core import rng_stream
from frlhf.environments.mdp import random_env
from frlhf.environments.quadratic import (
    FeedbackPull,
    FeedbackTilt,
    QuadraticObjectiveSpec,
    make_quadratic_family,
)
from frlhf.environments.recommender import (
    PREDICT_HIGH,
    PREDICT_LOW,
    RatingTable,
    RecommenderEnv,
    make_recommender_federation,
)
from frlhf.feedback import (
    FeedbackEvent,
    FeedbackOracleConfig,
    RewardModel,
    comparative_feedback,
    direct_feedback,
    reward_model_update,
)
from frlhf.local import (
    ClientUpdate,
    LocalConfig,
    PolicyGradientObjective,
    QTable,
    clip_gradient,
    draw_noise,
    local_rlhf_epoch,
    q_learning_epoch,
)
from frlhf.metrics import item_scores
from frlhf.theory import BoundConstants, convergence_bound, drift_bound

INSTANCE_STREAM = 1 << 20  # stream id for problem-instance draws
FEEDBACK_STREAM, LEARNING_STREAM = 0, 1


# ---------------------------------------------------------------------------
# quadratic family


@dataclass(frozen=True)
class QuadraticSettings:
    d: int = 20
    mu: float = 0.5
    L: float = 2.0
    noise_var: float = 1.0
    noise: str = "sphere"
    clip: float | None = None  # None: certified bound from the start point
    b_scale: float = 1.0
    heterogeneity: float = 1.0
    init_distance: float = 4.0
    pull_width: float = 2.0
    pull_offset: float = 1.0
    pull_shared: float = 0.5  # weight of a direction common to every client's target
    pull_kind: str = "tilt"  # "tilt" (FeedbackTilt) or "bump" (FeedbackPull)
    h_max: float = 1.0
    n_states: int = 4  # policy view: theta reshaped to (n_states, d / n_states)
    epsilon: float = 0.05  # accuracy target for rounds-to-epsilon
    instance_seed: int = 7

    def __post_init__(self):
        if self.d < 1 or not 0 < self.mu <= self.L:
            raise ValueError("need d >= 1 and 0 < mu <= L")
        if self.noise_var < 0 or self.noise not in ("sphere", "gaussian"):
            raise ValueError("noise_var must be >= 0 and noise one of sphere/gaussian")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.d % self.n_states:
            raise ValueError("d must be divisible by n_states")
        if self.pull_kind not in ("bump", "tilt"):
            raise ValueError("pull_kind must be bump or tilt")
        if self.epsilon <= 0 or self.pull_width <= 0:
            raise ValueError("epsilon and pull_width must be > 0")


@dataclass(frozen=True, eq=False)
class QuadraticInstance:
    spec: QuadraticObjectiveSpec
    pull: FeedbackPull | FeedbackTilt
    theta0: np.ndarray


def make_quadratic_instance(
    s: QuadraticSettings, K: int, rng: np.random.Generator, homogeneous: bool = False, mirror: bool = False
) -> QuadraticInstance:
    """Shared-curvature family with client feedback and a start point
    ``init_distance`` from the optimum (reflected through it when ``mirror``).

    Bump feedback peaks at targets ``pull_offset`` away from the optimum;
    tilt feedback is anchored at the optimum and slopes along the same
    directions.
    """
    spec = make_quadratic_family(
        K, s.d, s.mu, s.L, rng, b_scale=s.b_scale, heterogeneity=0.0 if homogeneous else s.heterogeneity
    )
    dirs = rng.normal(size=(K, s.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if s.pull_shared:
        common = rng.normal(size=s.d)
        dirs = s.pull_shared * common / np.linalg.norm(common) + (1 - s.pull_shared) * dirs
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if s.pull_kind == "bump":
        pull = FeedbackPull(spec.theta_star + s.pull_offset * dirs, s.pull_width, s.h_max)
    else:
        pull = FeedbackTilt(dirs, spec.theta_star, s.pull_width, s.h_max)
    u = rng.normal(size=s.d)
    offset = s.init_distance * u / np.linalg.norm(u)
    theta0 = spec.theta_star - offset if mirror else spec.theta_star + offset
    return QuadraticInstance(spec, pull, theta0)


def certified_clip(inst: QuadraticInstance, s: QuadraticSettings, lam: float, tau: int, eta: float) -> float:
    """Gradient-norm bound valid along every local path started at ``theta0``:
    ``max_k |grad_k(theta0)| + tau * eta * L * sigma`` (sphere noise) plus the
    feedback-gradient bound."""
    g0 = max(float(np.linalg.norm(inst.spec.grad(k, inst.theta0))) for k in range(inst.spec.K))
    sigma = np.sqrt(s.noise_var)
    return g0 + tau * eta * inst.spec.L_clients * sigma + lam * inst.pull.grad_bound + sigma


@dataclass
class SimulationResult:
    thetas: np.ndarray  # (n_seeds, T + 1, d)
    locals: np.ndarray | None = None  # (n_seeds, T, K, d): client models after each local epoch


def _noise_block(seeds, k, t, tau, d, variance, kind):
    return np.stack([draw_noise(rng_stream(int(sd), k, t), (tau, d), variance, kind) for sd in seeds])


def simulate_quadratic(
    inst: QuadraticInstance,
    rounds: int,
    tau: int,
    eta: float,
    lam: float = 0.0,
    noise_var: float = 0.0,
    noise: str = "sphere",
    clip: float | None = None,
    seeds: Sequence[int] = (0,),
    record_locals: bool = False,
    theta0: np.ndarray | None = None,
) -> SimulationResult:
    """Uniform FedAvg over the quadratic family for many seeds at once.

    Seed ``s`` uses ``rng_stream(s, k, t)`` for client ``k`` in round ``t``,
    the same streams as :class:`GradientTrainer`, so results agree with
    :func:`run_federation` on :class:`QuadraticClientObjective` clients (to
    rounding; the batched matrix products may differ in the last bit).
    """
    spec, pull = inst.spec, inst.pull
    K, d, S = spec.K, spec.d, len(seeds)
    start = inst.theta0 if theta0 is None else np.asarray(theta0, dtype=np.float64)
    base = np.broadcast_to(start, (S, d))
    theta = np.array(base if start.ndim == 1 else start, dtype=np.float64)
    out = np.empty((S, rounds + 1, d))
    out[:, 0] = theta
    locs = np.empty((S, rounds, K, d)) if record_locals else None
    for t in range(rounds):
        deltas = np.empty((K, S, d))
        for k in range(K):
            x = theta.copy()
            xi = _noise_block(seeds, k, t, tau, d, noise_var, noise) if noise_var > 0 else None
            for i in range(tau):
                g = spec.b[k] - x @ spec.A[k]
                if lam > 0:
                    g = g + lam * pull.grad(k, x)
                if xi is not None:
                    g = g + xi[:, i]
                x = x + eta * clip_gradient(g, clip)
            deltas[k] = x - theta
            if locs is not None:
                locs[:, t, k] = x
        theta = theta + (deltas[0] + (deltas - deltas[0]).mean(axis=0))
        out[:, t + 1] = theta
    return SimulationResult(out, locs)


def averaged_gaps(spec: QuadraticObjectiveSpec, thetas: np.ndarray) -> np.ndarray:
    """Gap at ``theta_avg(T) = mean(theta_0 .. theta_{T-1})`` for ``T = 1..``;
    shape ``(n_seeds, T_max)``."""
    csum = np.cumsum(thetas[:, :-1], axis=1)
    avg = csum / np.arange(1, thetas.shape[1])[None, :, None]
    return spec.gap(avg)


@dataclass
class BoundCheck:
    K: int
    lam: float
    measured: np.ndarray  # seed-mean gap at theta_avg, T = 1..T_max
    bound: np.ndarray
    clip: float
    last: np.ndarray | None = None  # seed-mean gap at theta_T, recorded but not checked

    @property
    def violations(self) -> int:
        return int(np.sum(self.measured > self.bound))

    @property
    def min_slack(self) -> float:
        return float(np.min(self.bound - self.measured))


def bound_check(s: QuadraticSettings, K: int, lam: float, rounds: int, tau: int, seeds: Sequence[int]) -> BoundCheck:
    """Simulate at ``eta = 1 / (L tau)`` and compare the seed-mean intrinsic gap
    of the averaged iterate with the bound for every horizon ``T <= rounds``."""
    inst = make_quadratic_instance(s, K, rng_stream(s.instance_seed, INSTANCE_STREAM, K))
    L = inst.spec.L_clients
    eta = 1.0 / (L * tau)
    G = s.clip if s.clip is not None else certified_clip(inst, s, lam, tau, eta)
    sim = simulate_quadratic(inst, rounds, tau, eta, lam, s.noise_var, s.noise, G, seeds)
    measured = averaged_gaps(inst.spec, sim.thetas).mean(axis=0)
    gap0 = float(inst.spec.gap(inst.theta0))
    j_star = inst.spec.j_star
    base = BoundConstants(
        L=L, mu=inst.spec.mu, G=G, sigma2=s.noise_var, h_max=s.h_max, lam=lam, K=K, T=1, tau=tau, eta=eta,
        j_star=j_star, j0=j_star - gap0,
    )
    bound = np.array([convergence_bound(base.replace(T=T)) for T in range(1, rounds + 1)])
    last = np.mean([inst.spec.gap(th[1:]) for th in sim.thetas], axis=0)
    return BoundCheck(K, lam, measured, bound, G, last)


@dataclass
class DriftCheck:
    eta: float
    tau: int
    measured: float  # max over clients of the seed-mean squared drift
    bound: float

    @property
    def ok(self) -> bool:
        return self.measured <= self.bound


def drift_check(s: QuadraticSettings, K: int, eta_scale: float, tau: int, seeds: Sequence[int]) -> DriftCheck:
    """One local epoch from ``theta0`` with step ``eta_scale / L``; the drift
    bound uses the certified gradient bound along the local path."""
    inst = make_quadratic_instance(s, K, rng_stream(s.instance_seed, INSTANCE_STREAM, K))
    eta = eta_scale / inst.spec.L_clients
    sim = simulate_quadratic(inst, 1, tau, eta, 0.0, s.noise_var, s.noise, None, seeds, record_locals=True)
    drift = np.sum((sim.locals[:, 0] - inst.theta0) ** 2, axis=-1).mean(axis=0)  # (K,)
    g0 = max(float(np.linalg.norm(inst.spec.grad(k, inst.theta0))) for k in range(K))
    sigma = np.sqrt(s.noise_var)
    G = g0 + tau * eta * inst.spec.L_clients * sigma
    return DriftCheck(eta, tau, float(drift.max()), float(drift_bound(eta, tau, G, s.noise_var)))


# ---------------------------------------------------------------------------
# lambda sweep on the feedback-pull family


@dataclass
class SweepPoint:
    lam: float
    personalization: float  # mean over seeds and clients
    j_global: float  # mean intrinsic value of the final global model
    final_gap: float
    rounds_to_epsilon: float  # inf when never reached
    samples: float
    per_round: np.ndarray  # (T, K, 3): intrinsic, feedback, combined per client


def policy_view(theta: np.ndarray, n_states: int) -> np.ndarray:
    """Row-wise softmax of ``theta`` reshaped to ``(..., n_states, d / n_states)``."""
    theta = np.asarray(theta, dtype=np.float64)
    logits = theta.reshape(theta.shape[:-1] + (n_states, theta.shape[-1] // n_states))
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def mean_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Uniform-state mean KL over the last two axes, exact zeros kept exact."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    terms = np.where(p == q, 0.0, terms)
    return np.maximum(terms.sum(axis=-1), 0.0).mean(axis=-1)


def sweep_point(
    s: QuadraticSettings,
    lam: float,
    seeds: Sequence[int],
    K: int,
    rounds: int,
    tau: int,
) -> SweepPoint:
    """Homogeneous intrinsic objectives plus client-specific feedback.

    Each seed draws one instance and runs it from two start points mirrored
    through the optimum (antithetic pair), which cancels the start-dependent
    first-order effect of the feedback on the seed-mean gap curve.  ``P_k``
    compares client ``k``'s model after the last local epoch with the final
    global model under the softmax policy view; ``J_g`` is the intrinsic
    objective of the final global model.
    """
    P, Jg, gaps, curves, decomp = [], [], [], [], []
    for sd in seeds:
        for mirror in (False, True):
            inst = make_quadratic_instance(s, K, rng_stream(int(sd), INSTANCE_STREAM), homogeneous=True, mirror=mirror)
            eta = 1.0 / (inst.spec.L_clients * tau)
            sim = simulate_quadratic(inst, rounds, tau, eta, lam, 0.0, s.noise, None, [sd], record_locals=True)
            final = sim.thetas[0, -1]
            locs = sim.locals[0]  # (T, K, d)
            P.append(mean_kl(policy_view(locs[-1], s.n_states), policy_view(final, s.n_states)[None]).mean())
            Jg.append(float(inst.spec.objective(final)))
            gaps.append(float(inst.spec.gap(final)))
            curves.append(inst.spec.gap(sim.thetas[0]))
            intr = np.stack([inst.spec.client_objective(k, locs[:, k]) for k in range(K)], axis=1)
            fb = np.stack([inst.pull.value(k, locs[:, k]) for k in range(K)], axis=1)
            decomp.append(np.stack([intr, fb, intr + lam * fb], axis=-1))
    curve = np.mean(curves, axis=0)
    hit = np.flatnonzero(curve <= s.epsilon)
    r_eps = float(hit[0]) if hit.size else float("inf")
    return SweepPoint(
        lam=float(lam),
        personalization=float(np.mean(P)),
        j_global=float(np.mean(Jg)),
        final_gap=float(np.mean(gaps)),
        rounds_to_epsilon=r_eps,
        samples=r_eps * K * tau,
        per_round=np.mean(decomp, axis=0),
    )


# ---------------------------------------------------------------------------
# trainers (one per client, used by both transports)


class GradientTrainer:
    """Runs :func:`local_rlhf_epoch` with stream ``(seed, client, round)``."""

    def __init__(self, client_id: int, objective, cfg: LocalConfig, seed: int):
        self.client_id = client_id
        self.objective = objective
        self.cfg = cfg
        self.seed = seed
        self.local_theta = None

    def train(self, round: int, theta: np.ndarray) -> ClientUpdate:
        rng = rng_stream(self.seed, self.client_id, round)
        up = local_rlhf_epoch(theta, self.objective, self.cfg, rng, client_id=self.client_id, round=round)
        self.local_theta = np.asarray(theta, dtype=np.float64) + up.delta
        return up


def centralized_sgd(theta0, objective, cfg: LocalConfig, steps: int, seed: int, client_id: int = 0) -> list[np.ndarray]:
    """Plain single-learner SGD ascent drawing step ``t``'s sample from the
    stream ``(seed, client_id, t)``."""
    theta = np.array(theta0, dtype=np.float64)
    path = [theta.copy()]
    for t in range(steps):
        g, _ = objective.gradient(theta, cfg, rng_stream(seed, client_id, t))
        theta = theta + cfg.eta * clip_gradient(g, cfg.clip_norm)
        path.append(theta.copy())
    return path


@dataclass(frozen=True)
class MDPSettings:
    n_states: int = 3
    n_actions: int = 2
    gamma: float = 0.5
    r_max: float = 1.0
    instance_seed: int = 11


def make_mdp_objective(s: MDPSettings, k: int = 0) -> PolicyGradientObjective:
    env = random_env(s.n_states, s.n_actions, rng_stream(s.instance_seed, INSTANCE_STREAM, k), gamma=s.gamma, r_max=s.r_max)
    return PolicyGradientObjective(env)


# ---------------------------------------------------------------------------
# recommender


@dataclass(frozen=True)
class RecommenderSettings:
    n_users: int = 40  # per client
    n_items: int = 100
    latent_dim: int = 4
    noise_sd: float = 0.3
    density: float = 0.5
    train_fraction: float = 0.8
    item_mean: float = 1.0
    item_sd: float = 1.0
    client_sd: float = 0.7
    user_spread: float = 0.5
    n_direct: int = 40  # direct feedback events per round
    n_pairs: int = 20  # comparative pairs per round
    feedback_noise_sd: float = 0.2
    feedback_threshold: float = 0.5
    reward_lr: float = 0.3
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.latent_dim) < 1:
            raise ValueError("sizes must be >= 1")
        if self.n_direct < 0 or self.n_pairs < 0:
            raise ValueError("feedback counts must be >= 0")


def make_recommender_clients(s: RecommenderSettings, K: int, seed: int) -> list[tuple[RecommenderEnv, RatingTable]]:
    return make_recommender_federation(
        K, s.n_users, s.n_items, s.latent_dim, s.noise_sd, rng_stream(seed, INSTANCE_STREAM),
        item_mean=s.item_mean, item_sd=s.item_sd, client_sd=s.client_sd, user_spread=s.user_spread,
        density=s.density, train_fraction=s.train_fraction,
    )


def predicted_rating(score: float) -> float:
    """Map a preference score to the 1..5 rating scale."""
    return float(3.0 + 2.0 * np.tanh(score))


class RecommenderTrainer:
    """One recommender client: collect feedback on its training interactions
    with the incoming global model, refresh its private reward model, then
    run Q-learning on the shaped reward."""

    def __init__(self, client_id: int, env: RecommenderEnv, table: RatingTable, cfg: LocalConfig, s: RecommenderSettings, seed: int):
        self.client_id = client_id
        self.env = env
        self.table = table
        self.cfg = cfg
        self.s = s
        self.seed = seed
        self.oracle = FeedbackOracleConfig(s.feedback_noise_sd, s.feedback_threshold, cfg.h_max)
        self.reward_model = RewardModel.tabular(env.n_states, env.n_actions, s.reward_lr, cfg.h_max)
        self.local_q = np.zeros((env.n_states, env.n_actions))
        self.feedback_log: list[tuple[int, int, FeedbackEvent]] = []
        by_user = {}
        for u, i in table.train_pairs:
            by_user.setdefault(int(u), []).append(int(i))
        self._pair_users = [u for u, items in sorted(by_user.items()) if len(items) >= 2]
        self._items_by_user = by_user

    def collect_feedback(self, round: int, q: np.ndarray, rng: np.random.Generator) -> list[FeedbackEvent]:
        scores = item_scores(q)
        ratings = self.table.ratings
        events = []
        for u, i in self.env.sample_train_records(self.s.n_direct, rng) if self.s.n_direct else []:
            ev = direct_feedback(predicted_rating(scores[i]), float(ratings[u, i]), self.oracle, rng, (int(i), PREDICT_HIGH))
            events.append(ev)
            events.append(FeedbackEvent(ev.kind, -ev.value, (int(i), PREDICT_LOW)))
        if self._pair_users:
            for _ in range(self.s.n_pairs):
                u = self._pair_users[rng.integers(len(self._pair_users))]
                a, b = rng.choice(self._items_by_user[u], size=2, replace=False)
                pred = int(np.sign(scores[a] - scores[b]))
                ev = comparative_feedback(float(ratings[u, a]), float(ratings[u, b]), pred, rng, self.oracle, (int(a), int(b)))
                if ev.value != 0:
                    v = ev.value
                    events += [
                        FeedbackEvent(ev.kind, v, (int(a), PREDICT_HIGH)),
                        FeedbackEvent(ev.kind, -v, (int(a), PREDICT_LOW)),
                        FeedbackEvent(ev.kind, -v, (int(b), PREDICT_HIGH)),
                        FeedbackEvent(ev.kind, v, (int(b), PREDICT_LOW)),
                    ]
        self.feedback_log += [(round, self.client_id, ev) for ev in events]
        return events

    def train(self, round: int, theta: np.ndarray) -> ClientUpdate:
        q = np.asarray(theta, dtype=np.float64).reshape(self.env.n_states, self.env.n_actions)
        if self.cfg.lam > 0:
            events = self.collect_feedback(round, q, rng_stream(self.seed, self.client_id, round, FEEDBACK_STREAM))
            if events:
                self.reward_model = reward_model_update(self.reward_model, events)
        table, update = q_learning_epoch(
            QTable(q, self.cfg.alpha, self.cfg.epsilon),
            self.env,
            self.reward_model,
            self.cfg,
            rng_stream(self.seed, self.client_id, round, LEARNING_STREAM),
            client_id=self.client_id,
            round=round,
        )
        self.local_q = table.q
        return update
