"""Client-side local RLHF: tau steps of gradient ascent on the shaped objective
(REINFORCE on tabular MDPs, or exact/noisy gradients on the quadratic family),
and a tabular Q-learning alternative whose Q-table plays the role of theta."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from frlhf.core import NumericalError, as_params, check_finite
from frlhf.environments.mdp import EnvironmentSpec, rollout_batch, shaped_reward_table, tabular_policy
from frlhf.environments.quadratic import FeedbackPull, QuadraticObjectiveSpec, quadratic_objective_grad
from frlhf.feedback import RewardModel, clip_feedback

POLICY_GRADIENT = "policy_gradient"
Q_LEARNING = "q_learning"


@dataclass(frozen=True)
class LocalConfig:
    tau: int = 1
    eta: float = 0.01
    batch_size: int = 1
    lam: float = 0.0
    learner_kind: str = POLICY_GRADIENT
    horizon: int = 50
    h_max: float = 1.0
    baseline: bool = False  # mean-return baseline per time step
    clip_norm: float | None = None  # enforce |g| <= clip_norm
    optimizer: str = "sgd"  # or "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha: float = 0.1  # Q-learning step size
    epsilon: float = 0.1  # Q-learning exploration rate

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.batch_size < 1 or self.horizon < 1:
            raise ValueError("batch_size and horizon must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.learner_kind not in (POLICY_GRADIENT, Q_LEARNING):
            raise ValueError(f"unknown learner_kind {self.learner_kind!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not 0 < self.alpha <= 1 or not 0 <= self.epsilon <= 1:
            raise ValueError("alpha must be in (0, 1] and epsilon in [0, 1]")


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    round: int
    delta: np.ndarray
    n_samples: int

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64).reshape(-1))

    def __eq__(self, other):
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        return (
            (self.client_id, self.round, self.n_samples) == (other.client_id, other.round, other.n_samples)
            and self.delta.shape == other.delta.shape
            and self.delta.tobytes() == other.delta.tobytes()
        )

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


class GradientObjective(Protocol):
    dim: int

    def gradient(self, theta: np.ndarray, cfg: LocalConfig, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        ...


# ---------------------------------------------------------------------------
# policy gradient


def feedback_table(feedback, n_states: int, n_actions: int, h_max: float) -> np.ndarray | None:
    """Clipped ``H[s, a]`` from a table, a :class:`RewardModel`, or ``None``."""
    if feedback is None:
        return None
    if isinstance(feedback, RewardModel):
        return feedback.table(n_states, n_actions)
    H = np.asarray(feedback, dtype=np.float64)
    if H.shape != (n_states, n_actions):
        raise ValueError(f"feedback table must have shape {(n_states, n_actions)}")
    return clip_feedback(H, h_max)


def estimate_policy_gradient(
    theta: np.ndarray,
    env: EnvironmentSpec,
    feedback,
    cfg: LocalConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """REINFORCE on ``batch_size`` episodes of length ``horizon``.

    Returns the batch mean of ``sum_t grad log pi(a_t|s_t) * G_t`` where
    ``G_t = sum_{t' >= t} gamma^t' r_t'`` is the shaped return from ``t``
    onward, discounted from the episode start.  This is unbiased for the
    finite-horizon discounted shaped objective.
    """
    theta = np.asarray(theta, dtype=np.float64)
    S, A = env.n_states, env.n_actions
    if theta.size != S * A:
        raise ValueError(f"theta has {theta.size} entries, environment needs {S * A}")
    pi = tabular_policy(theta, S, A)
    rewards_tab = shaped_reward_table(env, feedback_table(feedback, S, A, cfg.h_max), cfg.lam)
    B, H = cfg.batch_size, cfg.horizon
    states, actions = rollout_batch(env, pi, H, B, rng)
    disc = env.gamma ** np.arange(H)
    r = rewards_tab[states, actions] * disc
    G = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
    if cfg.baseline:
        G = G - G.mean(axis=0, keepdims=True)
    flat_s = states.reshape(-1)
    weights = G.reshape(-1) / B
    g_sa = np.bincount(flat_s * A + actions.reshape(-1), weights=weights, minlength=S * A).reshape(S, A)
    g_s = np.bincount(flat_s, weights=weights, minlength=S)
    grad = g_sa - pi * g_s[:, None]
    return grad.reshape(-1), B * H


@dataclass
class PolicyGradientObjective:
    env: EnvironmentSpec
    feedback: object = None

    @property
    def dim(self) -> int:
        return self.env.dim

    def gradient(self, theta, cfg, rng):
        return estimate_policy_gradient(theta, self.env, self.feedback, cfg, rng)


# ---------------------------------------------------------------------------
# quadratic family


@dataclass
class QuadraticClientObjective:
    """Client ``k`` of a quadratic family with optional feedback pull and
    injected zero-mean gradient noise with ``E|xi|^2 = noise_var``.

    ``noise="sphere"`` draws ``xi`` uniformly on the sphere of radius
    ``sqrt(noise_var)`` (bounded noise); ``"gaussian"`` draws
    ``N(0, noise_var / d I)``.
    """

    spec: QuadraticObjectiveSpec
    k: int
    noise_var: float = 0.0
    pull: FeedbackPull | None = None
    noise: str = "gaussian"

    @property
    def dim(self) -> int:
        return self.spec.d

    def exact_gradient(self, theta, lam: float = 0.0):
        g = quadratic_objective_grad(self.spec, self.k, theta)
        if self.pull is not None and lam > 0:
            g = g + lam * self.pull.grad(self.k, theta)
        return g

    def gradient(self, theta, cfg, rng):
        g = self.exact_gradient(theta, cfg.lam)
        if self.noise_var > 0:
            g = g + draw_noise(rng, g.shape, self.noise_var, self.noise)
        return g, cfg.batch_size


def draw_noise(rng: np.random.Generator, shape, variance: float, kind: str = "gaussian") -> np.ndarray:
    d = shape[-1]
    z = rng.normal(size=shape)
    if kind == "gaussian":
        return z * np.sqrt(variance / d)
    if kind == "sphere":
        return z * (np.sqrt(variance) / np.linalg.norm(z, axis=-1, keepdims=True))
    raise ValueError(f"unknown noise kind {kind!r}")


def clip_gradient(g: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return g
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    scale = np.minimum(1.0, clip_norm / np.maximum(n, 1e-300))
    return g * scale


# ---------------------------------------------------------------------------
# local epoch


def local_rlhf_epoch(
    theta_global: np.ndarray,
    objective,
    cfg: LocalConfig,
    rng: np.random.Generator,
    feedback=None,
    client_id: int = 0,
    round: int = 0,
) -> ClientUpdate:
    """``tau`` ascent steps ``theta <- theta + eta * g`` from ``theta_global``.

    ``objective`` is an :class:`EnvironmentSpec` (REINFORCE with ``feedback``)
    or any object with a ``gradient(theta, cfg, rng)`` method.
    """
    if isinstance(objective, EnvironmentSpec):
        objective = PolicyGradientObjective(objective, feedback)
    start = as_params(theta_global)
    theta = start.copy()
    n_total = 0
    if cfg.optimizer == "adam":
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        b1, b2 = cfg.adam_betas
    for i in range(cfg.tau):
        g, n = objective.gradient(theta, cfg, rng)
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"client {client_id} round {round} step {i}: non-finite gradient "
                f"(|theta|={np.linalg.norm(theta):.3e})"
            )
        g = clip_gradient(g, cfg.clip_norm)
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = (m / (1 - b1 ** (i + 1))) / (np.sqrt(v / (1 - b2 ** (i + 1))) + cfg.adam_eps)
            theta = theta + cfg.eta * step
        else:
            theta = theta + cfg.eta * g
        n_total += n
    check_finite(theta, f"client {client_id} parameters")
    return ClientUpdate(client_id, round, theta - start, n_total)


# ---------------------------------------------------------------------------
# Q-learning


@dataclass(frozen=True, eq=False)
class QTable:
    q: np.ndarray
    alpha: float = 0.1
    epsilon: float = 0.1

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.ndim != 2:
            raise ValueError("Q-table must be 2-D (states x actions)")
        object.__setattr__(self, "q", check_finite(q, "Q-table"))

    @classmethod
    def from_params(cls, theta, n_states, n_actions, alpha=0.1, epsilon=0.1) -> "QTable":
        return cls(np.asarray(theta, dtype=np.float64).reshape(n_states, n_actions), alpha, epsilon)

    def greedy(self) -> np.ndarray:
        return self.q.argmax(axis=1)


def q_bound(r_max: float, lam: float, h_max: float, gamma: float) -> float:
    """``R_total,max / (1 - gamma)`` with ``R_total,max = R_max + lam * H_max``."""
    return (r_max + lam * h_max) / (1.0 - gamma)


def _greedy_action(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if best.size == 1 else int(best[rng.integers(best.size)])


def q_learning_epoch(
    qtable: QTable,
    env,
    reward_model: RewardModel | None,
    cfg: LocalConfig,
    rng: np.random.Generator,
    client_id: int = 0,
    round: int = 0,
) -> tuple[QTable, ClientUpdate]:
    """``tau * batch_size`` epsilon-greedy Q-learning steps on the shaped reward
    ``R0 + lam * H`` with ``H`` predicted by ``reward_model``.

    ``env`` needs ``n_states``, ``n_actions``, ``gamma``, ``r_max`` and the
    ``initial_state`` / ``step`` sampling interface.  Episodes restart every
    ``cfg.horizon`` steps.  Q-values are clipped to ``R_total,max / (1 - gamma)``.
    """
    q = qtable.q.copy()
    if q.shape != (env.n_states, env.n_actions):
        raise ValueError(f"Q-table shape {q.shape} does not match environment {(env.n_states, env.n_actions)}")
    use_feedback = reward_model is not None and cfg.lam > 0
    H = reward_model.table(env.n_states, env.n_actions) if use_feedback else None
    bound = q_bound(env.r_max, cfg.lam if use_feedback else 0.0, cfg.h_max, env.gamma)
    alpha, eps, gamma = qtable.alpha, qtable.epsilon, env.gamma
    n_steps = cfg.tau * cfg.batch_size
    s = env.initial_state(rng)
    for step in range(n_steps):
        if step and step % cfg.horizon == 0:
            s = env.initial_state(rng)
        if eps > 0 and rng.random() < eps:
            a = int(rng.integers(env.n_actions))
        else:
            a = _greedy_action(q[s], rng)
        r, s_next = env.step(s, a, rng)
        if use_feedback:
            r = r + cfg.lam * H[s, a]
        target = r + gamma * q[s_next].max()
        q[s, a] = min(bound, max(-bound, q[s, a] + alpha * (target - q[s, a])))
        s = s_next
    check_finite(q, f"client {client_id} Q-table")
    update = ClientUpdate(client_id, round, q.reshape(-1) - qtable.q.reshape(-1), n_steps)
    return QTable(q, alpha, eps), update
