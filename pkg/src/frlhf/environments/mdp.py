"""Tabular MDPs, tabular softmax policies, rollouts and exact evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from frlhf.core import check_finite, softmax_rows

ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """One client MDP: transition ``P[s, a, s']``, intrinsic reward ``R0[s, a]``,
    initial distribution ``rho0`` and discount ``gamma``."""

    transition: np.ndarray
    intrinsic_reward: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    r_max: float | None = None
    _cum_transition: np.ndarray = field(init=False, repr=False)
    _cum_initial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.intrinsic_reward, dtype=np.float64)
        rho = np.array(self.initial_dist, dtype=np.float64).reshape(-1)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if rho.shape != (S,):
            raise ValueError(f"rho0 must have length {S}, got {rho.shape}")
        for name, arr in (("transition", P), ("reward", R), ("rho0", rho)):
            check_finite(arr, name)
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be probability distributions")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_TOL:
            raise ValueError("rho0 must be a probability distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        observed = float(np.max(np.abs(R)))
        if self.r_max is None:
            object.__setattr__(self, "r_max", observed)
        elif observed > self.r_max:
            raise ValueError(f"|R0| reaches {observed} > declared r_max {self.r_max}")
        for arr in (P, R, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "intrinsic_reward", R)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "_cum_transition", np.cumsum(P, axis=2))
        object.__setattr__(self, "_cum_initial", np.cumsum(rho))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    # -- sampling interface shared with learners -------------------------

    def initial_state(self, rng: np.random.Generator) -> int:
        return _draw(self._cum_initial, rng.random())

    def step(self, state: int, action: int, rng: np.random.Generator) -> tuple[float, int]:
        reward = float(self.intrinsic_reward[state, action])
        return reward, _draw(self._cum_transition[state, action], rng.random())

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "states": self.n_states,
            "actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.intrinsic_reward.tolist(),
            "rho0": self.initial_dist.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvironmentSpec":
        """Load ``{states, actions, transition, reward, rho0, gamma}``.

        ``states``/``actions`` may be counts or lists of labels; they must
        agree with the array shapes.
        """
        required = {"states", "actions", "transition", "reward", "rho0", "gamma"}
        missing = required - doc.keys()
        if missing:
            raise ValueError(f"environment document lacks {sorted(missing)}")
        unknown = doc.keys() - required - {"r_max"}
        if unknown:
            raise ValueError(f"unknown environment fields {sorted(unknown)}")
        env = cls(doc["transition"], doc["reward"], doc["rho0"], doc["gamma"], doc.get("r_max"))
        for key, n in (("states", env.n_states), ("actions", env.n_actions)):
            declared = doc[key]
            count = declared if isinstance(declared, int) else len(declared)
            if count != n:
                raise ValueError(f"'{key}' declares {count} entries but arrays have {n}")
        return env

    @classmethod
    def load(cls, path: str | Path) -> "EnvironmentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def _draw(cumulative: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, cumulative.size - 1)


def random_env(
    n_states: int,
    n_actions: int,
    rng: np.random.Generator,
    gamma: float = 0.9,
    r_max: float = 1.0,
    rho0: np.ndarray | None = None,
    concentration: float = 1.0,
) -> EnvironmentSpec:
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    if rho0 is None:
        rho0 = rng.dirichlet(np.ones(n_states))
    return EnvironmentSpec(P, R, rho0, gamma, r_max=r_max)


# ---------------------------------------------------------------------------
# policies


def tabular_policy(theta: np.ndarray, n_states: int, n_actions: int) -> np.ndarray:
    """``pi[s, a]`` for logits ``theta`` laid out row-major over ``(s, a)``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != n_states * n_actions:
        raise ValueError(
            f"theta has {theta.size} entries, expected {n_states}x{n_actions}={n_states * n_actions}"
        )
    return softmax_rows(theta.reshape(n_states, n_actions))


def _policy_table(env: EnvironmentSpec, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=np.float64)
    if pi.ndim == 1:
        return tabular_policy(pi, env.n_states, env.n_actions)
    if pi.shape != (env.n_states, env.n_actions):
        raise ValueError(f"policy table must have shape {(env.n_states, env.n_actions)}")
    return pi


def horizon_for(gamma: float, r_total_max: float, rel_tol: float = 1e-6) -> int:
    """Smallest H with ``gamma**H * r_total_max / (1 - gamma) < rel_tol``."""
    if gamma == 0.0:
        return 1
    scale = max(r_total_max, 1e-300) / (1.0 - gamma)
    return max(1, math.ceil(math.log(rel_tol / scale) / math.log(gamma)) + 1)


# ---------------------------------------------------------------------------
# rollouts


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    intrinsic: np.ndarray
    shaped: np.ndarray
    gamma: float

    def __len__(self) -> int:
        return int(self.states.size)

    @property
    def discounted_return(self) -> float:
        return float(np.sum(self.shaped * self.gamma ** np.arange(len(self))))

    @property
    def intrinsic_return(self) -> float:
        return float(np.sum(self.intrinsic * self.gamma ** np.arange(len(self))))


def shaped_reward_table(env: EnvironmentSpec, feedback=None, lam: float = 0.0) -> np.ndarray:
    """``R0 + lam * H`` as an ``(S, A)`` table; ``feedback`` is an ``(S, A)``
    array of already clipped ``H`` values or ``None``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if feedback is None or lam == 0.0:
        return env.intrinsic_reward
    H = np.asarray(feedback, dtype=np.float64)
    if H.shape != (env.n_states, env.n_actions):
        raise ValueError(f"feedback table must have shape {(env.n_states, env.n_actions)}")
    return env.intrinsic_reward + lam * H


def rollout(
    env: EnvironmentSpec,
    theta: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    feedback=None,
    lam: float = 0.0,
) -> Trajectory:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    pi = tabular_policy(theta, env.n_states, env.n_actions)
    cum_pi = np.cumsum(pi, axis=1)
    shaped_tab = shaped_reward_table(env, feedback, lam)
    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    s = env.initial_state(rng)
    for t in range(horizon):
        a = _draw(cum_pi[s], rng.random())
        states[t], actions[t] = s, a
        _, s = env.step(s, a, rng)
    return Trajectory(
        states=states,
        actions=actions,
        intrinsic=env.intrinsic_reward[states, actions].copy(),
        shaped=shaped_tab[states, actions].copy(),
        gamma=env.gamma,
    )


def rollout_batch(
    env: EnvironmentSpec,
    pi: np.ndarray,
    horizon: int,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rollouts of ``n`` independent episodes; returns ``(states,
    actions)`` of shape ``(n, horizon)``."""
    S = env.n_states
    cum_pi = np.cumsum(pi, axis=1)
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    s = np.minimum(np.searchsorted(env._cum_initial, rng.random(n), side="right"), S - 1)
    A = pi.shape[1]
    for t in range(horizon):
        u = rng.random((2, n))
        a = np.minimum((cum_pi[s] <= u[0][:, None]).sum(axis=1), A - 1)
        states[:, t], actions[:, t] = s, a
        s = np.minimum((env._cum_transition[s, a] <= u[1][:, None]).sum(axis=1), S - 1)
    return states, actions


# ---------------------------------------------------------------------------
# exact evaluation


def policy_matrices(env: EnvironmentSpec, pi: np.ndarray, reward: np.ndarray):
    P_pi = np.einsum("sa,sat->st", pi, env.transition)
    r_pi = np.einsum("sa,sa->s", pi, reward)
    return P_pi, r_pi


def policy_values(env: EnvironmentSpec, policy, reward: np.ndarray | None = None) -> np.ndarray:
    """State values ``V = (I - gamma P_pi)^-1 r_pi``."""
    pi = _policy_table(env, policy)
    R = env.intrinsic_reward if reward is None else np.asarray(reward, dtype=np.float64)
    P_pi, r_pi = policy_matrices(env, pi, R)
    M = np.eye(env.n_states) - env.gamma * P_pi
    # gamma < 1 makes M strictly diagonally dominant, hence non-singular
    V = np.linalg.solve(M, r_pi)
    residual = float(np.max(np.abs(M @ V - r_pi)))
    if not np.isfinite(residual) or residual > 1e-10 * max(1.0, float(np.max(np.abs(r_pi)))):
        raise ArithmeticError(f"policy evaluation residual {residual:.3e}")
    return V


def exact_value(env: EnvironmentSpec, policy, reward: np.ndarray | None = None) -> float:
    """``J(pi) = rho0^T (I - gamma P_pi)^-1 r_pi``; ``reward`` defaults to R0."""
    return float(env.initial_dist @ policy_values(env, policy, reward))


def state_visitation(env: EnvironmentSpec, policy) -> np.ndarray:
    """Normalized discounted visitation ``(1-gamma) rho0^T (I - gamma P_pi)^-1``."""
    pi = _policy_table(env, policy)
    P_pi, _ = policy_matrices(env, pi, env.intrinsic_reward)
    d = np.linalg.solve((np.eye(env.n_states) - env.gamma * P_pi).T, env.initial_dist)
    d = (1.0 - env.gamma) * d
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def value_iteration(env: EnvironmentSpec, reward: np.ndarray | None = None, tol: float = 1e-12, max_iter: int = 100_000):
    """Optimal ``(V, Q, greedy_actions)`` by value iteration to sup-norm ``tol``."""
    R = env.intrinsic_reward if reward is None else np.asarray(reward, dtype=np.float64)
    V = np.zeros(env.n_states)
    for _ in range(max_iter):
        Q = R + env.gamma * env.transition @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = R + env.gamma * env.transition @ V
    return V, Q, Q.argmax(axis=1)
