"""Concave quadratic client objectives with known curvature, plus the bounded
"feedback pull" used to emulate human feedback in that family.

Client ``k`` maximizes ``J_k(theta) = -(0.5 theta^T A_k theta - b_k^T theta)``.
All methods broadcast over leading batch axes of ``theta`` (shape ``(..., d)``)
so that many seeds can be simulated at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from frlhf.core import check_finite


@dataclass(frozen=True, eq=False)
class QuadraticObjectiveSpec:
    A: np.ndarray  # (K, d, d), each symmetric positive definite
    b: np.ndarray  # (K, d)
    mu: float = field(init=False)
    L: float = field(init=False)
    L_clients: float = field(init=False)
    theta_star: np.ndarray = field(init=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if A.ndim == 2:
            A = A[None]
        if b.ndim == 1:
            b = b[None]
        if A.ndim != 3 or A.shape[1] != A.shape[2] or b.shape != A.shape[:2]:
            raise ValueError(f"A must be (K, d, d) and b (K, d); got {A.shape}, {b.shape}")
        check_finite(A, "A")
        check_finite(b, "b")
        if np.max(np.abs(A - A.transpose(0, 2, 1))) > 1e-12 * max(1.0, np.max(np.abs(A))):
            raise ValueError("every A_k must be symmetric")
        A = 0.5 * (A + A.transpose(0, 2, 1))
        client_eigs = np.linalg.eigvalsh(A)
        if np.any(client_eigs[:, 0] <= 0):
            raise ValueError("every A_k must be positive definite")
        A_bar = A.mean(axis=0)
        eigs = np.linalg.eigvalsh(A_bar)
        for arr in (A, b):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "mu", float(eigs[0]))
        object.__setattr__(self, "L", float(eigs[-1]))
        object.__setattr__(self, "L_clients", float(client_eigs[:, -1].max()))
        star = np.linalg.solve(A_bar, b.mean(axis=0))
        star.setflags(write=False)
        object.__setattr__(self, "theta_star", star)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def client_objective(self, k: int, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        Ath = theta @ self.A[k]  # A symmetric
        return -(0.5 * np.sum(theta * Ath, axis=-1) - theta @ self.b[k])

    def objective(self, theta: np.ndarray) -> np.ndarray:
        return np.mean([self.client_objective(k, theta) for k in range(self.K)], axis=0)

    @property
    def j_star(self) -> float:
        return float(self.objective(self.theta_star))

    def gap(self, theta: np.ndarray) -> np.ndarray:
        """``J(theta*) - J(theta)`` evaluated without cancellation through the
        quadratic form ``0.5 (theta - theta*)^T A_bar (theta - theta*)``."""
        e = np.asarray(theta, dtype=np.float64) - self.theta_star
        A_bar = self.A.mean(axis=0)
        return 0.5 * np.sum(e * (e @ A_bar), axis=-1)

    def grad(self, k: int, theta: np.ndarray) -> np.ndarray:
        return quadratic_objective_grad(self, k, theta)


def quadratic_objective_grad(spec: QuadraticObjectiveSpec, k: int, theta: np.ndarray) -> np.ndarray:
    """Exact ``grad J_k(theta) = b_k - A_k theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != spec.d:
        raise ValueError(f"theta has dimension {theta.shape[-1]}, expected {spec.d}")
    if not 0 <= k < spec.K:
        raise ValueError(f"client index {k} out of range for K={spec.K}")
    return spec.b[k] - theta @ spec.A[k]


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    return Q * np.sign(np.diag(R))


def make_quadratic_family(
    K: int,
    d: int,
    mu: float,
    L: float,
    rng: np.random.Generator,
    b_scale: float = 1.0,
    heterogeneity: float = 1.0,
    shared_curvature: bool = True,
) -> QuadraticObjectiveSpec:
    """Random family whose mean Hessian has spectrum exactly spanning ``[mu, L]``
    when ``shared_curvature`` (the default); otherwise each ``A_k`` has its own
    eigenbasis with spectrum inside ``[mu, L]``.

    ``b_k = A_k (c + heterogeneity * z_k)`` with ``c, z_k ~ N(0, b_scale^2 I)``,
    so client optima scatter around a common centre.
    """
    if not 0 < mu <= L:
        raise ValueError("need 0 < mu <= L")

    def spectrum():
        inner = rng.uniform(mu, L, size=max(d - 2, 0))
        eigs = np.concatenate([[mu], inner, [L]])[:d] if d >= 2 else np.array([mu])
        return eigs

    if shared_curvature:
        Q = random_orthogonal(d, rng)
        A0 = (Q * spectrum()) @ Q.T
        A = np.repeat(A0[None], K, axis=0)
    else:
        A = np.empty((K, d, d))
        for k in range(K):
            Q = random_orthogonal(d, rng)
            A[k] = (Q * spectrum()) @ Q.T
    A = 0.5 * (A + A.transpose(0, 2, 1))
    centre = rng.normal(scale=b_scale, size=d)
    optima = centre + heterogeneity * rng.normal(scale=b_scale, size=(K, d))
    b = np.einsum("kij,kj->ki", A, optima)
    return QuadraticObjectiveSpec(A, b)


@dataclass(frozen=True, eq=False)
class FeedbackPull:
    """Bounded feedback ``H_k(theta) = h_max (2 exp(-|theta - c_k|^2 / (2 w^2)) - 1)``.

    ``H_k`` lies in ``[-h_max, h_max]`` and peaks at the client target ``c_k``;
    adding ``lam * H_k`` to client ``k``'s objective pulls its optimum towards
    ``c_k`` by an amount proportional to ``lam`` for small ``lam``.
    """

    targets: np.ndarray  # (K, d)
    width: float = 1.0
    h_max: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.h_max < 0:
            raise ValueError("width must be > 0 and h_max >= 0")
        t = np.array(self.targets, dtype=np.float64)
        t.setflags(write=False)
        object.__setattr__(self, "targets", t)

    def value(self, k: int, theta: np.ndarray) -> np.ndarray:
        diff = np.asarray(theta, dtype=np.float64) - self.targets[k]
        bump = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.width**2))
        return self.h_max * (2.0 * bump - 1.0)

    def grad(self, k: int, theta: np.ndarray) -> np.ndarray:
        diff = np.asarray(theta, dtype=np.float64) - self.targets[k]
        bump = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.width**2))
        return (-2.0 * self.h_max / self.width**2) * bump[..., None] * diff

    @property
    def grad_bound(self) -> float:
        """``sup |grad H_k|``, attained at distance ``width`` from the target."""
        return 2.0 * self.h_max / self.width * np.exp(-0.5)


@dataclass(frozen=True, eq=False)
class FeedbackTilt:
    """Bounded feedback ``H_k(theta) = h_max tanh(v_k . (theta - anchor) / w)``.

    Nearly linear around ``anchor`` (no curvature there), saturating far
    away; ``lam * H_k`` displaces client ``k``'s optimum along ``v_k``.
    """

    directions: np.ndarray  # (K, d) unit vectors
    anchor: np.ndarray  # (d,)
    width: float = 1.0
    h_max: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.h_max < 0:
            raise ValueError("width must be > 0 and h_max >= 0")
        v = np.array(self.directions, dtype=np.float64)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        a = np.array(self.anchor, dtype=np.float64)
        for arr in (v, a):
            arr.setflags(write=False)
        object.__setattr__(self, "directions", v)
        object.__setattr__(self, "anchor", a)

    def _z(self, k, theta):
        return (np.asarray(theta, dtype=np.float64) - self.anchor) @ self.directions[k] / self.width

    def value(self, k: int, theta: np.ndarray) -> np.ndarray:
        return self.h_max * np.tanh(self._z(k, theta))

    def grad(self, k: int, theta: np.ndarray) -> np.ndarray:
        sech2 = 1.0 - np.tanh(self._z(k, theta)) ** 2
        return (self.h_max / self.width) * np.asarray(sech2)[..., None] * self.directions[k]

    @property
    def grad_bound(self) -> float:
        return self.h_max / self.width
