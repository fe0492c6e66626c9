"""Closed-form convergence, sample-complexity and trade-off calculators, plus
empirical estimators for the smoothness / gradient / variance / PL constants.

The calculators use plain arithmetic operators only, so they accept
``fractions.Fraction`` inputs and then return exact rationals.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


class LearningRateWarning(UserWarning):
    """The bound was evaluated at a learning rate other than ``1 / (L tau)``."""


@dataclass(frozen=True)
class BoundConstants:
    L: float
    mu: float
    G: float = 0.0
    sigma2: float = 0.0
    M2: float | None = None  # second-moment bound; kept for completeness, feeds no calculator
    h_max: float = 0.0
    lam: float = 0.0
    gamma: float = 0.0
    r_max: float = 0.0
    K: int = 1
    T: int = 1
    tau: int = 1
    eta: float | None = None  # defaults to 1 / (L tau)
    j_star: float = 0.0
    j0: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.L < self.mu:
            raise ValueError("need L >= mu")
        for name in ("G", "sigma2", "h_max", "lam", "r_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.K < 1 or self.T < 1 or self.tau < 1:
            raise ValueError("K, T and tau must be >= 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.eta is None:
            object.__setattr__(self, "eta", 1 / (self.L * self.tau))
        elif not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.M2 is not None and self.M2 < self.sigma2:
            raise ValueError("M2 must dominate sigma2")
        if self.j_star < self.j0:
            raise ValueError("j_star must be >= j0 (J* is the maximum)")

    @property
    def initial_gap(self):
        return self.j_star - self.j0

    def replace(self, **changes) -> "BoundConstants":
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc.update(changes)
        return BoundConstants(**doc)

    # JSON uses "lambda" for the feedback weight
    def to_dict(self) -> dict:
        doc = {k: _plain(v) for k, v in asdict(self).items()}
        doc["lambda"] = doc.pop("lam")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundConstants":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown constant(s): {', '.join(unknown)}")
        missing = sorted(n for n in ("L", "mu") if n not in doc)
        if missing:
            raise ValueError(f"missing constant(s): {', '.join(missing)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "BoundConstants":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _plain(v):
    return v if v is None or isinstance(v, int) else float(v)


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class ConvergenceTerms:
    rounds: object  # initial-gap term, shrinks with T
    variance: object  # gradient variance term, shrinks with K
    feedback: object  # human-feedback bias term
    total: object


def _check_eta(c: BoundConstants) -> None:
    target = 1 / (c.L * c.tau)
    if abs(c.eta - target) > 1e-12 * abs(target):
        warnings.warn(
            f"bound assumes eta = 1/(L tau) = {float(target):.6g}, got {float(c.eta):.6g}",
            LearningRateWarning,
            stacklevel=3,
        )


def convergence_terms(c: BoundConstants) -> ConvergenceTerms:
    _check_eta(c)
    rounds = (c.L / (c.mu * c.T)) * c.initial_gap
    variance = (c.G**2 + c.sigma2) / (2 * c.mu * c.K)
    feedback = (c.L / c.mu) * c.lam * c.h_max
    return ConvergenceTerms(rounds, variance, feedback, rounds + variance + feedback)


def convergence_bound(c: BoundConstants):
    """Upper bound on ``J(theta*) - J(theta_avg)`` after ``T`` rounds."""
    return convergence_terms(c).total


def contraction_factor(c: BoundConstants):
    """Per-round factor ``1 - 2 mu eta tau (1 - L eta tau / 2)``."""
    s = c.eta * c.tau
    return 1 - 2 * c.mu * s * (1 - c.L * s / 2)


def recursion_errors(c: BoundConstants) -> tuple:
    """Per-round additive errors ``(gradient noise, feedback bias)``."""
    s = c.eta * c.tau
    return (c.L / 2) * (s * s / c.K) * (c.G**2 + c.sigma2), c.lam * c.h_max


def unrolled_terms(c: BoundConstants) -> ConvergenceTerms:
    """Geometric-sum form ``gap0 / (T (1 - rho)) + errors / (1 - rho)``; equals
    :func:`convergence_terms` term by term when ``eta = 1 / (L tau)``."""
    rho = contraction_factor(c)
    if not 0 <= rho < 1:
        raise ValueError(f"contraction factor {float(rho)} outside [0, 1); learning rate too large")
    e_grad, e_fb = recursion_errors(c)
    one = 1 - rho
    rounds = c.initial_gap / (c.T * one)
    variance = e_grad / one
    feedback = e_fb / one
    return ConvergenceTerms(rounds, variance, feedback, rounds + variance + feedback)


def recursion_average(c: BoundConstants) -> float:
    """Exact finite average over ``t < T`` of the unrolled recursion
    ``rho^t gap0 + e (1 - rho^t) / (1 - rho)``; never exceeds :func:`unrolled_terms`."""
    rho = float(contraction_factor(c))
    e = float(sum(recursion_errors(c)))
    t = np.arange(c.T)
    pw = rho**t
    return float(np.mean(pw * float(c.initial_gap) + e * (1 - pw) / (1 - rho)))


def drift_bound(eta, tau, G, sigma2):
    """Drift bound ``eta^2 tau^2 (G^2 + sigma^2)`` on ``E|theta^k - theta|^2``."""
    return eta**2 * tau**2 * (G**2 + sigma2)


# ---------------------------------------------------------------------------
# sample complexity


@dataclass(frozen=True)
class SampleComplexity:
    N: object
    K_min: object
    T_min: object
    lambda_hmax_cap: object
    k_clamped: bool = False

    @property
    def clients(self) -> int:
        return max(1, math.ceil(self.K_min))

    @property
    def rounds(self) -> int:
        return max(1, math.ceil(self.T_min))


def sample_complexity(c: BoundConstants, epsilon) -> SampleComplexity:
    """Rounds, clients and feedback budget to reach accuracy ``epsilon`` with the
    error split evenly in thirds between the three bound terms."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    T_min = 3 * c.L * c.initial_gap / (c.mu * epsilon)
    K_min = 3 * (c.G**2 + c.sigma2) / (2 * c.mu * epsilon)
    cap = c.mu * epsilon / (3 * c.L)
    clamped = K_min < 1
    if clamped:
        K_min = 1
    return SampleComplexity(K_min * T_min, K_min, T_min, cap, clamped)


# ---------------------------------------------------------------------------
# personalization trade-off


@dataclass(frozen=True)
class TradeoffInputs:
    j0_client: Sequence[float]  # J_k^0 of each client's own policy
    personalization: Sequence[float]  # P_k per client
    r_total_max: float
    gamma: float

    def __post_init__(self):
        j = np.asarray(self.j0_client, dtype=np.float64)
        p = np.asarray(self.personalization, dtype=np.float64)
        if j.ndim != 1 or j.size == 0 or j.shape != p.shape:
            raise ValueError("need equal-length non-empty per-client sequences")
        if np.any(p < 0) or np.any(np.isnan(p)):
            raise ValueError("personalization scores must be >= 0")
        if self.r_total_max < 0 or not 0 <= self.gamma < 1:
            raise ValueError("need r_total_max >= 0 and gamma in [0, 1)")


def tradeoff_constant(r_total_max, gamma):
    """``C = 2 sqrt(2) R_total,max / (1 - gamma)^2``."""
    return 2 * math.sqrt(2) * r_total_max / (1 - gamma) ** 2


def tradeoff_lower_bound(t: TradeoffInputs) -> float:
    j = np.asarray(t.j0_client, dtype=np.float64)
    p = np.asarray(t.personalization, dtype=np.float64)
    return float(j.mean() - tradeoff_constant(t.r_total_max, t.gamma) * np.sqrt(p).mean())


# ---------------------------------------------------------------------------
# constant estimation


class ObjectiveHandle(Protocol):
    K: int
    dim: int

    def grad(self, k: int, theta: np.ndarray) -> np.ndarray: ...  # exact client gradient

    def value(self, theta: np.ndarray) -> float: ...  # global objective

    def sample_grad(self, k: int, theta: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray: ...  # (n, d)


class ConstantUnavailableError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalConstants:
    """Sampled estimates; ``L``, ``G`` and ``sigma2`` are lower bounds on the
    true suprema, ``mu`` an upper bound on the true infimum."""

    L: float
    G: float
    sigma2: float
    mu: float | None
    n_points: int
    sampled: bool = True
    certified: bool = False


def global_grad(h: ObjectiveHandle, theta):
    return np.mean([h.grad(k, theta) for k in range(h.K)], axis=0)


def estimate_constants(
    h: ObjectiveHandle,
    n_points: int,
    rng: np.random.Generator,
    *,
    center=None,
    radius: float = 1.0,
    j_star: float | None = None,
    noise_samples: int = 0,
    noise_points: int = 4,
    refine_iters: int = 200,
    need_mu: bool = True,
) -> EmpiricalConstants:
    """Estimate ``L``, ``G``, ``sigma^2`` and (when ``j_star`` is given) ``mu``.

    Points are drawn uniformly in a ball of ``radius`` around ``center``.
    Random pairs are complemented by gradient-difference power iterations
    along the directions of largest and smallest curvature, and the PL ratio
    is also probed near the ascent maximizer, so the extreme constants are
    approached even in high dimension.
    """
    if n_points < 2:
        raise ValueError("need at least two sample points")
    d = h.dim
    c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)

    def ball(n):
        z = rng.normal(size=(n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return c + radius * z * rng.random((n, 1)) ** (1.0 / d)

    pts = ball(n_points)
    grads = np.array([global_grad(h, p) for p in pts])
    G_hat = max(float(np.linalg.norm(h.grad(k, p))) for p in pts for k in range(h.K))

    L_hat = 0.0
    for i in range(n_points - 1):
        den = np.linalg.norm(pts[i + 1] - pts[i])
        if den > 0:
            L_hat = max(L_hat, float(np.linalg.norm(grads[i + 1] - grads[i]) / den))

    # curvature directions from gradient differences: Hu ~ g(p) - g(p + s u)
    step = 1e-3 * radius
    base, g_base = c, global_grad(h, c)

    def hess_vec(u):
        return (g_base - global_grad(h, base + step * u)) / step

    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    for _ in range(refine_iters):
        hu = hess_vec(u)
        n = np.linalg.norm(hu)
        if n == 0:
            break
        L_hat = max(L_hat, float(n))
        u = hu / n

    mu_hat = None
    if need_mu:
        if j_star is None:
            raise ConstantUnavailableError("mu needs the optimal value j_star")
        shift = max(L_hat, 1e-12)
        w = rng.normal(size=d)
        w /= np.linalg.norm(w)
        for _ in range(refine_iters):
            hw = shift * w - hess_vec(w)
            n = np.linalg.norm(hw)
            if n == 0:
                break
            w = hw / n
        # locate the maximizer by exact-gradient ascent at step 1/L
        x = c.copy()
        for _ in range(20 * refine_iters):
            x = x + global_grad(h, x) / shift
        probes = [p for p in pts]
        probes += [x + radius * s * w for s in (0.5, -0.5, 0.1, -0.1)]
        ratios = []
        for p in probes:
            gap = j_star - h.value(p)
            if gap > 1e-9 * max(1.0, abs(j_star)):
                g = global_grad(h, p)
                ratios.append(float(g @ g) / (2.0 * gap))
        if not ratios:
            raise ConstantUnavailableError("no sample point with a positive optimality gap")
        mu_hat = min(ratios)

    sigma2_hat = 0.0
    if noise_samples >= 2:
        for p in pts[:noise_points]:
            for k in range(h.K):
                s = h.sample_grad(k, p, rng, noise_samples)
                var = float(np.sum(np.var(s, axis=0, ddof=1)))
                sigma2_hat = max(sigma2_hat, var)
    return EmpiricalConstants(L_hat, G_hat, sigma2_hat, mu_hat, n_points)


@dataclass
class QuadraticHandle:
    """:class:`ObjectiveHandle` view of a quadratic family with injected noise."""

    spec: object  # QuadraticObjectiveSpec
    noise_var: float = 0.0
    noise: str = "gaussian"

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def dim(self) -> int:
        return self.spec.d

    def grad(self, k, theta):
        return self.spec.grad(k, theta)

    def value(self, theta):
        return float(self.spec.objective(theta))

    def sample_grad(self, k, theta, rng, n):
        from frlhf.local import draw_noise

        g = self.spec.grad(k, theta)
        if self.noise_var == 0:
            return np.repeat(g[None], n, axis=0)
        return g + draw_noise(rng, (n, self.dim), self.noise_var, self.noise)


# ---------------------------------------------------------------------------
# rate regression


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float | None  # None when the response is constant


@dataclass(frozen=True)
class RateFit:
    personalization: LinearFit  # log P vs log lambda
    global_performance: LinearFit  # J_g vs lambda
    samples: LinearFit  # N vs lambda


def linear_fit(x, y) -> LinearFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("degenerate regression: x has no spread")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    if ss_tot == 0:
        return LinearFit(slope, intercept, None)
    ss_res = float(np.sum((y - (intercept + slope * x)) ** 2))
    return LinearFit(slope, intercept, 1.0 - ss_res / ss_tot)


def rate_regression(rows: Sequence[tuple]) -> RateFit:
    """Fit ``(lambda, mean P_k, J_g, N)`` rows.  Needs at least five positive
    lambda values spanning a factor of ten; zero-lambda rows are skipped in
    the log-log fit but used in the linear fits."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError("rows must be (lambda, P, J_g, N) tuples")
    lam, P, Jg, N = arr.T
    pos = lam > 0
    if pos.sum() < 5:
        raise ValueError("need at least 5 positive lambda values")
    if lam[pos].max() < 10 * lam[pos].min():
        raise ValueError("lambda values must span at least one decade")
    if np.any(P[pos] <= 0):
        raise ValueError("personalization must be > 0 for every positive lambda")
    p_fit = linear_fit(np.log(lam[pos]), np.log(P[pos]))
    if p_fit.r2 is None:
        raise ValueError("degenerate sweep: personalization is constant")
    return RateFit(p_fit, linear_fit(lam, Jg), linear_fit(lam, N))
