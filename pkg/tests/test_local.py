import numpy as np
import pytest

from frlhf.core import NumericalError, rng_stream
from frlhf.environments.mdp import EnvironmentSpec, random_env
from frlhf.environments.quadratic import make_quadratic_family
from frlhf.feedback import OneHotFeatures, RewardModel
from frlhf.local import (
    Q_LEARNING,
    ClientUpdate,
    LocalConfig,
    QTable,
    QuadraticClientObjective,
    clip_gradient,
    draw_noise,
    local_rlhf_epoch,
    q_bound,
    q_learning_epoch,
)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"tau": 0},
        {"eta": 0.0},
        {"batch_size": 0},
        {"lam": -1.0},
        {"learner_kind": "ppo"},
        {"optimizer": "rmsprop"},
        {"clip_norm": 0.0},
        {"alpha": 0.0},
        {"epsilon": 1.5},
    ],
)
def test_local_config_validation(kwargs):
    with pytest.raises(ValueError):
        LocalConfig(**kwargs)


def test_client_update_equality_is_bitwise():
    a = ClientUpdate(1, 2, [0.1, 0.2], 5)
    assert a == ClientUpdate(1, 2, np.array([0.1, 0.2]), 5)
    assert a != ClientUpdate(1, 2, [0.1, np.nextafter(0.2, 1.0)], 5)
    assert a != ClientUpdate(1, 3, [0.1, 0.2], 5)
    assert a.norm == pytest.approx(np.hypot(0.1, 0.2))


@pytest.fixture(scope="module")
def spec():
    return make_quadratic_family(2, 4, 0.5, 2.0, rng_stream(8))


def test_exact_local_epoch_matches_closed_form(spec):
    """Noise-free ascent is the affine map theta <- (I - eta A) theta + eta b."""
    cfg = LocalConfig(tau=7, eta=0.1)
    theta0 = rng_stream(1).normal(size=4)
    up = local_rlhf_epoch(theta0, QuadraticClientObjective(spec, 1), cfg, rng_stream(2), client_id=1, round=3)
    M = np.eye(4) - 0.1 * spec.A[1]
    x = theta0.copy()
    for _ in range(7):
        x = M @ x + 0.1 * spec.b[1]
    np.testing.assert_allclose(theta0 + up.delta, x, rtol=1e-13)
    assert (up.client_id, up.round, up.n_samples) == (1, 3, 7)


def test_local_epoch_reproducible(spec):
    obj = QuadraticClientObjective(spec, 0, noise_var=1.0)
    cfg = LocalConfig(tau=5, eta=0.05)
    a = local_rlhf_epoch(np.zeros(4), obj, cfg, rng_stream(3, 0, 0))
    b = local_rlhf_epoch(np.zeros(4), obj, cfg, rng_stream(3, 0, 0))
    c = local_rlhf_epoch(np.zeros(4), obj, cfg, rng_stream(3, 0, 1))
    assert a == b and a != c


def test_zero_gradient_client_is_a_no_op():
    class Flat:
        dim = 3

        def gradient(self, theta, cfg, rng):
            return np.zeros(3), 1

    up = local_rlhf_epoch(np.ones(3), Flat(), LocalConfig(tau=4), rng_stream(0))
    np.testing.assert_array_equal(up.delta, 0.0)


def test_non_finite_gradient_raises():
    class Bad:
        dim = 2

        def gradient(self, theta, cfg, rng):
            return np.array([np.nan, 0.0]), 1

    with pytest.raises(NumericalError, match="client 4 round 2"):
        local_rlhf_epoch(np.zeros(2), Bad(), LocalConfig(), rng_stream(0), client_id=4, round=2)


def test_clipping_bounds_every_step(spec):
    obj = QuadraticClientObjective(spec, 0, noise_var=4.0)
    cfg = LocalConfig(tau=10, eta=0.1, clip_norm=0.5)
    up = local_rlhf_epoch(np.full(4, 50.0), obj, cfg, rng_stream(1))
    assert up.norm <= 10 * 0.1 * 0.5 + 1e-12
    g = np.array([[3.0, 4.0], [0.3, 0.4]])
    np.testing.assert_allclose(clip_gradient(g, 1.0), [[0.6, 0.8], [0.3, 0.4]])
    assert clip_gradient(g, None) is g


@pytest.mark.parametrize("kind", ["gaussian", "sphere"])
def test_noise_variance(kind):
    z = draw_noise(rng_stream(2), (50_000, 6), 2.5, kind)
    assert np.mean(np.sum(z**2, axis=1)) == pytest.approx(2.5, rel=0.02)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=0.03)
    if kind == "sphere":
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.sqrt(2.5))
    with pytest.raises(ValueError):
        draw_noise(rng_stream(0), (2, 2), 1.0, "laplace")


def test_adam_moves_towards_optimum(spec):
    cfg = LocalConfig(tau=200, eta=0.05, optimizer="adam")
    obj = QuadraticClientObjective(spec, 0)
    theta0 = np.zeros(4)
    up = local_rlhf_epoch(theta0, obj, cfg, rng_stream(0))
    opt = np.linalg.solve(spec.A[0], spec.b[0])
    assert np.linalg.norm(theta0 + up.delta - opt) < 0.2 * np.linalg.norm(opt)


def test_policy_gradient_epoch_on_environment():
    env = random_env(3, 2, rng_stream(1), gamma=0.5)
    cfg = LocalConfig(tau=2, eta=0.1, batch_size=8, horizon=10)
    up = local_rlhf_epoch(np.zeros(6), env, cfg, rng_stream(2))
    assert up.n_samples == 2 * 8 * 10 and up.delta.shape == (6,)
    # per-state logit updates of a softmax policy gradient sum to zero
    np.testing.assert_allclose(up.delta.reshape(3, 2).sum(axis=1), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Q-learning


def chain():
    # deterministic 2-state chain: action 1 moves to / stays in state 1 and pays 1
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    R = np.array([[0.0, 1.0], [0.0, 1.0]])
    return EnvironmentSpec(P, R, [1.0, 0.0], 0.5)


def test_q_learning_converges_to_optimal_values():
    env = chain()
    cfg = LocalConfig(tau=50, batch_size=100, learner_kind=Q_LEARNING, horizon=20)
    table, up = q_learning_epoch(QTable(np.zeros((2, 2)), alpha=0.2, epsilon=0.3), env, None, cfg, rng_stream(0))
    # Q*(s, 1) = 1 / (1 - 0.5) = 2, Q*(s, 0) = 0 + 0.5 * 2 = 1
    np.testing.assert_allclose(table.q, [[1.0, 2.0], [1.0, 2.0]], atol=1e-3)
    np.testing.assert_array_equal(table.greedy(), [1, 1])
    np.testing.assert_array_equal(up.delta, table.q.reshape(-1))
    assert up.n_samples == 5000


def test_q_learning_feedback_shapes_reward():
    env = chain()
    model = RewardModel(np.array([1.0, -1.0, 1.0, -1.0]), h_max=1.0, features=OneHotFeatures(2, 2))
    cfg = LocalConfig(tau=50, batch_size=100, learner_kind=Q_LEARNING, horizon=20, lam=2.0)
    table, _ = q_learning_epoch(QTable(np.zeros((2, 2)), 0.2, 0.3), env, model, cfg, rng_stream(1))
    # shaped rewards: action 0 pays 2, action 1 pays -1 -> action 0 optimal with Q = 4
    np.testing.assert_array_equal(table.greedy(), [0, 0])
    assert table.q[0, 0] == pytest.approx(4.0, abs=1e-3)
    cfg0 = LocalConfig(tau=50, batch_size=100, learner_kind=Q_LEARNING, horizon=20, lam=0.0)
    t0, _ = q_learning_epoch(QTable(np.zeros((2, 2)), 0.2, 0.3), env, model, cfg0, rng_stream(1))
    np.testing.assert_array_equal(t0.greedy(), [1, 1])


def test_q_values_clipped_to_bound():
    env = chain()
    bound = q_bound(1.0, 0.0, 1.0, 0.5)
    assert bound == 2.0
    q0 = np.full((2, 2), 100.0)
    cfg = LocalConfig(tau=1, batch_size=50, learner_kind=Q_LEARNING)
    table, _ = q_learning_epoch(QTable(q0, 1.0, 0.5), env, None, cfg, rng_stream(2))
    visited = table.q != 100.0
    assert np.all(np.abs(table.q[visited]) <= bound + 1e-12)


def test_q_learning_shape_mismatch():
    with pytest.raises(ValueError):
        q_learning_epoch(QTable(np.zeros((3, 2))), chain(), None, LocalConfig(), rng_stream(0))
    assert QTable.from_params(np.arange(4.0), 2, 2).q.shape == (2, 2)
