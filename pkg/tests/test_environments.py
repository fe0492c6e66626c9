import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frlhf.core import rng_stream
from frlhf.environments.mdp import (
    EnvironmentSpec,
    exact_value,
    horizon_for,
    policy_values,
    random_env,
    rollout,
    rollout_batch,
    shaped_reward_table,
    state_visitation,
    tabular_policy,
    value_iteration,
)
from frlhf.environments.quadratic import FeedbackPull, FeedbackTilt, make_quadratic_family, quadratic_objective_grad
from frlhf.environments.recommender import (
    HIGH_RATING,
    PREDICT_HIGH,
    PREDICT_LOW,
    make_recommender_env,
    make_recommender_federation,
)


def iterate_values(env, pi, reward, n=3000):
    """Fixed-point iteration of the Bellman expectation operator."""
    P_pi = np.einsum("sa,sat->st", pi, env.transition)
    r_pi = (pi * reward).sum(axis=1)
    V = np.zeros(env.n_states)
    for _ in range(n):
        V = r_pi + env.gamma * P_pi @ V
    return V


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.floats(0, 0.9))
def test_exact_value_matches_bellman_iteration(seed, S, A, gamma):
    rng = rng_stream(seed)
    env = random_env(S, A, rng, gamma=gamma)
    pi = tabular_policy(rng.normal(size=S * A), S, A)
    V = iterate_values(env, pi, env.intrinsic_reward)
    np.testing.assert_allclose(policy_values(env, pi), V, atol=1e-10)
    assert exact_value(env, pi) == pytest.approx(env.initial_dist @ V, abs=1e-10)


def test_value_iteration_beats_every_deterministic_policy():
    env = random_env(4, 3, rng_stream(5), gamma=0.8)
    V_star, _, greedy = value_iteration(env)
    best = None
    for acts in itertools.product(range(3), repeat=4):
        pi = np.eye(3)[list(acts)]
        v = policy_values(env, pi)
        best = v if best is None else np.maximum(best, v)
    np.testing.assert_allclose(V_star, best, atol=1e-9)
    np.testing.assert_allclose(policy_values(env, np.eye(3)[greedy]), V_star, atol=1e-9)


def test_visitation_reproduces_value():
    env = random_env(5, 2, rng_stream(9), gamma=0.7)
    pi = tabular_policy(rng_stream(10).normal(size=10), 5, 2)
    d = state_visitation(env, pi)
    assert d.sum() == pytest.approx(1.0)
    r_pi = (pi * env.intrinsic_reward).sum(axis=1)
    assert d @ r_pi / (1 - env.gamma) == pytest.approx(exact_value(env, pi), rel=1e-10)


def test_rollouts_follow_the_model():
    env = random_env(3, 2, rng_stream(2), gamma=0.5)
    pi = tabular_policy(np.array([0.3, -0.3, 1.0, 0.0, -0.5, 0.5]), 3, 2)
    n = 200_000
    states, actions = rollout_batch(env, pi, 2, n, rng_stream(3))
    np.testing.assert_allclose(np.bincount(states[:, 0], minlength=3) / n, env.initial_dist, atol=5e-3)
    s0, a0, s1 = states[:, 0], actions[:, 0], states[:, 1]
    for s in range(3):
        m = s0 == s
        np.testing.assert_allclose(np.bincount(a0[m], minlength=2) / m.sum(), pi[s], atol=1e-2)
        for a in range(2):
            mm = m & (a0 == a)
            np.testing.assert_allclose(np.bincount(s1[mm], minlength=3) / mm.sum(), env.transition[s, a], atol=2e-2)


def test_single_rollout_returns():
    env = random_env(3, 2, rng_stream(4), gamma=0.9)
    H = np.full((3, 2), 0.5)
    tr = rollout(env, np.zeros(6), 20, rng_stream(5), feedback=H, lam=2.0)
    assert len(tr) == 20
    np.testing.assert_allclose(tr.shaped, tr.intrinsic + 1.0)
    disc = 0.9 ** np.arange(20)
    assert tr.discounted_return == pytest.approx(float(np.sum(disc * (tr.intrinsic + 1.0))))
    with pytest.raises(ValueError):
        rollout(env, np.zeros(6), 0, rng_stream(5))


def test_shaped_reward_table():
    env = random_env(2, 2, rng_stream(1))
    H = np.array([[1.0, -1.0], [0.0, 0.5]])
    np.testing.assert_array_equal(shaped_reward_table(env, H, 0.0), env.intrinsic_reward)
    np.testing.assert_allclose(shaped_reward_table(env, H, 0.5), env.intrinsic_reward + 0.5 * H)
    with pytest.raises(ValueError):
        shaped_reward_table(env, H, -1.0)


@pytest.mark.parametrize("gamma,r", [(0.5, 1.0), (0.9, 2.0), (0.99, 1.0)])
def test_horizon_for_is_minimal(gamma, r):
    H = horizon_for(gamma, r, 1e-6)
    assert gamma**H * r / (1 - gamma) < 1e-6
    assert gamma ** (H - 2) * r / (1 - gamma) >= 1e-6
    assert horizon_for(0.0, 1.0) == 1


def test_environment_json_round_trip(tmp_path):
    env = random_env(3, 2, rng_stream(8), gamma=0.6)
    path = tmp_path / "env.json"
    env.save(path)
    back = EnvironmentSpec.load(path)
    np.testing.assert_array_equal(back.transition, env.transition)
    np.testing.assert_array_equal(back.intrinsic_reward, env.intrinsic_reward)
    np.testing.assert_array_equal(back.initial_dist, env.initial_dist)
    assert back.gamma == env.gamma
    doc = json.loads(path.read_text())
    assert set(doc) == {"states", "actions", "transition", "reward", "rho0", "gamma"}


def test_environment_labels_may_be_lists():
    doc = random_env(2, 2, rng_stream(1)).to_dict()
    doc["states"] = ["a", "b"]
    doc["actions"] = ["left", "right"]
    assert EnvironmentSpec.from_dict(doc).n_states == 2
    doc["actions"] = ["only"]
    with pytest.raises(ValueError, match="actions"):
        EnvironmentSpec.from_dict(doc)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda d: d.update(transition=[[[0.5, 0.6], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]]), "probability"),
        (lambda d: d.update(reward=[[0.0, 0.0]]), "reward"),
        (lambda d: d.update(rho0=[0.2, 0.2]), "rho0"),
        (lambda d: d.update(gamma=1.0), "gamma"),
        (lambda d: d.pop("gamma"), "lacks"),
        (lambda d: d.update(extra=1), "unknown"),
    ],
)
def test_environment_validation(mutate, match):
    doc = random_env(2, 2, rng_stream(1)).to_dict()
    mutate(doc)
    with pytest.raises(ValueError, match=match):
        EnvironmentSpec.from_dict(doc)


def test_declared_r_max_enforced():
    env = random_env(2, 2, rng_stream(1), r_max=1.0)
    with pytest.raises(ValueError, match="r_max"):
        EnvironmentSpec(env.transition, env.intrinsic_reward * 3, env.initial_dist, 0.5, r_max=1.0)


# ---------------------------------------------------------------------------
# quadratic family


@pytest.fixture(scope="module")
def family():
    return make_quadratic_family(3, 6, 0.5, 2.0, rng_stream(21))


def test_quadratic_gradient_matches_finite_differences(family):
    theta = rng_stream(22).normal(size=6)
    for k in range(3):
        g = quadratic_objective_grad(family, k, theta)
        h = 1e-5
        fd = np.array([(family.client_objective(k, theta + h * e) - family.client_objective(k, theta - h * e)) / (2 * h) for e in np.eye(6)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_quadratic_constants_are_the_spectrum(family):
    eigs = np.linalg.eigvalsh(family.A.mean(axis=0))
    assert family.mu == pytest.approx(0.5, rel=1e-12) and family.L == pytest.approx(2.0, rel=1e-12)
    assert (eigs[0], eigs[-1]) == pytest.approx((family.mu, family.L))
    mean_grad = np.mean([family.grad(k, family.theta_star) for k in range(3)], axis=0)
    np.testing.assert_allclose(mean_grad, 0.0, atol=1e-12)
    theta = rng_stream(23).normal(size=6)
    assert family.gap(theta) == pytest.approx(family.j_star - family.objective(theta), rel=1e-10)
    assert family.gap(family.theta_star) == 0.0


def test_quadratic_heterogeneity_zero_gives_identical_clients():
    spec = make_quadratic_family(4, 5, 0.5, 2.0, rng_stream(3), heterogeneity=0.0)
    for k in range(1, 4):
        np.testing.assert_array_equal(spec.b[k], spec.b[0])


def test_quadratic_rejects_indefinite():
    from frlhf.environments.quadratic import QuadraticObjectiveSpec

    with pytest.raises(ValueError, match="positive definite"):
        QuadraticObjectiveSpec(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        quadratic_objective_grad(make_quadratic_family(1, 3, 1, 2, rng_stream(0)), 0, np.zeros(4))


@pytest.mark.parametrize("kind", ["pull", "tilt"])
def test_feedback_family_bounded_with_exact_gradient(kind):
    rng = rng_stream(31)
    d = 5
    dirs = rng.normal(size=(2, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if kind == "pull":
        fb = FeedbackPull(rng.normal(size=(2, d)), 1.5, 0.7)
    else:
        fb = FeedbackTilt(dirs, rng.normal(size=d), 1.5, 0.7)
    pts = rng.normal(size=(500, d)) * 3
    vals = fb.value(0, pts)
    assert np.all(np.abs(vals) <= 0.7)
    gnorm = np.linalg.norm(fb.grad(0, pts), axis=1)
    assert gnorm.max() <= fb.grad_bound * (1 + 1e-12)
    theta = pts[0]
    h = 1e-6
    fd = np.array([(fb.value(1, theta + h * e) - fb.value(1, theta - h * e)) / (2 * h) for e in np.eye(d)])
    np.testing.assert_allclose(fb.grad(1, theta), fd, rtol=1e-5, atol=1e-9)


def test_pull_grad_bound_attained_at_width():
    fb = FeedbackPull(np.zeros((1, 3)), 2.0, 1.0)
    at = np.array([2.0, 0.0, 0.0])
    assert np.linalg.norm(fb.grad(0, at)) == pytest.approx(fb.grad_bound)
    assert fb.value(0, np.zeros(3)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# recommender


def test_recommender_label_base_rate_enumerated():
    env, table = make_recommender_env(30, 25, 4, 0.3, rng_stream(42))
    # re-derive every rating from the factors and noise
    high = 0
    for u in range(30):
        for i in range(25):
            r = min(5.0, max(1.0, float(table.user_factors[u] @ table.item_factors[i]) + 3.0 + float(table.noise[u, i])))
            assert r == pytest.approx(table.ratings[u, i], abs=1e-12)
            high += r >= HIGH_RATING
    assert table.labels.mean() == pytest.approx(high / (30 * 25))


def test_recommender_splits_and_bandit_rewards():
    env, table = make_recommender_env(20, 15, 3, 0.2, rng_stream(4))
    train = {tuple(p) for p in table.train_pairs}
    held = {tuple(p) for p in table.eval_pairs}
    assert train.isdisjoint(held)
    for u in range(20):
        n_u = sum(1 for p in train | held if p[0] == u)
        if n_u >= 2:
            assert any(p[0] == u for p in held)
            assert any(p[0] == u for p in train)
    # bandit reward table: mean of +-1 over the training raters of each item
    for i in range(15):
        users = [u for (u, j) in table.train_pairs if j == i]
        expect = np.mean([1.0 if table.labels[u, i] else -1.0 for u in users]) if users else 0.0
        assert env.spec.intrinsic_reward[i, PREDICT_HIGH] == pytest.approx(expect)
        assert env.spec.intrinsic_reward[i, PREDICT_LOW] == pytest.approx(-expect)
    counts = np.bincount(table.train_pairs[:, 1], minlength=15)
    np.testing.assert_allclose(env.context_dist, counts / counts.sum())


def test_recommender_step_reward_semantics():
    env, table = make_recommender_env(10, 8, 2, 0.0, rng_stream(6))
    rng = rng_stream(7)
    for _ in range(200):
        s = env.initial_state(rng)
        a = int(rng.integers(2))
        sub = rng_stream(8, s, a)
        u = env.sample_user(s, rng_stream(8, s, a))
        r, _ = env.step(s, a, sub)
        assert r == (1.0 if bool(table.labels[u, s]) == (a == PREDICT_HIGH) else -1.0)


def test_recommender_csv(tmp_path):
    _, table = make_recommender_env(3, 4, 2, 0.1, rng_stream(1), user_offset=10)
    path = tmp_path / "ratings.csv"
    table.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["user_id", "item_id", "rating", "label"]
    assert len(rows) == 12 and rows[0]["user_id"] == "10"
    for row in rows:
        assert int(row["label"]) == (float(row["rating"]) >= 4.0)


def test_recommender_federation_shares_items():
    clients = make_recommender_federation(3, 5, 7, 2, 0.1, rng_stream(2))
    V = clients[0][1].item_factors
    for k, (_, table) in enumerate(clients):
        np.testing.assert_array_equal(table.item_factors, V)
        assert table.user_offset == 5 * k
    assert not np.array_equal(clients[0][1].user_factors, clients[1][1].user_factors)


def test_recommender_validation():
    with pytest.raises(ValueError):
        make_recommender_env(0, 5, 2, 0.1, rng_stream(0))
    with pytest.raises(ValueError):
        make_recommender_env(3, 5, 2, -0.1, rng_stream(0))
    with pytest.raises(ValueError):
        make_recommender_env(3, 5, 2, 0.1, rng_stream(0), density=0.0)
