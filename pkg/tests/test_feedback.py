import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frlhf.core import rng_stream
from frlhf.feedback import (
    COMPARATIVE,
    DIRECT,
    FeedbackEvent,
    FeedbackOracleConfig,
    OneHotFeatures,
    RewardModel,
    clip_feedback,
    comparative_feedback,
    direct_feedback,
    reward_model_update,
    shape_reward,
    write_feedback_log,
)

ratings = st.floats(1.0, 5.0)


@pytest.mark.parametrize(
    "pred,true,expected",
    [(4.8, 3.0, -1.0), (2.0, 4.5, 1.0), (3.2, 3.0, 0.0), (3.5, 3.0, 0.0), (3.51, 3.0, -1.0)],
)
def test_direct_feedback_rules(pred, true, expected):
    assert direct_feedback(pred, true, FeedbackOracleConfig()).value == expected


@given(ratings, ratings)
def test_direct_feedback_bounded_and_signed(pred, true):
    cfg = FeedbackOracleConfig(h_max=0.4)
    v = direct_feedback(pred, true, cfg).value
    assert abs(v) <= 0.4
    if v:
        assert np.sign(v) == np.sign(true - pred)


def test_direct_feedback_noise_needs_rng():
    cfg = FeedbackOracleConfig(noise_sd=0.5)
    with pytest.raises(ValueError):
        direct_feedback(3.0, 3.0, cfg)
    vals = {direct_feedback(3.0, 3.0, cfg, rng_stream(i)).value for i in range(200)}
    assert vals == {-1.0, 0.0, 1.0}
    with pytest.raises(ValueError):
        direct_feedback(0.0, 3.0, FeedbackOracleConfig())


@pytest.mark.parametrize(
    "a,b,pred,expected",
    [(5.0, 2.0, -1, 1.0), (5.0, 2.0, 1, 0.0), (2.0, 5.0, 1, -1.0), (3.0, 3.0, 1, 0.0), (3.0, 3.0, 0, 0.0)],
)
def test_comparative_feedback_rules(a, b, pred, expected):
    ev = comparative_feedback(a, b, pred)
    assert ev.kind == COMPARATIVE and ev.value == expected


def test_comparative_rejects_bad_preference():
    with pytest.raises(ValueError):
        comparative_feedback(3.0, 4.0, 2)


def test_clip_and_shape():
    assert clip_feedback(2.0, 1.0) == 1.0
    assert clip_feedback(-0.3, 1.0) == -0.3
    # pre-clipped feedback of 2.0 at h_max 1 and lambda 1 adds exactly 1
    assert shape_reward(0.0, clip_feedback(2.0, 1.0), 1.0) == 1.0
    np.testing.assert_array_equal(clip_feedback(np.array([-3.0, 0.5]), 1.0), [-1.0, 0.5])
    with pytest.raises(ValueError):
        shape_reward(1.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        clip_feedback(1.0, -1.0)


def test_event_validation():
    with pytest.raises(ValueError):
        FeedbackEvent("rating", 1.0)
    with pytest.raises(ValueError):
        FeedbackEvent(DIRECT, float("nan"))
    with pytest.raises(ValueError):
        FeedbackOracleConfig(threshold=0)


def test_tabular_reward_model_lms_closed_form():
    m = RewardModel.tabular(2, 2, lr=0.25, h_max=1.0)
    events = [FeedbackEvent(DIRECT, 1.0, (1, 0))] * 3 + [FeedbackEvent(DIRECT, -0.5, (0, 1))]
    m2 = reward_model_update(m, events)
    # w <- w + lr (v - w) three times from 0: 1 - 0.75^3
    assert m2.weights[2] == pytest.approx(1 - 0.75**3)
    assert m2.weights[1] == pytest.approx(-0.125)
    assert m.weights.sum() == 0.0  # original untouched
    tab = m2.table(2, 2)
    assert tab.shape == (2, 2) and tab[1, 0] == pytest.approx(1 - 0.75**3)


def test_reward_model_predictions_clipped():
    m = RewardModel(np.array([3.0, -5.0]), lr=0.1, h_max=1.0)
    assert m.predict([1.0, 0.0]) == 1.0
    assert m.predict([0.0, 1.0]) == -1.0
    assert m.raw([1.0, 1.0]) == -2.0
    with pytest.raises(TypeError):
        m.table(1, 2)
    with pytest.raises(ValueError):
        m.phi([1.0, 2.0, 3.0])


def test_dense_reward_model_matches_lms():
    rng = rng_stream(3)
    X = rng.normal(size=(20, 3))
    y = np.clip(X @ [0.2, -0.1, 0.3], -1, 1)
    m = reward_model_update(RewardModel(np.zeros(3), lr=0.05), [FeedbackEvent(DIRECT, float(v), tuple(x)) for x, v in zip(X, y)])
    w = np.zeros(3)
    for x, v in zip(X, y):
        w = w + 0.05 * (v - w @ x) * x
    np.testing.assert_allclose(m.weights, w, rtol=1e-13)


def test_reward_model_converges_to_feedback_mean():
    # LMS stationary spread is sd(v) * sqrt(lr / (2 - lr)) ~ 0.033 here
    m = RewardModel.tabular(1, 2, lr=0.01)
    rng = rng_stream(5)
    for _ in range(400):
        batch = [FeedbackEvent(DIRECT, float(rng.choice([1.0, 0.0, 1.0])), (0, 1)) for _ in range(50)]
        m = reward_model_update(m, batch)
    assert m.table(1, 2)[0, 1] == pytest.approx(2 / 3, abs=0.1)
    with pytest.raises(ValueError):
        reward_model_update(m, [])


def test_one_hot_features():
    f = OneHotFeatures(3, 2)
    assert f.index((2, 1)) == 5
    np.testing.assert_array_equal(f((1, 0)), [0, 0, 1, 0, 0, 0])
    with pytest.raises(ValueError):
        f.index((3, 0))


def test_feedback_log_csv(tmp_path):
    path = tmp_path / "fb.csv"
    rows = [(0, 1, FeedbackEvent(DIRECT, 1.0, (4, 1))), (2, 0, FeedbackEvent(COMPARATIVE, -1.0, (3, 7)))]
    write_feedback_log(path, rows)
    out = list(csv.reader(open(path)))
    assert out[0] == ["round", "client", "kind", "context", "value"]
    assert out[1] == ["0", "1", "direct", "4:1", "1.0"]
    assert out[2] == ["2", "0", "comparative", "3:7", "-1.0"]
