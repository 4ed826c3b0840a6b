import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcload import conformal as cf

from . import oracles


def test_scores_hand_cases():
    probs = [0.5, 0.3, 0.2, 0, 0, 0, 0]
    assert cf.conformal_score([0, 0, 1, 0, 0, 0, 0], 3) == 0.0
    assert abs(cf.conformal_score(probs, 2) - 0.7) < 1e-15
    assert abs(cf.conformal_score(probs, 2, "adaptive") - 0.8) < 1e-15
    assert abs(cf.conformal_score(np.full(7, 1 / 7), 5) - 6 / 7) < 1e-15
    with pytest.raises(ValueError):
        cf.conformal_score(probs, 8)
    with pytest.raises(ValueError):
        cf.conformal_score(probs, 1, "weird")


def test_calibrate_hand_cases():
    r = cf.calibrate_scores([0.3, 0.1, 0.4, 0.2], 0.2)
    assert r.qhat == 0.4
    assert cf.calibrate_scores(np.linspace(0, 1, 9), 0.05).full
    assert cf.calibrate_scores([0.37], 0.5).qhat == 0.37
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            cf.calibrate_scores([0.1, 0.2], bad)
    with pytest.raises(ValueError):
        cf.calibrate_scores([], 0.1)


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=60),
    st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.25, 0.3, 0.5, 0.75, 0.9, 1.0]),
)
@settings(max_examples=200, deadline=None)
def test_qhat_matches_order_statistic(scores, alpha):
    assert cf.calibrate_scores(scores, alpha).qhat == oracles.conformal_qhat(scores, alpha)


def test_predict_set_hand_cases():
    full = cf.CalibrationResult("plain", 0.05, 9, None)
    assert cf.predict_set([0.9, 0.1, 0, 0, 0, 0, 0], full).classes == tuple(range(1, 8))
    plain = cf.CalibrationResult("plain", 0.1, 100, 0.5)
    assert cf.predict_set([0.6, 0.3, 0.1, 0, 0, 0, 0], plain).classes == (1,)
    adaptive = cf.CalibrationResult("adaptive", 0.1, 100, 0.85)
    assert cf.predict_set([0.5, 0.3, 0.2, 0, 0, 0, 0], adaptive).classes == (1, 2, 3)


def test_argmax_guard():
    tight = cf.CalibrationResult("plain", 0.5, 10, 0.1)
    probs = [0.4, 0.35, 0.25, 0, 0, 0, 0]
    assert cf.predict_set(probs, tight, guard=False) == ()
    assert cf.predict_set(probs, tight).classes == (1,)


@given(st.lists(st.floats(0.001, 1), min_size=7, max_size=7), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_sets_contain_true_class_when_score_below_qhat(raw, qhat):
    probs = np.array(raw) / sum(raw)
    for method in cf.METHODS:
        calib = cf.CalibrationResult(method, 0.1, 50, qhat)
        s = cf.predict_set(probs, calib, guard=False)
        for c in range(1, 8):
            if cf.conformal_score(probs, c, method) <= qhat - 1e-9:
                assert c in s


def test_fill_range():
    assert cf.fill_range((3, 5, 7)) == (3, 7)
    assert cf.PredictionSet((4,)).filled_range == (4, 4)
    assert cf.fill_range(cf.PredictionSet((1, 7))) == (1, 7)
    with pytest.raises(ValueError):
        cf.fill_range(())


def _dirichlet_data(rng, n):
    p = rng.dirichlet(np.ones(7) * 0.7, n)
    y = np.array([rng.choice(7, p=row) + 1 for row in p])
    return p, y


@pytest.mark.parametrize("method", cf.METHODS)
def test_marginal_coverage_exchangeable(method):
    covs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cp, cy = _dirichlet_data(rng, 500)
        tp, ty = _dirichlet_data(rng, 500)
        calib = cf.calibrate(cp, cy, 0.1, method)
        sets = cf.predict_sets(tp, calib)
        covs.append(np.mean([y in s for s, y in zip(sets, ty)]))
    if method == "plain":
        assert 0.87 <= np.mean(covs) <= 0.96
    else:
        # the set keeps the class whose cumulative mass crosses qhat, so it over-covers
        assert np.mean(covs) >= 0.87
