from dataclasses import replace

import numpy as np
import pytest

from atcload import baselines as bl
from atcload import evalkit

from .helpers import placeholder_series, random_windows


def test_density_slope_recovery():
    ws = random_windows(2, 60, kappa=2, max_nodes=6)
    ws = [replace(w, label=0.306 * bl.end_count(w) - 3.373) for w in ws]
    m = bl.fit_lr_density(ws)
    assert abs(m.coef[0] - 0.306) < 1e-6 and abs(m.intercept + 3.373) < 1e-6


def test_constant_labels():
    ws = [replace(w, label=4) for w in random_windows(3, 30, kappa=2, max_nodes=5)]
    m = bl.fit_lr_density(ws)
    assert abs(m.coef[0]) < 1e-12 and abs(m.intercept - 4.0) < 1e-12
    assert set(m.predict(ws).tolist()) == {4}


def test_density_clamps_low_scores():
    m = bl.LinearWorkloadModel(np.array([0.306]), -3.373, "density")
    assert m.predict_features(np.array([[1.0], [6.0], [40.0]])).tolist() == [1, 1, 7]


def test_degenerate_density_fit():
    from atcload import dataset

    graphs, series = placeholder_series(20)
    ws = dataset.make_windows(graphs, series, 3)
    with pytest.raises(bl.SingularFitError):
        bl.fit_lr_density(ws)
    with pytest.raises(bl.SingularFitError):
        bl.fit_linear(np.ones((5, 2)), np.arange(5))


def test_duplicate_columns_solved_by_ridge_and_nested():
    rng = np.random.default_rng(0)
    n = rng.integers(1, 22, 200).astype(float)
    y = np.clip(np.round(0.306 * n - 3.373 + rng.normal(0, 0.5, 200)), 1, 7)
    coef, b = bl.fit_linear(n[:, None], y)
    coef2, b2 = bl.fit_linear(np.column_stack([n, n]), y, ridge=1e-6)
    dens = bl.LinearWorkloadModel(coef, b, "density").predict_features(n[:, None])
    dup = bl.LinearWorkloadModel(coef2, b2, "graph").predict_features(np.column_stack([n, n]))
    assert np.array_equal(dens, dup)
    assert abs(coef2.sum() - coef[0]) < 1e-6


def test_linear_in_min_separation_recovered():
    ws = random_windows(5, 80, kappa=3, max_nodes=5)
    x = bl.feature_matrix(ws)
    ws = [replace(w, label=1.0 + 0.05 * xi[3]) for w, xi in zip(ws, x)]
    m = bl.fit_lr_graphfeat(ws)
    assert abs(m.coef[3] - 0.05) < 1e-4
    assert np.max(np.abs(np.delete(m.coef, 3))) < 1e-4


def test_aggregate_features_shape_and_placeholder():
    graphs, series = placeholder_series(4)
    from atcload import dataset

    w = dataset.make_windows(graphs, series, 4)[0]
    f = bl.aggregate_features(w)
    assert f.shape == (len(bl.FEATURE_NAMES),)
    assert f[0] == 0.0 and f[3] == 100.0


def test_mlp_separable():
    rng = np.random.default_rng(1)
    y = rng.integers(1, 8, 300)
    x = np.column_stack([y + rng.normal(0, 0.05, 300), rng.normal(0, 1, 300)])
    m = bl.fit_mlp_features(x, y, epochs=200, lr=0.02, seed=0)
    preds = m.predict_proba_features(x).argmax(axis=1) + 1
    assert evalkit.micro_f1(preds, y) >= 0.95


def test_mlp_zero_epochs_and_determinism():
    ws = random_windows(6, 30, kappa=2)
    m0 = bl.fit_mlp(ws, epochs=0)
    p = m0.predict_proba(ws)
    assert p.max() < 0.6
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    a, b = bl.fit_mlp(ws, epochs=5, seed=3), bl.fit_mlp(ws, epochs=5, seed=3)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    with pytest.raises(ValueError):
        bl.fit_mlp([])
