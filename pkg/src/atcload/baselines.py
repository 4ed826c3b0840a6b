"""Comparison models: density-only regression, regression on aggregate graph features, and a small MLP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .airspace import SEPARATION_CAP
from .dataset import N_CLASSES, GraphWindow, clamp_rating
from .numkit import Rng, Tape

RIDGE = 1e-6
FEATURE_NAMES = (
    "mean_count",
    "max_count",
    "mean_hsep",
    "min_hsep",
    "mean_vsep",
    "min_vsep",
    "mean_ssep",
    "min_ssep",
    "std_count",
    "std_hsep",
    "std_vsep",
    "std_ssep",
)


class SingularFitError(ValueError):
    pass


def graph_summary(graph) -> tuple[float, float, float, float]:
    """(aircraft count, min horizontal nmi, min vertical kft, min scaled nmi) of one graph."""
    if graph.placeholder:
        return 0.0, SEPARATION_CAP, SEPARATION_CAP, SEPARATION_CAP
    f = graph.features
    return (
        float(graph.n_nodes),
        float(f[:, 1].min() * SEPARATION_CAP),
        float(f[:, 2].min() * SEPARATION_CAP),
        float(f[:, 0].min() * SEPARATION_CAP),
    )


def aggregate_features(window: GraphWindow) -> np.ndarray:
    s = np.array([graph_summary(g) for g in window.graphs])
    count, hsep, vsep, ssep = s.T
    return np.array(
        [
            count.mean(),
            count.max(),
            hsep.mean(),
            hsep.min(),
            vsep.mean(),
            vsep.min(),
            ssep.mean(),
            ssep.min(),
            count.std(),
            hsep.std(),
            vsep.std(),
            ssep.std(),
        ]
    )


def feature_matrix(windows: Sequence[GraphWindow]) -> np.ndarray:
    return np.vstack([aggregate_features(w) for w in windows])


def end_count(window: GraphWindow) -> float:
    return graph_summary(window.graphs[-1])[0]


@dataclass
class LinearWorkloadModel:
    coef: np.ndarray
    intercept: float
    features: str  # "density" or "graph"

    def score(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.coef + self.intercept

    def predict_features(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(clamp_rating(self.score(x)))

    def predict(self, windows: Sequence[GraphWindow]) -> np.ndarray:
        if self.features == "density":
            x = np.array([[end_count(w)] for w in windows])
        else:
            x = feature_matrix(windows)
        return self.predict_features(x)


def fit_linear(x: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> tuple[np.ndarray, float]:
    """Least squares with an unpenalized intercept and optional ridge on the coefficients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    if np.linalg.matrix_rank(gram) < x.shape[1]:
        raise SingularFitError("degenerate training data: feature matrix is rank deficient")
    coef = np.linalg.solve(gram, xc.T @ yc)
    return coef, float(ym - xm @ coef)


def fit_lr_density(windows: Sequence[GraphWindow]) -> LinearWorkloadModel:
    if not windows:
        raise ValueError("empty training set")
    x = np.array([[end_count(w)] for w in windows])
    y = np.array([w.label for w in windows])
    if np.all(x == x[0]):
        raise SingularFitError("all training windows have the same aircraft count; slope is undetermined")
    coef, b = fit_linear(x, y)
    return LinearWorkloadModel(coef, b, "density")


def fit_lr_graphfeat(windows: Sequence[GraphWindow], ridge: float = RIDGE) -> LinearWorkloadModel:
    if not windows:
        raise ValueError("empty training set")
    coef, b = fit_linear(feature_matrix(windows), [w.label for w in windows], ridge)
    return LinearWorkloadModel(coef, b, "graph")


# --------------------------------------------------------------------------
# Two-layer perceptron
# --------------------------------------------------------------------------


@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray

    def _forward(self, tape: Tape, x: np.ndarray, params=None):
        p = params or {k: tape.param(k, v) for k, v in self.params.items()}
        h = nk.relu(nk.add_bias(nk.matmul(tape.const((x - self.mean) / self.std), p["W1"]), p["b1"]))
        return nk.softmax_rows(nk.add_bias(nk.matmul(h, p["W2"]), p["b2"]))

    def predict_proba_features(self, x: np.ndarray) -> np.ndarray:
        return self._forward(Tape(), np.atleast_2d(x)).value

    def predict_proba(self, windows: Sequence[GraphWindow]) -> np.ndarray:
        return self.predict_proba_features(feature_matrix(windows))

    def predict(self, windows: Sequence[GraphWindow]) -> np.ndarray:
        return self.predict_proba(windows).argmax(axis=1) + 1


def fit_mlp_features(
    x: np.ndarray,
    y: Sequence[int],
    hidden: int = 32,
    epochs: int = 300,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
) -> MlpModel:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    rng = Rng(nk.derive_seed(seed, 0x6D6C70))
    d = x.shape[1]
    std = x.std(axis=0)
    model = MlpModel(
        {
            "W1": rng.glorot(d, hidden),
            "b1": np.zeros((1, hidden)),
            "W2": rng.glorot(hidden, N_CLASSES),
            "b2": np.zeros((1, N_CLASSES)),
        },
        x.mean(axis=0),
        np.where(std > 0, std, 1.0),
    )
    state = nk.AdamState()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            tape = Tape()
            loss = nk.cross_entropy(model._forward(tape, x[idx]), y[idx])
            grads = nk.backward(tape, loss)
            model.params, state = nk.adam_step(model.params, grads, state, lr)
    return model


def fit_mlp(
    windows: Sequence[GraphWindow],
    hidden: int = 32,
    epochs: int = 300,
    lr: float = 0.01,
    seed: int = 0,
) -> MlpModel:
    if not windows:
        raise ValueError("empty training set")
    return fit_mlp_features(feature_matrix(windows), [w.label for w in windows], hidden, epochs, lr, seed)
