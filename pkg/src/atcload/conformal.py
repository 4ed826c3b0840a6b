"""Split conformal prediction sets over 7-class workload probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_CLASSES = 7
METHODS = ("plain", "adaptive")


@dataclass(frozen=True)
class CalibrationResult:
    method: str
    alpha: float
    n: int
    qhat: float | None  # None: rank exceeds n, every class is admitted

    @property
    def full(self) -> bool:
        return self.qhat is None


@dataclass(frozen=True)
class PredictionSet:
    classes: tuple[int, ...]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("prediction set must be nonempty")

    @property
    def filled_range(self) -> tuple[int, int]:
        return fill_range(self.classes)

    def __contains__(self, c: int) -> bool:
        return c in self.classes

    def __len__(self) -> int:
        return len(self.classes)


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown conformal method {method!r}; expected one of {METHODS}")


def _descending(probs: np.ndarray) -> np.ndarray:
    # stable sort so equal probabilities keep class order
    return np.argsort(-probs, kind="stable")


def conformal_score(probs: Sequence[float], true_class: int, method: str = "plain") -> float:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    _check_method(method)
    if not 1 <= true_class <= probs.size:
        raise ValueError(f"class {true_class} outside 1..{probs.size}")
    if method == "plain":
        return float(1.0 - probs[true_class - 1])
    order = _descending(probs)
    rank = int(np.nonzero(order == true_class - 1)[0][0])
    return float(probs[order[: rank + 1]].sum())


def conformal_scores(probs: np.ndarray, labels: Sequence[int], method: str = "plain") -> np.ndarray:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return np.array([conformal_score(p, int(y), method) for p, y in zip(probs, labels)])


def quantile_rank(n: int, alpha: float) -> int:
    """``ceil((n + 1)(1 - alpha))`` with a guard against float fuzz at exact integers."""
    x = (n + 1) * (1.0 - alpha)
    k = math.ceil(x)
    if k - x > 1 - 1e-9:
        k -= 1
    return k


def calibrate_scores(scores: Sequence[float], alpha: float, method: str = "plain") -> CalibrationResult:
    scores = np.asarray(scores, dtype=np.float64)
    _check_method(method)
    if scores.size == 0:
        raise ValueError("empty calibration set")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    n = scores.size
    k = quantile_rank(n, alpha)
    if k > n:
        return CalibrationResult(method, alpha, n, None)
    if k < 1:
        # alpha = 1 admits the empty rank; the smallest score is the tightest valid threshold
        k = 1
    return CalibrationResult(method, alpha, n, float(np.sort(scores)[k - 1]))


def calibrate(cal_probs: np.ndarray, cal_labels: Sequence[int], alpha: float, method: str = "plain") -> CalibrationResult:
    if len(cal_labels) == 0:
        raise ValueError("empty calibration set")
    return calibrate_scores(conformal_scores(cal_probs, cal_labels, method), alpha, method)


def predict_set(probs: Sequence[float], calib: CalibrationResult, guard: bool = True) -> PredictionSet | tuple[int, ...]:
    """Conformal set for one probability row.

    With ``guard`` the argmax class is always included. Without it the raw
    (possibly empty) class tuple is returned instead of a PredictionSet.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if calib.full:
        classes = list(range(1, probs.size + 1))
    elif calib.method == "plain":
        classes = [c + 1 for c in range(probs.size) if 1.0 - probs[c] <= calib.qhat]
    else:
        order = _descending(probs)
        cum = np.cumsum(probs[order])
        # classes up to and including the first whose cumulative mass reaches qhat
        stop = int(np.searchsorted(cum, calib.qhat - 1e-12, side="left")) + 1
        classes = sorted(int(c) + 1 for c in order[: min(stop, probs.size)])
    if guard:
        top = int(np.argmax(probs)) + 1
        if top not in classes:
            classes = sorted(classes + [top])
        return PredictionSet(tuple(classes))
    return tuple(classes)


def predict_sets(probs: np.ndarray, calib: CalibrationResult, guard: bool = True) -> list:
    return [predict_set(p, calib, guard) for p in np.atleast_2d(probs)]


def fill_range(classes) -> tuple[int, int]:
    classes = tuple(classes.classes if isinstance(classes, PredictionSet) else classes)
    if not classes:
        raise ValueError("cannot fill the range of an empty set")
    return min(classes), max(classes)
