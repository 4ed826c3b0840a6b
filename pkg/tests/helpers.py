"""Small fixtures shared across test modules."""

from __future__ import annotations

import numpy as np

from atcload import airspace, dataset
from atcload.numkit import Rng


def random_snapshot(rng: Rng, t: int, n: int) -> airspace.TrafficSnapshot:
    xy = (rng.uniform(2 * n) - 0.5) * 60
    alt = 3000 + rng.uniform(n) * 30_000
    return airspace.TrafficSnapshot(
        t, tuple(airspace.AircraftState(f"A{i}", t, xy[2 * i], xy[2 * i + 1], alt[i]) for i in range(n))
    )


def placeholder_series(n_steps: int, ratings=None, trial_id: str = "T"):
    graphs = [airspace.placeholder_graph(t) for t in range(n_steps)]
    if ratings is None:
        ratings = np.arange(n_steps) % 7 + 1
    return graphs, dataset.WorkloadSeries(trial_id, np.asarray(ratings, dtype=np.int64))


def random_windows(seed: int, n_windows: int, kappa: int, max_nodes: int = 4, n_trials: int = 1):
    """Windows over random small traffic with uniformly random labels."""
    rng = Rng(seed)
    out = []
    per_trial = -(-n_windows // n_trials)
    for tr in range(n_trials):
        steps = per_trial + kappa - 1
        snaps = [random_snapshot(rng, t, 1 + rng.integer(max_nodes)) for t in range(steps)]
        graphs = [airspace.build_graph(s) for s in snaps]
        ratings = np.array([1 + rng.integer(7) for _ in range(steps)])
        series = dataset.WorkloadSeries(f"T{tr}", ratings)
        out += dataset.make_windows(graphs, series, kappa)
    return out[:n_windows]


def gradient_check(variant: str, seed: int = 3, n_windows: int = 2, evolve: bool = True) -> float:
    """Max relative error between tape and central-difference gradients.

    Checked at a randomly perturbed parameter point: at initialization the
    head biases are exactly zero and relu kinks sit on the difference stencil.
    """
    from atcload import egcn
    from atcload import numkit as nk

    windows = random_windows(seed, n_windows, kappa=3, max_nodes=4)
    model = egcn.init_model(variant, 3, 2, 8, seed=seed, evolve=evolve)
    rng = Rng(seed + 100)
    model.params = {k: p + 0.1 * rng.normal(p.size).reshape(p.shape) for k, p in model.params.items()}
    _, analytic = egcn.loss_and_grads(model, windows)

    def loss(params):
        m = egcn.EvolveGcnModel(variant, 3, model.layer_dims, params, model.in_dim, model.head_hidden, 0.0, evolve)
        return egcn.loss_and_grads(m, windows)[0]

    numeric = nk.finite_diff_grad(loss, model.params, 1e-5)
    return nk.max_relative_error(analytic, numeric)
