"""EvolveGCN-O / EvolveGCN-H graph-sequence classifiers and their training loop.

Each window of ``kappa`` graphs is processed independently: every GCN layer
starts from its learned initial weights ``W0`` and a recurrent cell evolves
the weights once per timestamp (an LSTM fed with the previous weights for
the -O variant, a GRU fed with a top-k summary of the node embeddings for
-H). A two-layer head maps node embeddings to 7 workload logits, which are
averaged over nodes and over the window's timestamps before the softmax.
"""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .airspace import N_FEATURES
from .dataset import N_CLASSES, DatasetSplit, GraphWindow, atomic_write_text
from .evalkit import macro_f1, micro_f1
from .numkit import Node, Rng, Tape

CHECKPOINT_VERSION = 1
HEAD_HIDDEN = 32
VARIANTS = ("O", "H")

# (layers, layer dim, dropout, learning rate)
PROFILES = {
    "baseline": (2, 64, 0.25, 0.001),
    "high-nominal": (2, 128, 0.5, 0.0015),
    "high-offnominal": (4, 64, 0.25, 0.0005),
}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    profile: str = "baseline"
    epochs: int = 200
    learning_rate: float | None = None
    dropout: float | None = None
    n_layers: int | None = None
    layer_dim: int | None = None
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        layers, dim, drop, lr = PROFILES[self.profile]
        if self.n_layers is None:
            self.n_layers = layers
        if self.layer_dim is None:
            self.layer_dim = dim
        if self.dropout is None:
            self.dropout = drop
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(eq=False)
class EvolveGcnModel:
    variant: str
    kappa: int
    layer_dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    in_dim: int = N_FEATURES
    head_hidden: int = HEAD_HIDDEN
    dropout: float = 0.0
    evolve: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)

    def dims(self) -> list[tuple[int, int]]:
        ins = (self.in_dim,) + tuple(self.layer_dims[:-1])
        return list(zip(ins, self.layer_dims))


def init_model(
    variant: str = "O",
    kappa: int = 36,
    n_layers: int = 2,
    layer_dim: int = 64,
    dropout: float = 0.0,
    seed: int = 0,
    evolve: bool = True,
    in_dim: int = N_FEATURES,
    head_hidden: int = HEAD_HIDDEN,
) -> EvolveGcnModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if kappa < 1 or n_layers < 1 or layer_dim < 1:
        raise ValueError("kappa, n_layers and layer_dim must be positive")
    rng = Rng(nk.derive_seed(seed, 0x6E6F6465))
    model = EvolveGcnModel(variant, kappa, (layer_dim,) * n_layers, {}, in_dim, head_hidden, dropout, evolve)
    p = model.params
    for l, (d_in, d_out) in enumerate(model.dims()):
        p[f"gcn{l}.W0"] = rng.glorot(d_in, d_out)
        if not evolve:
            continue
        if variant == "O":
            p[f"lstm{l}.U"] = rng.glorot(d_out, 4 * d_out)
            p[f"lstm{l}.V"] = rng.glorot(d_out, 4 * d_out)
            p[f"lstm{l}.b"] = np.zeros((1, 4 * d_out))
        else:
            for gate in "zrh":
                p[f"gru{l}.W{gate}"] = rng.glorot(d_out, d_out)
                p[f"gru{l}.U{gate}"] = rng.glorot(d_out, d_out)
                p[f"gru{l}.b{gate}"] = np.zeros((1, d_out))
            p[f"gru{l}.p"] = rng.glorot(d_in, 1)
    last = model.layer_dims[-1]
    p["head.W1"] = rng.glorot(last, head_hidden)
    p["head.b1"] = np.zeros((1, head_hidden))
    p["head.W2"] = rng.glorot(head_hidden, N_CLASSES)
    p["head.b2"] = np.zeros((1, N_CLASSES))
    return model


# --------------------------------------------------------------------------
# Building blocks (tape level)
# --------------------------------------------------------------------------


def gcn_layer(ahat: Node, h: Node, w: Node, activation: bool = True) -> Node:
    """``relu(Ahat @ H @ W)``; ``activation=False`` leaves the product linear."""
    out = nk.matmul(ahat, nk.matmul(h, w))
    return nk.relu(out) if activation else out


def evolve_O(lstm: dict[str, Node], w_prev: Node, cell: Node) -> tuple[Node, Node]:
    """One LSTM step on the rows of ``W``; the previous weights are both input and hidden state."""
    d = w_prev.shape[1]
    if lstm["U"].shape[0] != d:
        raise nk.ShapeError(f"LSTM hidden size {lstm['U'].shape[0]} does not match weights {w_prev.shape}")
    # x @ U + h @ V with x = h = W_prev
    z = nk.add_bias(nk.add(nk.matmul(w_prev, lstm["U"]), nk.matmul(w_prev, lstm["V"])), lstm["b"])
    i = nk.sigmoid(nk.slice_cols(z, 0, d))
    f = nk.sigmoid(nk.slice_cols(z, d, 2 * d))
    o = nk.sigmoid(nk.slice_cols(z, 2 * d, 3 * d))
    g = nk.tanh(nk.slice_cols(z, 3 * d, 4 * d))
    cell = nk.add(nk.hadamard(f, cell), nk.hadamard(i, g))
    return nk.hadamard(o, nk.tanh(cell)), cell


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties to the lower index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def summarize(h: Node, k: int, p: Node) -> Node:
    """Top-k rows of ``H`` by ``H p / |p|``, each scaled by tanh of its score; zero-padded to k rows."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.any(p.value):
        raise ValueError("degenerate scoring vector p (all zeros)")
    y = nk.matmul(h, nk.l2_normalize(p))
    idx = topk_rows(y.value[:, 0], k)
    rows = nk.gather_rows(h, idx, k)
    gates = nk.gather_rows(nk.tanh(y), idx, k)
    return nk.scale_rows(rows, gates)


def evolve_H(gru: dict[str, Node], h_t: Node, w_prev: Node) -> Node:
    """GRU step whose hidden state is ``W`` (d_in x d_out) and whose input is the transposed node summary."""
    d_in, d_out = w_prev.shape
    x = nk.transpose(summarize(h_t, d_out, gru["p"]))
    if x.shape != w_prev.shape:
        raise nk.ShapeError(f"summary {x.shape} does not match weights {w_prev.shape}")

    def gate(name, hidden):
        lin = nk.add(nk.matmul(x, gru[f"W{name}"]), nk.matmul(hidden, gru[f"U{name}"]))
        return nk.add_bias(lin, gru[f"b{name}"])

    z = nk.sigmoid(gate("z", w_prev))
    r = nk.sigmoid(gate("r", w_prev))
    cand = nk.tanh(gate("h", nk.hadamard(r, w_prev)))
    return nk.add(nk.hadamard(nk.one_minus(z), w_prev), nk.hadamard(z, cand))


def readout(node_logits: Node) -> Node:
    """Column mean of node logits followed by a softmax (1 x 7)."""
    n = node_logits.shape[0]
    mean = nk.matmul(node_logits.tape.const(np.full((1, n), 1.0 / n)), node_logits)
    return nk.softmax_rows(mean)


def _head(params: dict[str, Node], h: Node, dropout: float, rng: Rng | None, train: bool) -> Node:
    z = nk.relu(nk.add_bias(nk.matmul(h, params["head.W1"]), params["head.b1"]))
    z = nk.dropout(z, dropout, rng, train)
    return nk.add_bias(nk.matmul(z, params["head.W2"]), params["head.b2"])


def _group(params: dict[str, Node], prefix: str) -> dict[str, Node]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------


def _check_windows(model: EvolveGcnModel, windows: Sequence[GraphWindow]) -> None:
    for w in windows:
        if len(w.graphs) != model.kappa:
            raise ValueError(f"window of length {len(w.graphs)} does not match model kappa={model.kappa}")


def _pack(graphs: Sequence, n_max: int, in_dim: int):
    b = len(graphs)
    blocks = np.zeros((b, n_max, n_max))
    x = np.zeros((b * n_max, in_dim))
    pool = np.zeros((b, b * n_max))
    for i, g in enumerate(graphs):
        n = g.n_nodes
        blocks[i, :n, :n] = g.ahat
        x[i * n_max : i * n_max + n] = g.features
        pool[i, i * n_max : i * n_max + n] = 1.0 / n
    return blocks, x, pool


def _weight_trajectories(model: EvolveGcnModel, params: dict[str, Node], tape: Tape) -> list[list[Node]]:
    """Per layer, the kappa weight matrices of the -O variant (data independent)."""
    out = []
    for l, (_, d_out) in enumerate(model.dims()):
        w = params[f"gcn{l}.W0"]
        if not model.evolve:
            out.append([w] * model.kappa)
            continue
        lstm = _group(params, f"lstm{l}.")
        cell = tape.const(np.zeros(w.shape))
        traj = []
        for _ in range(model.kappa):
            w, cell = evolve_O(lstm, w, cell)
            traj.append(w)
        out.append(traj)
    return out


def _forward_o(model, params, tape, windows, train, rng) -> Node:
    trajectories = _weight_trajectories(model, params, tape)
    n_max = max(g.n_nodes for w in windows for g in w.graphs)
    last = model.n_layers - 1
    acc = None
    for pos in range(model.kappa):
        blocks, x, pool = _pack([w.graphs[pos] for w in windows], n_max, model.in_dim)
        h = tape.const(x)
        for l in range(model.n_layers):
            h = nk.block_propagate(blocks, nk.matmul(h, trajectories[l][pos]))
            if l < last:
                h = nk.relu(h)
        pooled = nk.matmul(tape.const(pool), _head(params, h, model.dropout, rng, train))
        acc = pooled if acc is None else nk.add(acc, pooled)
    return nk.softmax_rows(nk.scale(acc, 1.0 / model.kappa))


def _forward_h_single(model, params, tape, window, train, rng) -> Node:
    weights = [params[f"gcn{l}.W0"] for l in range(model.n_layers)]
    grus = [_group(params, f"gru{l}.") for l in range(model.n_layers)]
    last = model.n_layers - 1
    acc = None
    for g in window.graphs:
        ahat = tape.const(g.ahat)
        h = tape.const(g.features)
        for l in range(model.n_layers):
            if model.evolve:
                weights[l] = evolve_H(grus[l], h, weights[l])
            h = gcn_layer(ahat, h, weights[l], activation=l < last)
        logits = _head(params, h, model.dropout, rng, train)
        mean = nk.matmul(tape.const(np.full((1, g.n_nodes), 1.0 / g.n_nodes)), logits)
        acc = mean if acc is None else nk.add(acc, mean)
    return nk.scale(acc, 1.0 / model.kappa)


def forward_batch(
    model: EvolveGcnModel,
    windows: Sequence[GraphWindow],
    tape: Tape | None = None,
    train: bool = False,
    rng: Rng | None = None,
    params: dict[str, Node] | None = None,
) -> Node:
    """Class probabilities (B x 7) for a batch of windows, recorded on ``tape``."""
    if not windows:
        raise ValueError("empty batch")
    _check_windows(model, windows)
    if train and model.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an Rng")
    tape = tape or Tape()
    if params is None:
        params = {k: tape.param(k, v) for k, v in model.params.items()}
    if model.variant == "O":
        return _forward_o(model, params, tape, windows, train, rng)
    rows = [_forward_h_single(model, params, tape, w, train, rng) for w in windows]
    return nk.softmax_rows(rows[0] if len(rows) == 1 else nk.concat_rows(rows))


def forward(model: EvolveGcnModel, window: GraphWindow, train: bool = False, rng: Rng | None = None) -> np.ndarray:
    """Probability row (1 x 7) for one window."""
    return forward_batch(model, [window], train=train, rng=rng).value


def predict_proba(model: EvolveGcnModel, windows: Sequence[GraphWindow], batch_size: int = 64) -> np.ndarray:
    out = [forward_batch(model, windows[i : i + batch_size]).value for i in range(0, len(windows), batch_size)]
    return np.vstack(out) if out else np.zeros((0, N_CLASSES))


def predict(model: EvolveGcnModel, windows: Sequence[GraphWindow]) -> np.ndarray:
    return predict_proba(model, windows).argmax(axis=1) + 1


def loss_and_grads(model: EvolveGcnModel, windows: Sequence[GraphWindow], train: bool = False, rng: Rng | None = None):
    tape = Tape()
    probs = forward_batch(model, windows, tape, train, rng)
    loss = nk.cross_entropy(probs, [w.label for w in windows])
    grads = nk.backward(tape, loss)
    return float(loss.value[0, 0]), grads


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_microf1: float
    val_macrof1: float


@dataclass
class TrainResult:
    model: EvolveGcnModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def model_for_config(variant: str, kappa: int, cfg: TrainConfig, evolve: bool = True) -> EvolveGcnModel:
    return init_model(variant, kappa, cfg.n_layers, cfg.layer_dim, cfg.dropout, cfg.seed, evolve)


def train(
    model: EvolveGcnModel,
    windows: Sequence[GraphWindow],
    split: DatasetSplit,
    cfg: TrainConfig,
    progress=None,
) -> TrainResult:
    """Adam on mean cross-entropy; keeps the parameters of the best validation MicroF1 epoch."""
    if not split.train or not split.validation:
        raise ValueError("train and validation parts must be nonempty")
    model = copy.deepcopy(model)
    model.dropout = cfg.dropout
    rng = Rng(nk.derive_seed(cfg.seed, 0x747261696E))
    state = nk.AdamState()
    train_w = [windows[i] for i in split.train]
    val_w = [windows[i] for i in split.validation]
    val_y = np.array([w.label for w in val_w])

    best = {k: v.copy() for k, v in model.params.items()}
    best_score, best_epoch = -1.0, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_w))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_w[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = loss_and_grads(model, batch, train=True, rng=rng)
            model.params, state = nk.adam_step(model.params, grads, state, cfg.learning_rate)
            losses.append(loss)
            weights.append(len(batch))
        preds = predict(model, val_w)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), micro_f1(preds, val_y), macro_f1(preds, val_y))
        history.append(rec)
        if progress is not None:
            progress(rec)
        if rec.val_microf1 > best_score:
            best_score, best_epoch = rec.val_microf1, epoch
            best = {k: v.copy() for k, v in model.params.items()}
    model.params = best
    return TrainResult(model, history, best_epoch)


def format_history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_microf1", "val_macrof1"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_microf1), repr(r.val_macrof1)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def checkpoint_json(model: EvolveGcnModel) -> str:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "evolve": model.evolve,
        "kappa": model.kappa,
        "in_dim": model.in_dim,
        "layer_dims": list(model.layer_dims),
        "head_hidden": model.head_hidden,
        "dropout": model.dropout,
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]} for k, v in sorted(model.params.items())
        },
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_checkpoint(model: EvolveGcnModel, path: str | Path) -> None:
    atomic_write_text(path, checkpoint_json(model))


def load_checkpoint(path: str | Path) -> EvolveGcnModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path}: corrupt checkpoint (no format_version)")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {doc['format_version']} is incompatible with {CHECKPOINT_VERSION}"
        )
    try:
        params = {}
        for k, spec in doc["params"].items():
            arr = np.array(spec["data"], dtype=np.float64)
            params[k] = arr.reshape(spec["shape"])
        return EvolveGcnModel(
            variant=doc["variant"],
            kappa=int(doc["kappa"]),
            layer_dims=tuple(int(d) for d in doc["layer_dims"]),
            params=params,
            in_dim=int(doc["in_dim"]),
            head_hidden=int(doc["head_hidden"]),
            dropout=float(doc["dropout"]),
            evolve=bool(doc["evolve"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
