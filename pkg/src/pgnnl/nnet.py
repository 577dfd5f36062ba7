"""Feed-forward network with hand-written backpropagation and ADAM."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class Mlp:
    """Weights are stored as (fan_out, fan_in) matrices, biases as vectors."""

    layer_sizes: List[int]
    activations: List[str]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def n_hidden_neurons(self) -> int:
        return int(sum(self.layer_sizes[1:-1]))

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), list(self.activations),
                   [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self):
        return self.weights + self.biases

    def to_dict(self, metadata=None) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "metadata": metadata or {},
        }

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        sizes = [int(s) for s in d["layer_sizes"]]
        ws = [np.array(w, dtype=float).reshape(sizes[i + 1], sizes[i]) for i, w in enumerate(d["weights"])]
        bs = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(sizes, list(d["activations"]), ws, bs)

    def save(self, path, metadata=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(metadata), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_mlp(layer_sizes: Sequence[int], activations="tanh", seed: int = 0) -> Mlp:
    """Glorot-uniform weights, zero biases.

    ``activations`` is one name for all hidden layers or a list with one
    entry per hidden layer; the output layer is always linear.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ConfigError("an Mlp needs at least one hidden layer")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    n_hidden = len(sizes) - 2
    if isinstance(activations, str):
        activations = [activations] * n_hidden
    activations = list(activations)
    if len(activations) != n_hidden:
        raise ConfigError(f"need {n_hidden} hidden activations, got {len(activations)}")
    for a in activations:
        if a not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {a!r}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(sizes, activations + ["identity"], ws, bs)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward_cache(net: Mlp, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.layer_sizes[0]:
        raise ShapeError(f"expected input of width {net.layer_sizes[0]}, got shape {X.shape}")
    acts = [X]
    a = X
    for W, b, name in zip(net.weights, net.biases, net.activations):
        a = _act(name, a @ W.T + b)
        acts.append(a)
    return acts


def forward(net: Mlp, batch) -> np.ndarray:
    return _forward_cache(net, batch)[-1]


class Gradients(NamedTuple):
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray


def backward(net: Mlp, batch, upstream_grad, cache=None) -> Gradients:
    """Reverse-mode gradients of ``sum(upstream_grad * forward(net, batch))``."""
    acts = cache if cache is not None else _forward_cache(net, batch)
    g = np.asarray(upstream_grad, dtype=float)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
    n_layers = len(net.weights)
    gW, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        a_out = acts[i + 1]
        name = net.activations[i]
        if name == "tanh":
            g = g * (1.0 - a_out * a_out)
        elif name == "relu":
            g = g * (a_out > 0)
        gW[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    return Gradients(gW, gb, g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, **hyper) -> "AdamState":
        s = cls(**hyper)
        s.m = [np.zeros_like(p) for p in net.params()]
        s.v = [np.zeros_like(p) for p in net.params()]
        return s


def adam_step(net: Mlp, grads: Gradients, state: AdamState):
    """Bias-corrected ADAM update, applied in place; returns ``(net, state)``."""
    flat = list(grads.weights) + list(grads.biases)
    params = net.params()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise ShapeError("gradient shapes do not match network parameters")
    for i, g in enumerate(flat):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter block {i} at ADAM step {state.step + 1}",
                                  step=state.step + 1)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray
    components: dict


def mse_loss(pred, targets, batch=None) -> LossResult:
    """Mean over samples of the squared Euclidean error."""
    diff = pred - targets
    n = len(pred)
    value = float(np.sum(diff * diff) / n)
    return LossResult(value, 2.0 * diff / n, {"L_error": value})


@dataclass
class TrainSet:
    """Rows of ``inputs``/``targets`` plus per-row ``extras`` handed to the loss.

    ``segments`` (optional) labels runs of consecutive rows; mini-batches
    are contiguous windows that never mix segments.
    """

    inputs: np.ndarray
    targets: np.ndarray
    extras: dict = field(default_factory=dict)
    segments: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx) -> dict:
        out = {"inputs": self.inputs[idx], "targets": self.targets[idx]}
        for k, v in self.extras.items():
            out[k] = v[idx]
        if self.segments is not None:
            out["segments"] = self.segments[idx]
        return out


def _blocks(ts: TrainSet, batch_size: int):
    n = len(ts)
    seg = ts.segments if ts.segments is not None else np.zeros(n, dtype=int)
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    ends = np.r_[starts[1:], n]
    blocks = []
    for s, e in zip(starts, ends):
        for b in range(s, e, batch_size):
            blocks.append((b, min(b + batch_size, e)))
    return blocks


def evaluate(net: Mlp, ts: TrainSet, loss: Callable) -> LossResult:
    return loss(forward(net, ts.inputs), ts.targets, ts.batch(slice(None)))


def train(net: Mlp, train_set: TrainSet, val_set: Optional[TrainSet], loss: Callable = mse_loss, *,
          epochs: int = 100, batch_size: int = 64, seed: int = 0, patience: Optional[int] = 50,
          adam: Optional[dict] = None, shuffle: bool = True):
    """Mini-batch ADAM training with early stopping on the validation loss.

    Batches are contiguous windows of rows (so losses coupling neighbouring
    rows see them together); window order is shuffled every epoch with a
    seeded generator.  Returns ``(best_net, history)``; ``history`` has one
    dict per epoch with ``train_*`` and ``val_*`` entries for the total and
    every loss component.
    """
    net = net.copy()
    if epochs <= 0:
        return net, []
    if len(train_set) == 0 or (val_set is not None and len(val_set) == 0):
        raise ValueError("train and validation sets must be nonempty")
    state = AdamState.for_net(net, **(adam or {}))
    rng = np.random.default_rng([seed, 7919])
    blocks = _blocks(train_set, batch_size)
    history = []
    try:
        best = _run_epochs(net, train_set, val_set, loss, epochs, patience, shuffle, state, rng, blocks, history)
    except DivergenceError as e:
        e.history = history  # callers may persist the epochs completed so far
        raise
    return best, history


def _run_epochs(net, train_set, val_set, loss, epochs, patience, shuffle, state, rng, blocks, history):
    best, best_val, since = net.copy(), math.inf, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(blocks)) if shuffle else np.arange(len(blocks))
        tot, comps, count = 0.0, {}, 0
        for j in order:
            a, b = blocks[j]
            batch = train_set.batch(slice(a, b))
            acts = _forward_cache(net, batch["inputs"])
            res = loss(acts[-1], batch["targets"], batch)
            if not math.isfinite(res.value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", step=epoch)
            grads = backward(net, None, res.grad, cache=acts)
            adam_step(net, grads, state)
            w = b - a
            tot += res.value * w
            for k, v in res.components.items():
                comps[k] = comps.get(k, 0.0) + v * w
            count += w
        rec = {"epoch": epoch, "train_total": tot / count}
        rec.update({f"train_{k}": v / count for k, v in comps.items()})
        if val_set is not None:
            vres = evaluate(net, val_set, loss)
            if not math.isfinite(vres.value):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}", step=epoch)
            rec["val_total"] = vres.value
            rec.update({f"val_{k}": v for k, v in vres.components.items()})
            monitor = vres.value
        else:
            monitor = rec["train_total"]
        history.append(rec)
        if monitor < best_val:
            best_val, best, since = monitor, net.copy(), 0
        else:
            since += 1
            if patience is not None and since >= patience:
                break
    return best
