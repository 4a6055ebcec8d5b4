"""Dense ReLU baseline trained with Adam on mean squared error."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import r2_score

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class FnnConfig:
    hidden_nodes: list[int] = field(default_factory=lambda: [64])
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    dropout: bool = False
    dropout_rate: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "FnnConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# Table 1 hyperparameters
TABLE1 = {
    "CHF": FnnConfig([231, 138, 267], 200, 64, 0.000931, True, 0.499590),
    "LWR": FnnConfig([511, 367, 563, 441, 162], 200, 8, 0.000966),
    "FP": FnnConfig([66, 400], 200, 8, 0.001000),
    "HEAT": FnnConfig([251, 184, 47], 200, 8, 0.000882),
    "MICROREACTOR": FnnConfig([199, 400], 200, 8, 0.000114, True, 0.322572),
    "PC": FnnConfig([309], 200, 8, 0.000832),
    "NS": FnnConfig([326, 127], 200, 8, 0.000944),
    "NXS": FnnConfig([95], 200, 8, 0.000342),
}


@dataclass
class FnnModel:
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "FnnModel":
        return FnnModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout_rate)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta) -> None:
        pos = 0
        for p in self.params():
            p[...] = np.asarray(theta[pos:pos + p.size]).reshape(p.shape)
            pos += p.size

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "activation": "relu",
            "dropout_rate": self.dropout_rate,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FnnModel":
        dims = d["dims"]
        ws = [np.asarray(w, float).reshape(dims[i], dims[i + 1]) for i, w in enumerate(d["weights"])]
        bs = [np.asarray(b, float) for b in d["biases"]]
        return cls(ws, bs, float(d.get("dropout_rate", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(dims, seed: int = 0, dropout_rate: float = 0.0, rng=None) -> FnnModel:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed) if rng is None else rng
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return FnnModel(ws, bs, dropout_rate)


def _forward(model: FnnModel, X, masks=None):
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        if l == last:
            h = z
        else:
            h = np.maximum(z, 0.0)
            if masks is not None:
                h = h * masks[l]
        acts.append(h)
    return acts


def _check(model: FnnModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.dims[0]:
        raise ValueError(f"expected {model.dims[0]} input columns, got {X.shape[1]}")
    return X


def fnn_forward(model: FnnModel, X, training: bool = False, rng=None) -> np.ndarray:
    """Predictions; dropout (inverted scaling) only when ``training`` is set."""
    X = _check(model, X)
    masks = None
    if training and model.dropout_rate > 0:
        rng = np.random.default_rng() if rng is None else rng
        masks = _dropout_masks(model, X.shape[0], rng)
    return _forward(model, X, masks)[-1]


def _dropout_masks(model: FnnModel, n: int, rng) -> list[np.ndarray]:
    keep = 1.0 - model.dropout_rate
    return [(rng.random((n, w.shape[1])) < keep) / keep for w in model.weights[:-1]]


def loss_and_grad(model: FnnModel, X, Y, masks=None):
    """MSE and its gradient as a list aligned with ``model.params()``."""
    X = _check(model, X)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    acts = _forward(model, X, masks)
    resid = acts[-1] - Y
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / resid.size
    grads = [None] * (2 * len(model.weights))
    for l in range(len(model.weights) - 1, -1, -1):
        grads[2 * l] = acts[l].T @ g
        grads[2 * l + 1] = g.sum(axis=0)
        if l > 0:
            g = g @ model.weights[l].T
            g = g * (acts[l] > 0)
            if masks is not None:
                g = g * masks[l - 1]
    return loss, grads


@dataclass
class FnnReport:
    loss_trace: list[float] = field(default_factory=list)
    test_r2: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))


def fnn_train(data, cfg: FnnConfig) -> tuple[FnnModel, FnnReport]:
    """Mini-batch Adam on scaled targets; bit-deterministic for a fixed seed."""
    t0 = time.perf_counter()
    X = np.asarray(data.X_train, float)
    Y = np.asarray(data.Y_train, float).reshape(X.shape[0], -1)
    rng = np.random.default_rng(cfg.seed)
    model = init_model([X.shape[1], *cfg.hidden_nodes, Y.shape[1]], rng=rng,
                       dropout_rate=cfg.dropout_rate if cfg.dropout else 0.0)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    report = FnnReport()
    step = 0
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = _dropout_masks(model, idx.size, rng) if model.dropout_rate > 0 else None
            loss, grads = loss_and_grad(model, X[idx], Y[idx], masks)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            total += loss * idx.size
            step += 1
            c1 = 1.0 - ADAM_BETA1**step
            c2 = 1.0 - ADAM_BETA2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= ADAM_BETA1
                mi += (1 - ADAM_BETA1) * g
                vi *= ADAM_BETA2
                vi += (1 - ADAM_BETA2) * g * g
                p -= cfg.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
        report.loss_trace.append(total / n)
    if getattr(data, "X_test", None) is not None:
        Yte = np.asarray(data.Y_test, float).reshape(len(data.Y_test), -1)
        pred = fnn_forward(model, data.X_test)
        report.test_r2 = [r2_score(Yte[:, j], pred[:, j]) for j in range(Yte.shape[1])]
    report.wall_time = time.perf_counter() - t0
    return model, report
