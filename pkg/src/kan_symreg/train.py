"""KAN training: regularised loss, pruning and the fit / prune / refit pipeline."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .kan import KanLayer, KanNetwork, LossSpec, edge_scores, fit_domains, forward, init_network, loss_and_gradient
from .lbfgs import lbfgs_minimize
from .metrics import r2_score

log = logging.getLogger(__name__)

PRUNE_THRESHOLD = 1e-2
REFIT_TOLERANCE = 1.5

# Table 2 search ranges
DEPTHS = (1, 2)
GRIDS = tuple(range(3, 11))
ORDERS = tuple(range(2, 9))
STEPS = (25, 50, 75, 100, 125, 150, 200, 250)
LEARNING_RATES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
REG_METRICS = ("EFSN", "EFS", "EFSU", "EB", "NB")
LAMBDA_MAX = 1e-3
LAMBDA_ENTROPY_MAX = 10.0


@dataclass
class KanHyperParams:
    depth: int = 1
    grid: int = 5
    k: int = 3
    steps: int = 50
    lam: float = 0.0
    lam_entropy: float = 0.0
    lr1: float = 1.0
    lr2: float = 1.0
    reg_metric: str = "EFSU"
    seed: int = 42
    hidden_width: int | None = None

    def width(self, n_in: int, n_out: int) -> list[int]:
        hidden = self.hidden_width if self.hidden_width else 2 * n_in + 1
        return [n_in] + [hidden] * self.depth + [n_out]

    def in_table2_ranges(self) -> bool:
        return (
            self.depth in DEPTHS and self.grid in GRIDS and self.k in ORDERS and self.steps in STEPS
            and 0 <= self.lam <= LAMBDA_MAX and 0 <= self.lam_entropy <= LAMBDA_ENTROPY_MAX
            and 0.5 <= self.lr1 <= 2 and 0.5 <= self.lr2 <= 2 and self.reg_metric in REG_METRICS
        )

    @classmethod
    def from_dict(cls, d: dict) -> "KanHyperParams":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# Table 3 best configurations
TABLE3 = {
    "FP": KanHyperParams(1, 8, 7, 75, 2.043e-05, 5.03464, 1.5, 1.75, "EFS"),
    "LWR": KanHyperParams(1, 7, 2, 125, 8.912e-04, 7.48809, 1.75, 1.25, "EFS"),
    "HEAT": KanHyperParams(1, 7, 3, 150, 1.899e-04, 8.20921, 1.5, 2.0, "EFSU"),
    "MICROREACTOR": KanHyperParams(1, 8, 3, 25, 1.217e-05, 7.66581, 0.75, 1.25, "EFS"),
    "PC-A": KanHyperParams(1, 4, 7, 25, 4.284e-05, 0.02540, 1.5, 1.25, "EFS"),
    "PC-B": KanHyperParams(1, 3, 2, 250, 1.112e-06, 0.96268, 0.75, 1.0, "EFS"),
    "PC-C": KanHyperParams(1, 3, 3, 150, 9.739e-06, 7.04743, 1.0, 1.5, "EFSN"),
    "PC": KanHyperParams(1, 7, 6, 150, 3.370e-04, 5.77322, 1.75, 0.5, "EFSU"),
    "CHF": KanHyperParams(1, 9, 2, 100, 5.123e-06, 7.71662, 2.0, 1.75, "EFSU"),
    "NS": KanHyperParams(1, 6, 8, 25, 3.795e-05, 0.00650, 2.0, 0.5, "EFS"),
    "NXS": KanHyperParams(2, 9, 4, 100, 3.903e-04, 0.42861, 1.25, 1.25, "EFSU"),
}


@dataclass
class TrainReport:
    loss_trace: list[float] = field(default_factory=list)
    stage_boundary: int = 0
    spline_r2: list[float] = field(default_factory=list)
    pruned_edges: int = 0
    pruned_nodes: int = 0
    wall_time: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    def trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.loss_trace):
                w.writerow([i, repr(float(v))])


def total_loss(net: KanNetwork, X, Y, lam: float = 0.0, lam_entropy: float = 0.0, reg_metric: str = "EFSU") -> float:
    return loss_and_gradient(net, X, Y, LossSpec(lam, lam_entropy, reg_metric), with_grad=False)[0]


class _Objective:
    """Shares one forward/backward pass between the loss and gradient callbacks."""

    def __init__(self, net: KanNetwork, X, Y, spec: LossSpec):
        self.net, self.X, self.Y, self.spec = net, X, Y, spec
        self.mask = net.param_mask()
        self._key = None

    def _eval(self, theta, with_grad):
        key = (theta.tobytes(), with_grad)
        if self._key is not None and (self._key == key or (self._key[0] == key[0] and self._key[1])):
            return self._val
        self.net.set_params(theta)
        loss, g = loss_and_gradient(self.net, self.X, self.Y, self.spec, with_grad=with_grad)
        if g is not None:
            g = g * self.mask
        self._key, self._val = key, (loss, g)
        return self._val

    def value(self, theta):
        return self._eval(theta, False)[0]

    def grad(self, theta):
        return self._eval(theta, True)[1]


def fit(net: KanNetwork, X, Y, spec: LossSpec, lr: float, steps: int, trace: list | None = None) -> KanNetwork:
    """Run L-BFGS in place on ``net``'s parameters."""
    obj = _Objective(net, X, Y, spec)
    theta = lbfgs_minimize(obj.value, obj.grad, net.get_params(), lr=lr, max_steps=steps, trace=trace)
    net.set_params(theta)
    return net


def _drop_hidden_nodes(net: KanNetwork, keep: list[np.ndarray]) -> KanNetwork:
    """``keep[l]`` lists surviving node indices of hidden layer ``l + 1``."""
    layers = [layer.copy() for layer in net.layers]
    for h, idx in enumerate(keep):
        before, after = layers[h], layers[h + 1]
        layers[h] = KanLayer(before.basis, before.coef[idx], before.w_base[idx], before.w_spline[idx], before.mask[idx])
        layers[h + 1] = KanLayer(after.basis, after.coef[:, idx], after.w_base[:, idx], after.w_spline[:, idx],
                                 after.mask[:, idx])
    return KanNetwork(layers, net.seed)


def _restore_means(pruned: KanNetwork, net: KanNetwork, X, keep: list[np.ndarray]) -> None:
    """Give every surviving node its pre-pruning mean on ``X``.

    Dropped edges and nodes carry constant offsets that no bias can absorb.
    Clamped B-splines sum to one everywhere, so shifting all coefficients of the
    strongest surviving incoming edge by delta / w_s adds exactly delta to it.
    """
    forward(net, X)
    targets = [c["post"].sum(axis=2).mean(axis=0) for c in net.cache]
    for l, layer in enumerate(pruned.layers):
        forward(pruned, X)
        current = pruned.cache[l]["post"].sum(axis=2).mean(axis=0)
        target = targets[l][keep[l]] if l < len(keep) else targets[l]
        for j, delta in enumerate(target - current):
            strength = np.abs(layer.w_spline[j]) * layer.mask[j]
            i = int(np.argmax(strength))
            if strength[i] > 0:
                layer.coef[j, i] += delta / layer.w_spline[j, i]
    pruned.cache = None


def prune(net: KanNetwork, X, threshold: float = PRUNE_THRESHOLD, fold_offsets: bool = True) -> KanNetwork:
    """Drop weak hidden nodes (edge attribution) and freeze weak edges (normalised edge std).

    Returns a new network; ``net`` is untouched. Input and output nodes always
    survive. With ``fold_offsets`` the constant part of what was removed is
    folded back into surviving edges; without it the result is a strict
    subnetwork whose surviving edges keep their parameters.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("pruning needs a non-empty batch")
    if threshold <= 0:
        return net.copy()
    eb = edge_scores(net, X, "EB").scores
    efsn = edge_scores(net, X, "EFSN").scores
    keep = []
    for h in range(1, len(net.layers)):
        incoming = eb[h - 1].max(axis=1)
        outgoing = eb[h].max(axis=0)
        alive = np.flatnonzero((incoming >= threshold) | (outgoing >= threshold))
        if alive.size == 0:
            alive = np.array([int(np.argmax(np.maximum(incoming, outgoing)))])
        keep.append(alive)
    pruned = _drop_hidden_nodes(net, keep)
    for l, layer in enumerate(pruned.layers):
        scores = efsn[l]
        if l < len(keep):
            scores = scores[keep[l]]
        if l > 0:
            scores = scores[:, keep[l - 1]]
        weak = scores < threshold
        layer.mask[weak] = 0.0
        layer.coef[weak] = 0.0
        layer.w_base[weak] = 0.0
        layer.w_spline[weak] = 0.0
    if fold_offsets:
        _restore_means(pruned, net, X, keep)
    return pruned


def count_edges(net: KanNetwork) -> int:
    return int(sum(layer.mask.sum() for layer in net.layers))


def train_two_stage(data, hp: KanHyperParams) -> tuple[KanNetwork, TrainReport]:
    """Fit with ``lr1``, prune, refit with ``lr2``; deterministic for a fixed seed."""
    t0 = time.perf_counter()
    Xtr, Ytr = np.asarray(data.X_train, float), np.asarray(data.Y_train, float)
    Xte, Yte = np.asarray(data.X_test, float), np.asarray(data.Y_test, float)
    if Ytr.ndim == 1:
        Ytr, Yte = Ytr[:, None], Yte[:, None]
    width = hp.width(Xtr.shape[1], Ytr.shape[1])
    net = fit_domains(init_network(width, (hp.grid, hp.k), seed=hp.seed), Xtr)
    spec = LossSpec(hp.lam, hp.lam_entropy, hp.reg_metric)
    report = TrainReport()
    initial = total_loss(net, Xtr, Ytr, hp.lam, hp.lam_entropy, hp.reg_metric)
    report.loss_trace.append(initial)

    fit(net, Xtr, Ytr, spec, hp.lr1, hp.steps, trace=report.loss_trace)
    report.stage_boundary = len(report.loss_trace)
    n_edges, n_nodes = count_edges(net), sum(net.width[1:-1])
    net = prune(net, Xtr)
    report.pruned_edges = n_edges - count_edges(net)
    report.pruned_nodes = n_nodes - sum(net.width[1:-1])
    staged = net.copy()
    val_before = float(np.mean((forward(net, Xte) - Yte) ** 2))

    fit(net, Xtr, Ytr, spec, hp.lr2, hp.steps, trace=report.loss_trace)
    val_after = float(np.mean((forward(net, Xte) - Yte) ** 2))
    if val_after > REFIT_TOLERANCE * val_before:
        report.warnings.append(
            f"refit raised held-out MSE from {val_before:.3g} to {val_after:.3g}; kept pruned stage-1 parameters"
        )
        net = staged
    final = total_loss(net, Xtr, Ytr, hp.lam, hp.lam_entropy, hp.reg_metric)
    if not np.isfinite(final) or final > initial:
        report.warnings.append(f"final loss {final:.4g} exceeds initial loss {initial:.4g}")
    pred = forward(net, Xte)
    report.spline_r2 = [r2_score(Yte[:, j], pred[:, j]) for j in range(Yte.shape[1])]
    report.wall_time = time.perf_counter() - t0
    for w in report.warnings:
        log.warning(w)
    return net, report
