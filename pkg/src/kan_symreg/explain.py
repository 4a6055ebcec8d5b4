"""Shapley attributions: exact enumeration, Kernel SHAP and k-means backgrounds."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 20
MAX_ENUM_FEATURES = 15
BASE_SAMPLES = 2048
RIDGE = 1e-10
KMEANS_CAP = 100
KMEANS_ITERS = 100
KMEANS_TOL = 1e-8


@dataclass
class BackgroundSet:
    points: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,), sums to 1

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.weights is None:
            self.weights = np.full(self.points.shape[0], 1.0 / self.points.shape[0])
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.shape[0] < 1 or self.weights.shape != (self.points.shape[0],):
            raise ValueError("background needs >= 1 point and one weight per point")
        self.weights = self.weights / self.weights.sum()


def background_size(n_train: int, d: int) -> int:
    # round half up, not numpy's banker's rounding
    k = int(math.floor(0.005 * n_train * d + 0.5))
    return min(KMEANS_CAP, max(1, k), n_train)


def _plus_plus(X, k, rng):
    centers = [X[rng.integers(X.shape[0])]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(X.shape[0]) if total <= 0 else rng.choice(X.shape[0], p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans_background(X_train, k: int | None = None, seed: int = 42) -> BackgroundSet:
    """Lloyd's algorithm from k-means++ seeds; weights are cluster populations."""
    X = np.atleast_2d(np.asarray(X_train, dtype=float))
    n, d = X.shape
    if n == 0:
        raise ValueError("empty training matrix")
    k = background_size(n, d) if k is None else min(max(1, int(k)), n)
    rng = np.random.default_rng(seed)
    C = _plus_plus(X, k, rng)
    for _ in range(KMEANS_ITERS):
        labels = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
        new = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.abs(new - C))
        C = new
        if shift < KMEANS_TOL:
            break
    labels = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
    counts = np.bincount(labels, minlength=k).astype(float)
    used = counts > 0
    return BackgroundSet(C[used], counts[used] / n)


def _masks(d: int) -> np.ndarray:
    """Boolean coalition matrix (2^d, d); row m has feature i present iff bit i of m is set."""
    m = np.arange(2**d)[:, None]
    return ((m >> np.arange(d)) & 1).astype(bool)


def _as_2d(y, n):
    y = np.asarray(y, dtype=float)
    return y.reshape(n, -1)


def coalition_values(f, x, background: BackgroundSet, masks) -> np.ndarray:
    """v(S) = sum_b w_b f(x_S, b_rest) for each row of ``masks``; shape (n_masks, n_out)."""
    x = np.asarray(x, dtype=float)
    B, w = background.points, background.weights
    nm, nb = masks.shape[0], B.shape[0]
    rows = np.where(masks[:, None, :], x[None, None, :], B[None, :, :]).reshape(nm * nb, -1)
    out = _as_2d(f(rows), nm * nb).reshape(nm, nb, -1)
    return np.einsum("mbo,b->mo", out, w)


def _check_dims(x, background):
    x = np.asarray(x, dtype=float).ravel()
    if background.points.shape[1] != x.size:
        raise ValueError(f"background has {background.points.shape[1]} features, point has {x.size}")
    return x


def exact_shapley(f, x, background: BackgroundSet) -> np.ndarray:
    """Shapley values by full subset enumeration; shape (d,) or (d, n_out) for multi-output f."""
    x = _check_dims(x, background)
    d = x.size
    if d > MAX_EXACT_FEATURES:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_FEATURES} features; use kernel_shap")
    masks = _masks(d)
    v = coalition_values(f, x, background, masks)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(s) for s in range(d + 1)]
    ids = np.arange(masks.shape[0])
    phi = np.zeros((d, v.shape[1]))
    for i in range(d):
        without = ids[~masks[:, i]]
        s = sizes[without]
        wts = np.array([fact[a] * fact[d - a - 1] for a in s], dtype=float) / fact[d]
        phi[i] = wts @ (v[without | (1 << i)] - v[without])
    return phi[:, 0] if phi.shape[1] == 1 else phi


def kernel_weight(M: int, size: int) -> float:
    """Shapley kernel weight of a coalition with ``size`` present features."""
    return (M - 1) / (math.comb(M, size) * size * (M - size))


def _sample_coalitions(M: int, n: int, rng) -> np.ndarray:
    sizes = np.arange(1, M)
    p = (M - 1) / (sizes * (M - sizes))
    p = p / p.sum()
    out = np.zeros((n, M), dtype=bool)
    for row, s in zip(out, rng.choice(sizes, size=n, p=p)):
        row[rng.choice(M, size=s, replace=False)] = True
    return out


@dataclass
class KernelInfo:
    n_coalitions: int = 0
    enumerated: bool = True
    ridge_used: bool = False


def kernel_shap(f, x, background: BackgroundSet, seed: int = 42, return_info: bool = False):
    """Kernel SHAP with the efficiency constraint eliminated exactly."""
    x = _check_dims(x, background)
    M = x.size
    if M < 2:
        raise ValueError("kernel_shap needs at least two features")
    ends = np.array([np.zeros(M, bool), np.ones(M, bool)])
    v_ends = coalition_values(f, x, background, ends)
    base, fx = v_ends[0], v_ends[1]
    info = KernelInfo()
    if M <= MAX_ENUM_FEATURES:
        Z = _masks(M)[1:-1]
        sizes = Z.sum(axis=1)
        w = np.array([kernel_weight(M, s) for s in sizes])
    else:
        info.enumerated = False
        Z = _sample_coalitions(M, BASE_SAMPLES + 2 * M, np.random.default_rng(seed))
        w = np.ones(Z.shape[0])
    info.n_coalitions = Z.shape[0]
    v = coalition_values(f, x, background, Z)
    delta = fx - base
    Zf = Z.astype(float)
    A = Zf[:, :-1] - Zf[:, -1:]
    y = v - base - Zf[:, -1:] * delta
    AtW = A.T * w
    lhs, rhs = AtW @ A, AtW @ y
    try:
        if np.linalg.cond(lhs) > 1e12:
            raise np.linalg.LinAlgError
        head = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        info.ridge_used = True
        log.warning("singular kernel SHAP system; using ridge %g", RIDGE)
        head = np.linalg.solve(lhs + RIDGE * np.eye(M - 1), rhs)
    phi = np.vstack([head, delta - head.sum(axis=0)])
    phi = phi[:, 0] if phi.shape[1] == 1 else phi
    return (phi, info) if return_info else phi


@dataclass
class ShapReport:
    values: np.ndarray  # (n_out, n_samples, d)
    base: np.ndarray  # (n_out,)
    feature_names: list[str]
    output_names: list[str]
    mean_abs: np.ndarray = field(init=False)
    ridge_flags: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mean_abs = np.abs(self.values).mean(axis=1)


def explain(f, X, background: BackgroundSet, feature_names=None, output_names=None,
            method: str = "kernel", seed: int = 42) -> ShapReport:
    """Attributions for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if n == 0:
        raise ValueError("nothing to explain")
    feature_names = list(feature_names) if feature_names else [f"x{i + 1}" for i in range(d)]
    phis, flags = [], 0
    for row in X:
        if method == "exact":
            phi = exact_shapley(f, row, background)
        elif method == "kernel":
            phi, info = kernel_shap(f, row, background, seed=seed, return_info=True)
            flags += info.ridge_used
        else:
            raise ValueError(f"unknown method {method!r}")
        phis.append(np.asarray(phi).reshape(d, -1))
    vals = np.stack(phis).transpose(2, 0, 1)  # (n_out, n, d)
    base = coalition_values(f, X[0], background, np.zeros((1, d), bool))[0]
    n_out = vals.shape[0]
    output_names = list(output_names) if output_names else (["y"] if n_out == 1 else [f"y{j + 1}" for j in range(n_out)])
    return ShapReport(vals, base, feature_names, output_names, ridge_flags=flags)


def mean_abs_ranking(report: ShapReport) -> dict[str, list[str]]:
    """Features by descending mean |phi| per output; ties keep input order."""
    out = {}
    for j, name in enumerate(report.output_names):
        order = sorted(range(len(report.feature_names)), key=lambda i: (-report.mean_abs[j, i], i))
        out[name] = [report.feature_names[i] for i in order]
    return out


def write_shap_values(report: ShapReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "output", "feature", "phi"])
        for j, out in enumerate(report.output_names):
            for s in range(report.values.shape[1]):
                for i, feat in enumerate(report.feature_names):
                    w.writerow([s, out, feat, repr(float(report.values[j, s, i]))])


def write_shap_summary(report: ShapReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["output", "feature", "mean_abs"])
        for j, out in enumerate(report.output_names):
            for i, feat in enumerate(report.feature_names):
                w.writerow([out, feat, repr(float(report.mean_abs[j, i]))])


def read_shap_summary(path) -> dict[str, list[tuple[str, float]]]:
    out: dict[str, list[tuple[str, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["output"], []).append((row["feature"], float(row["mean_abs"])))
    return out
