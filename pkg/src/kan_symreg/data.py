"""Dataset ingestion, scaling, the heat-conduction generator and reference correlations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN_FRACTION = 0.7
MIN_ROWS = 10
HEAT_COLUMNS = ("qprime", "mdot", "Tin", "R", "L", "Cp", "k", "T")
MAX_ROOT_ITERS = 200
ROOT_TOL = 1e-10


class DataError(ValueError):
    pass


@dataclass
class MinMaxScaler:
    min_: np.ndarray = None
    max_: np.ndarray = None

    def fit(self, X) -> "MinMaxScaler":
        X = np.asarray(X, dtype=float)
        self.min_ = X.min(axis=0)
        self.max_ = X.max(axis=0)
        return self

    @property
    def span(self) -> np.ndarray:
        return self.max_ - self.min_

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (X - self.min_) / safe, 0.0)

    def inverse_transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X * self.span + self.min_

    def to_dict(self) -> dict:
        return {"min": self.min_.tolist(), "max": self.max_.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MinMaxScaler":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float))


@dataclass
class Dataset:
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    feature_labels: list[str]
    output_labels: list[str]
    y_scaler: MinMaxScaler
    x_scaler: MinMaxScaler = field(default=None, repr=False)

    def unscale_y(self, Y) -> np.ndarray:
        return self.y_scaler.inverse_transform(np.asarray(Y, float).reshape(len(Y), -1))


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(TRAIN_FRACTION * n))
    return perm[:n_train], perm[n_train:]


def prepare(X, Y, feature_labels, output_labels, seed: int = 42) -> Dataset:
    """Shuffle, split 70/30 and min-max scale with scalers fit on the training rows."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise DataError("inputs and outputs have different row counts")
    if X.shape[0] < MIN_ROWS:
        raise DataError(f"need at least {MIN_ROWS} rows, got {X.shape[0]}")
    tr, te = split_indices(X.shape[0], seed)
    xs = MinMaxScaler().fit(X[tr])
    ys = MinMaxScaler().fit(Y[tr])
    return Dataset(
        xs.transform(X[tr]), ys.transform(Y[tr]), xs.transform(X[te]), ys.transform(Y[te]),
        list(feature_labels), list(output_labels), ys, xs,
    )


def read_csv_columns(path, columns) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for c, i in zip(columns, idx):
                try:
                    vals.append(float(row[i]))
                except (ValueError, IndexError):
                    cell = row[i] if i < len(row) else ""
                    raise DataError(f"{path}: row {lineno}, column {c!r}: non-numeric value {cell!r}") from None
            rows.append(vals)
    return np.asarray(rows, dtype=float).reshape(len(rows), len(columns))


def load_csv(path, input_cols, output_cols, seed: int = 42) -> Dataset:
    table = read_csv_columns(path, list(input_cols) + list(output_cols))
    n_in = len(input_cols)
    return prepare(table[:, :n_in], table[:, n_in:], input_cols, output_cols, seed)


def write_csv(path, columns, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in np.asarray(values, float):
            w.writerow([repr(float(v)) for v in row])


# -- heat conduction ------------------------------------------------------


@dataclass
class HeatGenConfig:
    n_samples: int = 1000
    qprime: tuple[float, float] = (10e3, 45e3)  # W/m
    mdot: tuple[float, float] = (0.2, 0.5)  # kg/s
    Tin: tuple[float, float] = (500.0, 600.0)  # K
    R: tuple[float, float] = (0.004, 0.006)  # m
    L: tuple[float, float] = (1.0, 4.0)  # m
    Cp: tuple[float, float] = (3000.0, 6000.0)  # J/(kg K)
    k: tuple[float, float] = (2.0, 6.0)  # W/(m K)
    conductivity: str = "constant"  # or "cubic"
    # k(T) = A T^3 + B T^2 + C T + D with D the sampled k in cubic mode
    cubic: tuple[float, float, float] = (0.0, 1e-7, -5e-4)
    radial_nodes: int = 20
    seed: int = 42

    def ranges(self) -> list[tuple[float, float]]:
        return [self.qprime, self.mdot, self.Tin, self.R, self.L, self.Cp, self.k]

    def validate(self) -> None:
        for name, (lo, hi) in zip(HEAT_COLUMNS, self.ranges()):
            if not (np.isfinite(lo) and np.isfinite(hi) and hi >= lo):
                raise DataError(f"invalid range for {name}: ({lo}, {hi})")
            if name != "qprime" and lo <= 0:
                raise DataError(f"{name} range must be strictly positive")
            if name == "qprime" and lo < 0:
                raise DataError("qprime range must be non-negative")
        if self.conductivity not in ("constant", "cubic"):
            raise DataError(f"unknown conductivity mode {self.conductivity!r}")
        if self.radial_nodes < 2:
            raise DataError("need at least two radial nodes")


@dataclass
class HeatTable:
    values: np.ndarray
    columns: tuple[str, ...] = HEAT_COLUMNS
    resamples: int = 0

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.values)

    @property
    def inputs(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def output(self) -> np.ndarray:
        return self.values[:, -1]


class RootError(RuntimeError):
    pass


def conductivity_integral(T, coeffs):
    A, B, C, D = coeffs
    return A / 4 * T**4 + B / 3 * T**3 + C / 2 * T**2 + D * T


def conductivity(T, coeffs):
    A, B, C, D = coeffs
    return A * T**3 + B * T**2 + C * T + D


def solve_conduction(rhs: float, coeffs, guess: float, lower: float) -> float:
    """Root of ``integral k dT = rhs`` by Newton, falling back to bisection.

    ``lower`` must satisfy ``integral(lower) <= rhs``; the upper bracket is
    found by expanding from ``guess``.
    """
    F = lambda T: conductivity_integral(T, coeffs) - rhs  # noqa: E731
    scale = abs(rhs) + sum(abs(c) for c in coeffs) * max(abs(guess), 1.0) ** 4
    tol = max(ROOT_TOL, 8 * np.finfo(float).eps * scale)
    lo, f_lo = lower, F(lower)
    if abs(f_lo) <= tol:
        return lo
    if f_lo > 0:
        raise RootError("lower bracket lies above the root")
    step = max(abs(guess - lo), 1.0)
    hi = max(guess, lo) + step
    for _ in range(MAX_ROOT_ITERS):
        if F(hi) >= 0:
            break
        step *= 2
        hi = lo + step
    else:
        raise RootError("could not bracket the conduction root")
    T = min(max(guess, lo), hi)
    for _ in range(MAX_ROOT_ITERS):
        res = F(T)
        if abs(res) <= tol:
            return T
        if res < 0:
            lo = T
        else:
            hi = T
        dk = conductivity(T, coeffs)
        T_new = T - res / dk if dk > 0 else math.nan
        if not (lo < T_new < hi):
            T_new = 0.5 * (lo + hi)
        if T_new == T:
            break
        T = T_new
    if abs(F(T)) <= tol:
        return T
    raise RootError(f"conduction root did not converge (residual {F(T):.3g})")


def centerline_temperature(qprime, mdot, Tin, R, L, Cp, coeffs, radial_nodes: int = 20, z=None) -> float:
    """Fuel temperature at r = 0 and axial position ``z`` (default: the outlet, z = L)."""
    z = L if z is None else z
    T_ref = qprime / (mdot * Cp) * z + Tin
    base = conductivity_integral(T_ref, coeffs)
    T = T_ref
    for r in np.linspace(R, 0.0, radial_nodes)[1:]:
        rhs = qprime / (4 * math.pi) * (1 - (r / R) ** 2) + base
        T = solve_conduction(rhs, coeffs, guess=T, lower=T_ref)
    return T


def heat_closed_form(qprime, mdot, Tin, R, L, Cp, k):
    """Constant-conductivity centerline temperature at the outlet."""
    return Tin + qprime * L / (mdot * Cp) + qprime / (4 * math.pi * k)


def generate_heat(cfg: HeatGenConfig = HeatGenConfig()) -> HeatTable:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ranges = np.array(cfg.ranges())
    rows, resamples = [], 0
    while len(rows) < cfg.n_samples:
        feats = rng.uniform(ranges[:, 0], ranges[:, 1])
        q, mdot, Tin, R, L, Cp, k = feats
        coeffs = (0.0, 0.0, 0.0, k) if cfg.conductivity == "constant" else (*cfg.cubic, k)
        try:
            T = centerline_temperature(q, mdot, Tin, R, L, Cp, coeffs, cfg.radial_nodes)
        except RootError:
            resamples += 1
            continue
        rows.append([*feats, T])
    return HeatTable(np.asarray(rows, dtype=float).reshape(-1, len(HEAT_COLUMNS)), HEAT_COLUMNS, resamples)


def heat_dataset(n_samples: int = 1000, seed: int = 42, **overrides) -> Dataset:
    table = generate_heat(HeatGenConfig(n_samples=n_samples, seed=seed, **overrides))
    return prepare(table.inputs, table.output, HEAT_COLUMNS[:-1], HEAT_COLUMNS[-1:], seed)


# -- other preprocessing --------------------------------------------------


def normalize_flux(rows) -> np.ndarray:
    """Divide each quadrant flux by its row total."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 4:
        raise DataError(f"expected an (n, 4) flux matrix, got shape {rows.shape}")
    if np.any(rows < 0):
        raise DataError("fluxes must be non-negative")
    totals = rows.sum(axis=1)
    zero = np.flatnonzero(totals <= 0)
    if zero.size:
        raise DataError(f"row {int(zero[0])} has zero total flux")
    return rows / totals[:, None]


def w3_chf(P, Xe, G, D_h, dh_sub):
    """W-3 critical heat flux correlation, evaluated literally with no range checks.

    ``dh_sub`` is the inlet subcooling enthalpy h_f - h_in.
    """
    P, Xe, G, D_h, dh_sub = (np.asarray(v, dtype=float) for v in (P, Xe, G, D_h, dh_sub))
    pressure = (2.022 - 0.06238 * P) + (0.1722 - 0.01427 * P) * np.exp((18.177 - 0.5987 * P) * Xe)
    flux = (0.1484 - 1.596 * Xe + 0.1729 * Xe * np.abs(Xe)) * 2.326 * G + 3271
    quality = 1.157 - 0.869 * Xe
    geometry = 0.2664 + 0.8357 * np.exp(-124.1 * D_h)
    inlet = 0.8258 + 0.0003413 * dh_sub
    out = pressure * flux * quality * geometry * inlet
    return float(out) if out.ndim == 0 else out
