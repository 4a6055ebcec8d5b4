"""Limited-memory BFGS with a backtracking Armijo line search."""
from __future__ import annotations

from collections import deque

import numpy as np

ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_BACKTRACKS = 40


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective, grad, theta0, lr: float = 1.0, max_steps: int = 100, history: int = 10,
                   tol_grad: float = 1e-10, tol_change: float = 1e-14, trace: list | None = None):
    """Minimise ``objective`` from ``theta0``; returns the best point seen.

    ``lr`` is the initial trial step of every line search. When ``trace`` is a
    list, the best objective value after each outer iteration is appended.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    f = float(objective(theta))
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    if max_steps <= 0:
        return theta
    g = np.asarray(grad(theta), dtype=float)
    best_f, best_theta = f, theta.copy()
    pairs: deque = deque(maxlen=history)

    for _ in range(max_steps):
        if np.max(np.abs(g)) <= tol_grad:
            break
        d = _two_loop(g, pairs)
        slope = g.dot(d)
        if not pairs or slope >= 0:
            pairs.clear()
            d = -g * min(1.0, 1.0 / np.sum(np.abs(g)))
            slope = g.dot(d)
        t = lr
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            trial = theta + t * d
            f_new = float(objective(trial))
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C * t * slope:
                accepted = True
                break
            t *= SHRINK
        if not accepted:
            break
        g_new = np.asarray(grad(trial), dtype=float)
        s, y = trial - theta, g_new - g
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        change = abs(f - f_new)
        theta, f, g = trial, f_new, g_new
        if f < best_f:
            best_f, best_theta = f, theta.copy()
        if trace is not None:
            trace.append(best_f)
        if change <= tol_change or np.max(np.abs(s)) <= tol_change:
            break
    return best_theta
