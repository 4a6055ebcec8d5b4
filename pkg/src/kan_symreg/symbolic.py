"""Symbolic snapping of spline edges and closed-form network expressions.

Every live edge is replaced by ``c * f(a * x + b) + d`` with ``f`` taken from a
fixed primitive library. The snapped network is then written out as an
expression tree per output, which can be evaluated, serialised to text with
four-decimal coefficients and parsed back.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .kan import KanEdge, KanNetwork, forward
from .metrics import r2_score

CLAMP_MARGIN = 1e-12
MAX_FIT_POINTS = 256
AB_GRID = np.linspace(-10.0, 10.0, 41)
TIE_TOL = 1e-10
FAIL_R2 = -10.0
# primitive outputs must vary by at least this fraction of their level, which
# keeps c and d from growing into large cancelling pairs
MIN_RELATIVE_SPREAD = 1e-3
DISPLAY_DECIMALS = 4
MUL = "·"


# -- primitive library ----------------------------------------------------


def _clamp_domain(domain: str | None, u: np.ndarray) -> np.ndarray:
    m = CLAMP_MARGIN
    if domain is None:
        return u
    if domain == "positive":
        return np.where(u < m, m, u)
    if domain == "nonneg":
        return np.where(u < 0, m, u)
    if domain == "unit":
        return np.where(u < -1, -1 + m, np.where(u > 1, 1 - m, u))
    if domain == "open_unit":
        return np.clip(u, -1 + m, 1 - m)
    if domain == "nonzero":
        return np.where(np.abs(u) < m, np.where(u < 0, -m, m), u)
    raise ValueError(f"unknown domain {domain!r}")


@dataclass(frozen=True)
class Primitive:
    name: str
    rank: int
    func: Callable
    parity: str = "none"  # "even", "odd", "acos" or "none"; used to make a > 0
    domain: str | None = None
    period: float | None = None

    def clamp(self, u: np.ndarray) -> tuple[np.ndarray, int]:
        v = _clamp_domain(self.domain, u)
        return v, int(np.count_nonzero(v != u))

    def valid(self, u: np.ndarray) -> np.ndarray:
        """Points that need no clamping."""
        return np.isfinite(u) & (_clamp_domain(self.domain, u) == u)

    def __call__(self, u):
        with np.errstate(all="ignore"):
            return self.func(u)


def _sign(u):
    return np.sign(u).astype(float)


LIBRARY: tuple[Primitive, ...] = (
    Primitive("0", 0, lambda u: np.zeros_like(u)),
    Primitive("x", 1, lambda u: u, "odd"),
    Primitive("pow2", 2, lambda u: u**2, "even"),
    Primitive("pow3", 3, lambda u: u**3, "odd"),
    Primitive("pow4", 4, lambda u: u**4, "even"),
    Primitive("pow5", 5, lambda u: u**5, "odd"),
    Primitive("inv", 6, lambda u: 1.0 / u, "odd", "nonzero"),
    Primitive("inv2", 7, lambda u: 1.0 / u**2, "even", "nonzero"),
    Primitive("sqrt", 8, np.sqrt, domain="nonneg"),
    Primitive("exp", 9, np.exp),
    Primitive("log", 10, np.log, domain="positive"),
    Primitive("abs", 11, np.abs, "even"),
    Primitive("sign", 12, _sign, "odd"),
    Primitive("sin", 13, np.sin, "odd", period=2 * math.pi),
    Primitive("cos", 14, np.cos, "even", period=2 * math.pi),
    Primitive("tan", 15, np.tan, "odd", period=math.pi),
    Primitive("tanh", 16, np.tanh, "odd"),
    Primitive("asin", 17, np.arcsin, "odd", "unit"),
    Primitive("acos", 18, np.arccos, "acos", "unit"),
    Primitive("atan", 19, np.arctan, "odd"),
    Primitive("atanh", 20, np.arctanh, "odd", "open_unit"),
    Primitive("gaussian", 21, lambda u: np.exp(-(u**2)), "even"),
)
PRIMITIVES = {p.name: p for p in LIBRARY}
CONSTANT, IDENTITY = LIBRARY[0], LIBRARY[1]


# -- edge fitting ---------------------------------------------------------


@dataclass
class SymbolicEdge:
    primitive: str
    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    fit_r2: float = 1.0

    def __call__(self, x, counter: list | None = None):
        x = np.asarray(x, dtype=float)
        if self.primitive == "0":
            return np.full(x.shape, self.d)
        prim = PRIMITIVES[self.primitive]
        u, n = prim.clamp(self.a * x + self.b)
        if counter is not None:
            counter[0] += n
        return self.c * prim(u) + self.d


def _affine_r2(F: np.ndarray, y: np.ndarray, valid: np.ndarray):
    """R2 of the least-squares fit y ~ c F + d along the last axis."""
    n = F.shape[-1]
    Fm = F.mean(axis=-1, keepdims=True)
    Fc = F - Fm
    yc = y - y.mean()
    sff = np.sum(Fc * Fc, axis=-1)
    sfy = np.sum(Fc * yc, axis=-1)
    syy = float(np.sum(yc * yc))
    spread_ok = sff >= n * (MIN_RELATIVE_SPREAD * Fm[..., 0]) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sff > 1e-300 * n, sfy**2 / (sff * syy), 0.0)
    r2 = np.where(valid & spread_ok & np.isfinite(r2), np.minimum(r2, 1.0), -np.inf)
    return r2


def _fit_cd(F: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    Fm, ym = F.mean(), y.mean()
    sff = np.sum((F - Fm) ** 2)
    c = float(np.sum((F - Fm) * (y - ym)) / sff) if sff > 0 else 0.0
    d = float(ym - c * Fm)
    ss_tot = np.sum((y - ym) ** 2)
    resid = y - (c * F + d)
    r2 = 1.0 - float(np.sum(resid**2) / ss_tot)
    return c, d, r2


def _canonical(prim: Primitive, a, b, c, d):
    """Fold sign and period symmetries so that a > 0 and the phase is minimal."""
    if a < 0:
        if prim.parity == "even":
            a, b = -a, -b
        elif prim.parity == "odd":
            a, b, c = -a, -b, -c
        elif prim.parity == "acos":  # acos(-u) = pi - acos(u)
            a, b, d, c = -a, -b, d + c * math.pi, -c
    if prim.period is not None:
        half = prim.period / 2
        b = b - prim.period * math.floor((b + half) / prim.period)
    return a, b, c, d


def _fit_primitive(prim: Primitive, xs: np.ndarray, ys: np.ndarray) -> SymbolicEdge:
    if prim.name == "0":
        return SymbolicEdge("0", 0.0, 0.0, 0.0, float(ys.mean()), 0.0)
    if prim.name == "x":
        c, d, r2 = _fit_cd(xs, ys)
        return SymbolicEdge("x", 1.0, 0.0, c, d, r2)
    U = AB_GRID[:, None, None] * xs[None, None, :] + AB_GRID[None, :, None]
    F = prim(U)
    valid = np.all(prim.valid(U) & np.isfinite(F), axis=-1) & (AB_GRID[:, None] != 0)
    r2 = _affine_r2(np.where(np.isfinite(F), F, 0.0), ys, valid)
    best = np.unravel_index(int(np.argmax(r2)), r2.shape)
    if not np.isfinite(r2[best]):
        return SymbolicEdge(prim.name, 1.0, 0.0, 0.0, float(ys.mean()), -math.inf)
    start = np.array([AB_GRID[best[0]], AB_GRID[best[1]]])

    yc = ys - ys.mean()
    syy = float(yc @ yc)

    def loss(p):
        if p[0] == 0:
            return 1e3
        u = p[0] * xs + p[1]
        f = prim(u)
        if prim.domain is not None and not np.all(prim.valid(u)):
            return 1e3
        fm = f.mean()
        fc = f - fm
        sff = float(fc @ fc)
        if not np.isfinite(sff) or sff < f.size * (MIN_RELATIVE_SPREAD * fm) ** 2:
            return 1e3
        if sff <= 1e-300 * f.size:
            return 0.0
        return -min((fc @ yc) ** 2 / (sff * syy), 1.0)

    res = minimize(loss, start, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 600})
    ab = res.x if res.fun <= loss(start) else start
    a, b = float(ab[0]), float(ab[1])
    c, d, r2v = _fit_cd(prim(a * xs + b), ys)
    a, b, c, d = _canonical(prim, a, b, c, d)
    # refit c, d after canonicalisation so rounding of the phase cannot leak in
    c, d, r2v = _fit_cd(prim(a * xs + b), ys)
    return SymbolicEdge(prim.name, a, b, c, d, r2v)


def fit_library(xs, ys, library=LIBRARY) -> list[SymbolicEdge]:
    """Best affine fit of every primitive to the samples."""
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if np.ptp(ys) == 0:
        # a constant target is fit exactly by any primitive with c = 0
        return [SymbolicEdge(p.name, 1.0, 0.0, 0.0, float(ys[0]), 1.0) for p in library]
    return [_fit_primitive(p, xs, ys) for p in library]


def select_fit(fits: list[SymbolicEdge], simplicity: float = 0.0, library=LIBRARY) -> SymbolicEdge:
    ranks = {p.name: p.rank for p in library}
    n = len(library)
    scored = [((1 - simplicity) * f.fit_r2 - simplicity * ranks[f.primitive] / n, f) for f in fits
              if np.isfinite(f.fit_r2)]
    if not scored or max(f.fit_r2 for _, f in scored) < FAIL_R2:
        mean = float(np.mean([f.d for f in fits])) if fits else 0.0
        return SymbolicEdge("0", 0.0, 0.0, 0.0, mean, 0.0)
    top = max(s for s, _ in scored)
    tied = [f for s, f in scored if s >= top - TIE_TOL]
    chosen = min(tied, key=lambda f: ranks[f.primitive])
    if chosen.primitive == "0" or chosen.c == 0.0 and chosen.fit_r2 == 1.0:
        return SymbolicEdge("0", 0.0, 0.0, 0.0, chosen.d, chosen.fit_r2)
    return chosen


def fit_points(xs, max_points: int = MAX_FIT_POINTS) -> np.ndarray:
    """Sorted, evenly spaced order statistics of ``xs`` (all of them when few)."""
    xs = np.sort(np.asarray(xs, dtype=float).ravel())
    if xs.size <= max_points:
        return xs
    return xs[np.round(np.linspace(0, xs.size - 1, max_points)).astype(int)]


def snap_edge(edge: KanEdge, xs, library=LIBRARY, simplicity: float = 0.0) -> SymbolicEdge:
    if not 0.0 <= simplicity <= 1.0:
        raise ValueError("simplicity weight must lie in [0, 1]")
    xs = fit_points(xs)
    if xs.size < 10:
        raise ValueError(f"need at least 10 sample points to snap an edge, got {xs.size}")
    ys = edge(xs)
    return select_fit(fit_library(xs, ys, library), simplicity, library)


# -- expression trees -----------------------------------------------------


@dataclass
class Const:
    value: float


@dataclass
class Var:
    name: str
    index: int


@dataclass
class Scale:
    coef: float
    child: object


@dataclass
class Call:
    prim: str
    child: object


@dataclass
class Sum:
    terms: list


def edge_expression(edge: SymbolicEdge, arg) -> list:
    """Terms contributed by one snapped edge applied to ``arg``."""
    if edge.primitive == "0":
        return [Const(edge.d)]
    if edge.primitive == "x":
        inner = arg
    else:
        inner = Call(edge.primitive, Sum([Scale(edge.a, arg), Const(edge.b)]))
    return [Scale(edge.c, inner), Const(edge.d)]


def evaluate(node, X: np.ndarray, counter: list | None = None) -> np.ndarray:
    if isinstance(node, Const):
        return np.full(X.shape[0], node.value)
    if isinstance(node, Var):
        return X[:, node.index]
    if isinstance(node, Scale):
        return node.coef * evaluate(node.child, X, counter)
    if isinstance(node, Call):
        prim = PRIMITIVES[node.prim]
        u, n = prim.clamp(evaluate(node.child, X, counter))
        if counter is not None:
            counter[0] += n
        return prim(u)
    if isinstance(node, Sum):
        total = np.zeros(X.shape[0])
        for t in node.terms:
            total = total + evaluate(t, X, counter)
        return total
    raise TypeError(f"unknown expression node {node!r}")


def variables(node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, (Scale, Call)):
        return variables(node.child)
    if isinstance(node, Sum):
        out = set()
        for t in node.terms:
            out |= variables(t)
        return out
    return set()


@dataclass
class SymbolicExpression:
    output: str
    tree: object
    input_names: list[str]

    def variables(self) -> set[str]:
        return variables(self.tree)


def eval_expression(expr: SymbolicExpression, X, return_clamps: bool = False):
    """Evaluate with domain clamping; optionally also return the clamp count."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    counter = [0]
    out = evaluate(expr.tree, X, counter)
    return (out, counter[0]) if return_clamps else out


# -- serialisation --------------------------------------------------------


def format_number(v: float, decimals: int = DISPLAY_DECIMALS) -> str:
    text = f"{v:.{decimals}f}"
    if float(text) == 0.0:
        text = f"{0.0:.{decimals}f}"
    return text


def _to_text(node, top: bool = False) -> str:
    if isinstance(node, Const):
        return format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.prim}({_to_text(node.child, top=True)})"
    if isinstance(node, Scale):
        child = node.child
        inner = _to_text(child)
        if isinstance(child, (Sum, Scale)):
            inner = f"({_to_text(child, top=True)})"
        return f"{format_number(node.coef)}{MUL}{inner}"
    if isinstance(node, Sum):
        body = " + ".join(_to_text(t) for t in node.terms) if node.terms else format_number(0.0)
        return body if top else f"({body})"
    raise TypeError(f"unknown expression node {node!r}")


def serialize_expression(expr: SymbolicExpression) -> str:
    return f"{expr.output} = {_to_text(expr.tree, top=True)}"


_TOKEN = re.compile(rf"\s*(?:(?P<num>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[()+{MUL}=]))")


def _tokenize(text: str) -> list[tuple[str, str]]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens, names):
        self.tokens, self.pos, self.names = tokens, 0, names

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            raise ValueError(f"expected {value!r}, found {tok[1]!r}")
        self.pos += 1
        return tok

    def sum(self):
        terms = [self.term()]
        while self.peek()[1] == "+":
            self.take("+")
            terms.append(self.term())
        return terms

    def term(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            if self.peek()[1] == MUL:
                self.take(MUL)
                return Scale(float(val), self.atom())
            return Const(float(val))
        return self.atom()

    def atom(self):
        kind, val = self.take()
        if val == "(":
            terms = self.sum()
            self.take(")")
            return Sum(terms)
        if kind == "name":
            if val in PRIMITIVES and self.peek()[1] == "(":
                self.take("(")
                terms = self.sum()
                self.take(")")
                return Call(val, Sum(terms) if len(terms) > 1 else terms[0])
            if val not in self.names:
                raise ValueError(f"unknown variable {val!r}")
            return Var(val, self.names.index(val))
        raise ValueError(f"unexpected token {val!r}")


def parse_expression(text: str, input_names) -> SymbolicExpression:
    tokens = _tokenize(text)
    if len(tokens) < 3 or tokens[0][0] != "name" or tokens[1][1] != "=":
        raise ValueError("expected '<output> = <expression>'")
    p = _Parser(tokens[2:], list(input_names))
    terms = p.sum()
    if p.pos != len(p.tokens):
        raise ValueError(f"trailing input after position {p.pos}")
    tree = terms[0] if len(terms) == 1 else Sum(terms)
    return SymbolicExpression(tokens[0][1], tree, list(input_names))


# -- networks -------------------------------------------------------------


@dataclass
class SymbolicModel:
    """Snapped copy of a KAN: per-layer edge grids plus one expression per output."""

    layers: list[list[list[SymbolicEdge | None]]]  # [layer][out][in]
    input_names: list[str]
    output_names: list[str]
    expressions: list[SymbolicExpression] = field(default_factory=list)
    r2: list[float] = field(default_factory=list)

    def forward_network(self, X, counter: list | None = None) -> np.ndarray:
        """Edge-by-edge evaluation of the snapped network."""
        x = np.asarray(X, dtype=float)
        for layer in self.layers:
            out = np.zeros((x.shape[0], len(layer)))
            for j, row in enumerate(layer):
                for i, edge in enumerate(row):
                    if edge is not None:
                        out[:, j] = out[:, j] + edge(x[:, i], counter)
            x = out
        return x

    def predict(self, X, return_clamps: bool = False):
        X = np.asarray(X, dtype=float)
        counter = [0]
        cols = [evaluate(e.tree, X, counter) for e in self.expressions]
        out = np.column_stack(cols) if cols else np.zeros((X.shape[0], 0))
        return (out, counter[0]) if return_clamps else out

    def to_text(self) -> str:
        blocks = []
        for e in self.expressions:
            blocks.append(f"# output: {e.output}\n{serialize_expression(e)}\n")
        return "\n".join(blocks)

    def write_equations(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    def to_dict(self) -> dict:
        return {
            "input_names": self.input_names,
            "output_names": self.output_names,
            "r2": self.r2,
            "layers": [[[None if e is None else vars(e) for e in row] for row in layer] for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicModel":
        layers = [[[None if e is None else SymbolicEdge(**e) for e in row] for row in layer] for layer in d["layers"]]
        model = cls(layers, d["input_names"], d["output_names"], r2=d.get("r2", []))
        model.expressions = build_expressions(layers, model.input_names, model.output_names)
        return model


def build_expressions(layers, input_names, output_names) -> list[SymbolicExpression]:
    nodes: list = [Var(name, i) for i, name in enumerate(input_names)]
    for layer in layers:
        nxt = []
        for row in layer:
            terms = []
            for i, edge in enumerate(row):
                if edge is not None:
                    terms += edge_expression(edge, nodes[i])
            nxt.append(Sum(terms))
        nodes = nxt
    return [SymbolicExpression(name, node, list(input_names)) for name, node in zip(output_names, nodes)]


def default_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


def snap_network(net: KanNetwork, X_train, simplicity: float = 0.0, input_names=None, output_names=None,
                 X_test=None, Y_test=None, library=LIBRARY) -> SymbolicModel:
    """Snap every live edge of a copy of ``net``; the spline network is left untouched."""
    X_train = np.asarray(X_train, dtype=float)
    if X_train.shape[0] == 0:
        raise ValueError("snapping needs training inputs")
    work = net.copy()
    forward(work, X_train)
    input_names = list(input_names) if input_names else default_names("x", work.width[0])
    if output_names is None:
        output_names = ["y"] if work.width[-1] == 1 else default_names("y", work.width[-1])
    layers = []
    for layer, cache in zip(work.layers, work.cache):
        rows = []
        for j in range(layer.n_out):
            row = []
            for i in range(layer.n_in):
                if not layer.mask[j, i]:
                    row.append(None)
                    continue
                row.append(snap_edge(layer.edge(j, i), cache["x"][:, i], library, simplicity))
            rows.append(row)
        layers.append(rows)
    model = SymbolicModel(layers, input_names, list(output_names))
    model.expressions = build_expressions(layers, input_names, model.output_names)
    if X_test is not None and Y_test is not None:
        Y_test = np.asarray(Y_test, dtype=float).reshape(len(Y_test), -1)
        pred = model.predict(X_test)
        model.r2 = [r2_score(Y_test[:, j], pred[:, j]) for j in range(Y_test.shape[1])]
    return model
