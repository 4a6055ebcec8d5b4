"""Kolmogorov-Arnold network: layers of spline edges with a SiLU residual.

Each edge computes ``w_b * silu(x) + w_s * spline(x)`` and every node sums its
incoming edges. Parameters of one layer are stored as dense arrays indexed
``[out, in]`` so the whole network evaluates with a handful of einsums.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .bspline import SplineBasis, SplineCurve, basis_deriv_matrix, basis_matrix

SCORE_KINDS = ("EFSN", "EFS", "EFSU", "EB", "NB")
STD_FLOOR = 1e-12
ENTROPY_EPS = 1e-12
SHARE_EPS = 1e-12
# first layer sees min-max scaled inputs; deeper layers see sums of edge outputs
INPUT_DOMAIN = (0.0, 1.0)
HIDDEN_DOMAIN = (-1.0, 1.0)


def silu(x):
    return x * expit(x)


def silu_deriv(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class KanEdge:
    spline: SplineCurve
    w_b: float
    w_s: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        B = basis_matrix(self.spline.basis, x.ravel())
        out = self.w_b * silu(x.ravel()) + self.w_s * (B @ self.spline.coefficients)
        return out.reshape(x.shape)


@dataclass
class KanLayer:
    basis: SplineBasis
    coef: np.ndarray  # (n_out, n_in, n_basis)
    w_base: np.ndarray  # (n_out, n_in)
    w_spline: np.ndarray  # (n_out, n_in)
    mask: np.ndarray = None  # 1 = live edge, 0 = pruned

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.w_base.shape)

    @property
    def n_in(self) -> int:
        return self.coef.shape[1]

    @property
    def n_out(self) -> int:
        return self.coef.shape[0]

    def edge(self, j: int, i: int) -> KanEdge:
        m = self.mask[j, i]
        return KanEdge(SplineCurve(self.basis, self.coef[j, i] * m), self.w_base[j, i] * m, self.w_spline[j, i] * m)

    def copy(self) -> "KanLayer":
        return KanLayer(self.basis, self.coef.copy(), self.w_base.copy(), self.w_spline.copy(), self.mask.copy())


@dataclass
class KanNetwork:
    layers: list[KanLayer]
    seed: int = 0
    cache: list | None = field(default=None, repr=False, compare=False)

    @property
    def width(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.layers) - 1

    @property
    def grid(self) -> int:
        return self.layers[0].basis.grid_count

    @property
    def order(self) -> int:
        return self.layers[0].basis.order

    @property
    def n_params(self) -> int:
        return sum(layer.coef.size + 2 * layer.w_base.size for layer in self.layers)

    def copy(self) -> "KanNetwork":
        return KanNetwork([layer.copy() for layer in self.layers], self.seed)

    def get_params(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts += [layer.coef.ravel(), layer.w_base.ravel(), layer.w_spline.ravel()]
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        pos = 0
        for layer in self.layers:
            for name in ("coef", "w_base", "w_spline"):
                arr = getattr(layer, name)
                arr[...] = theta[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size
        self.cache = None

    def param_mask(self) -> np.ndarray:
        """1 for trainable entries of the flat parameter vector, 0 for pruned edges."""
        parts = []
        for layer in self.layers:
            m = layer.mask
            parts += [np.repeat(m[:, :, None], layer.coef.shape[2], axis=2).ravel(), m.ravel(), m.ravel()]
        return np.concatenate(parts)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            edges = []
            for j in range(layer.n_out):
                for i in range(layer.n_in):
                    edges.append({
                        "out": j,
                        "in": i,
                        "coefficients": layer.coef[j, i].tolist(),
                        "w_b": float(layer.w_base[j, i]),
                        "w_s": float(layer.w_spline[j, i]),
                        "active": bool(layer.mask[j, i]),
                    })
            layers.append({"domain": [layer.basis.lo, layer.basis.hi], "edges": edges})
        return {"width": self.width, "G": self.grid, "k": self.order, "seed": self.seed, "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "KanNetwork":
        width, G, k = data["width"], int(data["G"]), int(data["k"])
        layers = []
        for l, spec in enumerate(data["layers"]):
            n_in, n_out = width[l], width[l + 1]
            basis = SplineBasis(k, G, *spec["domain"])
            layer = KanLayer(basis, np.zeros((n_out, n_in, basis.n_basis)), np.zeros((n_out, n_in)), np.zeros((n_out, n_in)))
            for e in spec["edges"]:
                j, i = e["out"], e["in"]
                layer.coef[j, i] = e["coefficients"]
                layer.w_base[j, i] = e["w_b"]
                layer.w_spline[j, i] = e["w_s"]
                layer.mask[j, i] = 1.0 if e.get("active", True) else 0.0
            layers.append(layer)
        return cls(layers, int(data.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "KanNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_network(width, basis_spec=(5, 3), seed: int = 0, domains=None) -> KanNetwork:
    """Random network with coefficients ~ N(0, 0.1 / sqrt(G + k)) and unit edge weights."""
    width = [int(w) for w in width]
    if len(width) < 2 or min(width) < 1:
        raise ValueError(f"width needs >= 2 entries, all >= 1; got {width}")
    G, k = basis_spec
    if domains is None:
        domains = [INPUT_DOMAIN] + [HIDDEN_DOMAIN] * (len(width) - 2)
    if len(domains) != len(width) - 1:
        raise ValueError("need one spline domain per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(len(width) - 1):
        basis = SplineBasis(k, G, *domains[l])
        n_in, n_out = width[l], width[l + 1]
        coef = rng.normal(0.0, 0.1 / np.sqrt(G + k), size=(n_out, n_in, basis.n_basis))
        layers.append(KanLayer(basis, coef, np.ones((n_out, n_in)), np.ones((n_out, n_in))))
    return KanNetwork(layers, seed)


def fit_domains(net: KanNetwork, X, margin: float = 0.1) -> KanNetwork:
    """Set each hidden layer's spline domain to the range its inputs take on ``X``.

    The first layer keeps its domain. Each range is widened by ``margin`` times
    its width on both sides. Coefficients are kept, so this is meant to run once,
    straight after initialisation.
    """
    x = _check_input(net, X)
    for l, layer in enumerate(net.layers):
        if l > 0:
            lo, hi = float(x.min()), float(x.max())
            pad = margin * max(hi - lo, 1e-6)
            layer.basis = SplineBasis(layer.basis.order, layer.basis.grid_count, lo - pad, hi + pad)
        x = _layer_forward(layer, x, False)["post"].sum(axis=2)
    net.cache = None
    return net


def _check_input(net: KanNetwork, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != net.width[0]:
        raise ValueError(f"expected input with {net.width[0]} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return X


def _layer_forward(layer: KanLayer, x: np.ndarray, need_deriv: bool) -> dict:
    n, n_in = x.shape
    flat = x.T.ravel()  # grouped by input feature
    B = basis_matrix(layer.basis, flat).reshape(n_in, n, -1).transpose(1, 0, 2)
    spl = np.einsum("nib,jib->nji", B, layer.coef)
    sx = silu(x)
    post = layer.mask * (layer.w_base * sx[:, None, :] + layer.w_spline * spl)
    c = {"x": x, "B": B, "spline": spl, "silu": sx, "post": post}
    if need_deriv:
        dB = basis_deriv_matrix(layer.basis, flat).reshape(n_in, n, -1).transpose(1, 0, 2)
        c["dspline"] = np.einsum("nib,jib->nji", dB, layer.coef)
        c["dsilu"] = silu_deriv(x)
    return c


def forward(net: KanNetwork, X, *, need_deriv: bool = False) -> np.ndarray:
    """Evaluate the network row-wise; per-layer activations land in ``net.cache``."""
    x = _check_input(net, X)
    cache = []
    for layer in net.layers:
        c = _layer_forward(layer, x, need_deriv)
        cache.append(c)
        x = c["post"].sum(axis=2)
    net.cache = cache
    return x


# -- edge scores ----------------------------------------------------------


@dataclass
class EdgeScores:
    scores: list[np.ndarray]
    metric_kind: str


def _std_forward(v: np.ndarray) -> np.ndarray:
    # shifting by the first row makes identical rows give exactly zero
    return (v - v[:1]).std(axis=0)


def _std_backward(v: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d std / d v_n = (v_n - mean) / (N * std); zero where std vanishes
    n = v.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(s > 0, g / (n * s), 0.0)
    return (v - v.mean(axis=0)) * scale


def _magnitudes(cache, kind):
    """Per-layer edge magnitudes and the pieces needed to differentiate them."""
    mags, aux = [], []
    for c in cache:
        post_std = _std_forward(c["post"])
        if kind in ("EFSN", "EFS"):
            in_std = _std_forward(c["x"])
            floored = np.maximum(in_std, STD_FLOOR)
            mags.append(post_std / floored)
            aux.append((post_std, in_std, floored))
        else:
            mags.append(post_std)
            aux.append((post_std, None, None))
    return mags, aux


def _attribution(mags):
    """Backward attribution from unit output scores through L1-normalised edges."""
    L = len(mags)
    nodes = [None] * (L + 1)
    nodes[L] = np.ones(mags[-1].shape[0])
    shares, edges, totals = [None] * L, [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        totals[l] = mags[l].sum(axis=1, keepdims=True) + SHARE_EPS
        shares[l] = mags[l] / totals[l]
        edges[l] = nodes[l + 1][:, None] * shares[l]
        nodes[l] = edges[l].sum(axis=0)
    return nodes, edges, shares, totals


def _scores_from_mags(mags, kind):
    if kind in ("EFSN", "EFS", "EFSU"):
        return [m.copy() for m in mags], None
    nodes, edges, shares, totals = _attribution(mags)
    if kind == "EB":
        return [e.copy() for e in edges], (nodes, shares, totals)
    out = [np.broadcast_to(nodes[l][None, :], mags[l].shape).copy() for l in range(len(mags))]
    return out, (nodes, shares, totals)


def _scores_backward(mags, kind, extra, gscores):
    """Map d(R)/d(scores) to d(R)/d(magnitudes)."""
    if kind in ("EFSN", "EFS", "EFSU"):
        return gscores
    nodes, shares, totals = extra
    L = len(mags)
    gnode = [np.zeros_like(n) for n in nodes]
    gedge = [np.zeros_like(m) for m in mags]
    if kind == "NB":
        for l in range(L):
            gnode[l] += gscores[l].sum(axis=0)
    else:
        for l in range(L):
            gedge[l] += gscores[l]
    gmags = []
    for l in range(L):
        gedge[l] = gedge[l] + gnode[l][None, :]
        gnode[l + 1] += (gedge[l] * shares[l]).sum(axis=1)
        gshare = gedge[l] * nodes[l + 1][:, None]
        t = totals[l]
        gm = gshare / t - (gshare * mags[l]).sum(axis=1, keepdims=True) / t**2
        gmags.append(gm)
    return gmags


def _scores_on_cache(cache, kind):
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}; expected one of {SCORE_KINDS}")
    mags, _ = _magnitudes(cache, kind)
    scores, _ = _scores_from_mags(mags, kind)
    return scores


def edge_scores(net: KanNetwork, X, metric_kind: str = "EFSU") -> EdgeScores:
    X = np.asarray(X, dtype=float)
    if X.size == 0 or X.shape[0] == 0:
        raise ValueError("edge scores need a non-empty batch")
    forward(net, X)
    return EdgeScores(_scores_on_cache(net.cache, metric_kind), metric_kind)


# -- loss and gradient ----------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    lam: float = 0.0
    lam_entropy: float = 0.0
    reg_metric: str = "EFSU"


def _entropy_terms(scores):
    """Sum of scores and entropy of the per-layer normalised scores."""
    l1, ent = 0.0, 0.0
    for s in scores:
        total = s.sum() + SHARE_EPS
        p = s / total
        l1 += s.sum()
        ent += -np.sum(p * np.log(p + ENTROPY_EPS))
    return l1, ent


def _regularizer(cache, spec: LossSpec, with_grad: bool):
    kind = spec.reg_metric
    mags, aux = _magnitudes(cache, kind)
    scores, extra = _scores_from_mags(mags, kind)
    l1, ent = _entropy_terms(scores)
    value = l1 + spec.lam_entropy * ent
    if not with_grad:
        return value, None
    gscores = []
    for s in scores:
        total = s.sum() + SHARE_EPS
        p = s / total
        dH_dp = -(np.log(p + ENTROPY_EPS) + p / (p + ENTROPY_EPS))
        dH_ds = dH_dp / total - np.sum(dH_dp * s) / total**2
        gscores.append(1.0 + spec.lam_entropy * dH_ds)
    gmags = _scores_backward(mags, kind, extra, gscores)
    grads = []
    for c, gm, (post_std, in_std, floored) in zip(cache, gmags, aux):
        if in_std is None:
            gpost = _std_backward(c["post"], post_std, gm)
            gx = None
        else:
            gpost = _std_backward(c["post"], post_std, gm / floored)
            g_in_std = -(gm * post_std / floored**2).sum(axis=0)
            g_in_std = np.where(in_std > STD_FLOOR, g_in_std, 0.0)
            gx = _std_backward(c["x"], in_std, g_in_std)
        grads.append((gpost, gx))
    return value, grads


def loss_and_gradient(net: KanNetwork, X, Y, spec: LossSpec = LossSpec(), with_grad: bool = True):
    """Total loss ``MSE + lam * (sum(scores) + lam_entropy * entropy)`` and its gradient."""
    Y = np.asarray(Y, dtype=float)
    pred = forward(net, X, need_deriv=with_grad)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != pred.shape:
        raise ValueError(f"target shape {Y.shape} does not match output shape {pred.shape}")
    resid = pred - Y
    loss = float(np.mean(resid**2))
    reg_grads = None
    if spec.lam > 0:
        reg, reg_grads = _regularizer(net.cache, spec, with_grad)
        loss += spec.lam * reg
    if not with_grad:
        return loss, None

    g_y = 2.0 * resid / resid.size
    parts = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        layer, c = net.layers[l], net.cache[l]
        gpost = np.broadcast_to(g_y[:, :, None], c["post"].shape).copy()
        if reg_grads is not None:
            gpost += spec.lam * reg_grads[l][0]
        gpost *= layer.mask
        g_coef = np.einsum("nji,nib->jib", gpost * layer.w_spline, c["B"])
        g_wb = np.einsum("nji,ni->ji", gpost, c["silu"])
        g_ws = np.einsum("nji,nji->ji", gpost, c["spline"])
        parts[l] = (g_coef, g_wb, g_ws)
        if l > 0:
            dphi = layer.w_base * c["dsilu"][:, None, :] + layer.w_spline * c["dspline"]
            g_y = np.einsum("nji,nji->ni", gpost, dphi)
            if reg_grads is not None and reg_grads[l][1] is not None:
                g_y = g_y + spec.lam * reg_grads[l][1]
    flat = []
    for g_coef, g_wb, g_ws in parts:
        flat += [g_coef.ravel(), g_wb.ravel(), g_ws.ravel()]
    return loss, np.concatenate(flat)


def gradient(net: KanNetwork, X, Y, loss_spec: LossSpec = LossSpec()) -> np.ndarray:
    return loss_and_gradient(net, X, Y, loss_spec)[1]
