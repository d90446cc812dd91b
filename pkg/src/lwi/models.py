"""Forecasting models: OLS core, AR(p) and HAR designs, boosted regression trees.

The tree booster is a small histogram-based implementation. Split search
uses gradient/hessian sums (variance reduction for squared error); leaf
values are then set on all training rows routed to the leaf by the exact
one-dimensional minimiser of the loss (mean, Huber location, tau-quantile).
Fitting the leaf on all rows rather than the subsample keeps the training
loss non-increasing from one tree to the next.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .features import forward_mean, rolling_stats

logger = logging.getLogger(__name__)

MODEL_FORMAT = 1
COND_LIMIT = 1e10
RIDGE_JITTER = 1e-10
HESSIAN_FLOOR = 1e-6


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# linear models

@dataclass
class LinearFit:
    names: List[str]          # "intercept" first
    beta: np.ndarray
    n_train: int
    condition_warning: bool = False
    train_loss: float = float("nan")   # in-sample mean squared error

    @property
    def coefficients(self) -> Dict[str, float]:
        return dict(zip(self.names, self.beta.tolist()))

    @property
    def feature_names(self) -> List[str]:
        return self.names[1:]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_X(X, len(self.names) - 1)
        return self.beta[0] + X @ self.beta[1:]

    def to_dict(self) -> dict:
        return {"model_format": MODEL_FORMAT, "type": "linear",
                "coefficients": self.coefficients, "n_train": self.n_train,
                "condition_warning": self.condition_warning,
                "train_loss": self.train_loss}


def ols_fit(X: np.ndarray, y: np.ndarray, names: Optional[Sequence[str]] = None) -> LinearFit:
    """Least squares with an intercept.

    Solved by QR. When ``[1 X]`` is numerically rank deficient (condition
    number above 1e10) the normal equations are solved with a relative
    ridge jitter of 1e-10 instead and ``condition_warning`` is set.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise ModelError("X and y row counts differ")
    if n < p + 1:
        raise ModelError(f"need at least {p + 1} rows for {p} features, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ModelError("non-finite values in X or y")
    if names is None:
        names = [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ModelError("names length does not match X columns")
    A = np.column_stack([np.ones(n), X])
    Q, R = np.linalg.qr(A)
    sv = np.linalg.svd(R, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    warn = not np.isfinite(cond) or cond > COND_LIMIT
    if warn:
        G = A.T @ A
        jitter = RIDGE_JITTER * max(np.trace(G) / G.shape[0], 1e-300)
        beta = np.linalg.solve(G + jitter * np.eye(p + 1), A.T @ y)
        logger.debug("ill-conditioned design (cond=%.3g); ridge jitter applied", cond)
    else:
        beta = solve_triangular(R, Q.T @ y)
    resid = y - A @ beta
    return LinearFit(["intercept", *names], beta, n, bool(warn), float(np.mean(resid ** 2)))


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    rows: np.ndarray      # original row index of each design row
    names: List[str]

    def __iter__(self):
        return iter((self.X, self.y))


def ar_columns(lwi: np.ndarray, p: int = 5) -> Tuple[np.ndarray, List[str]]:
    """Full-length AR regressors ``LWI_t .. LWI_{t-p+1}`` (NaN where unavailable)."""
    if p < 1:
        raise ModelError("p must be >= 1")
    lwi = np.asarray(lwi, dtype=float)
    cols = []
    for j in range(p):
        c = np.full(len(lwi), np.nan)
        if j < len(lwi):
            c[j:] = lwi[:len(lwi) - j]
        cols.append(c)
    names = ["LWI_t"] + [f"LWI_t-{j}" for j in range(1, p)]
    return np.column_stack(cols), names


def har_columns(lwi: np.ndarray, windows: Sequence[int] = (1, 8, 40)) -> Tuple[np.ndarray, List[str]]:
    """Full-length HAR regressors: trailing means of LWI ending at t."""
    windows = [int(w) for w in windows]
    if not windows or any(w < 1 for w in windows) or any(b <= a for a, b in zip(windows, windows[1:])):
        raise ModelError("HAR windows must be strictly increasing positive integers")
    cols = [rolling_stats(lwi, w, "mean") for w in windows]
    return np.column_stack(cols), [f"LWI_mean{w}" for w in windows]


def _design(cols: np.ndarray, names: List[str], lwi: np.ndarray, k: int) -> Design:
    y = forward_mean(np.asarray(lwi, dtype=float), k)
    ok = np.all(np.isfinite(cols), axis=1) & np.isfinite(y)
    rows = np.flatnonzero(ok)
    if len(rows) == 0:
        raise ModelError("empty design after dropping missing rows")
    return Design(cols[rows], y[rows], rows, names)


def ar_design(lwi: np.ndarray, p: int = 5, k: int = 1) -> Design:
    """AR(p) regressors at t against the mean LWI over ``t+1 .. t+k``."""
    cols, names = ar_columns(lwi, p)
    return _design(cols, names, lwi, k)


def har_design(lwi: np.ndarray, windows: Sequence[int] = (1, 8, 40), k: int = 1) -> Design:
    cols, names = har_columns(lwi, windows)
    return _design(cols, names, lwi, k)


# ---------------------------------------------------------------------------
# boosted trees

LOSSES = ("squared", "huber", "quantile")


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.05
    subsample: float = 0.8
    min_leaf: int = 20
    n_bins: int = 64
    loss: str = "squared"
    huber_delta: float = 1.0
    quantile: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1:
            raise ModelError("n_trees >= 0, max_depth >= 1, min_leaf >= 1 required")
        if not 0 < self.learning_rate <= 1:
            raise ModelError("learning_rate must be in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ModelError("subsample must be in (0, 1]")
        if not 2 <= self.n_bins <= 65536:
            raise ModelError("n_bins must be in [2, 65536]")
        if self.loss not in LOSSES:
            raise ModelError(f"loss must be one of {LOSSES}")
        if self.huber_delta <= 0:
            raise ModelError("huber_delta must be > 0")
        if not 0 < self.quantile < 1:
            raise ModelError("quantile must be in (0, 1)")


def loss_value(loss: str, y: np.ndarray, pred: np.ndarray, delta: float = 1.0,
               tau: float = 0.5) -> float:
    r = y - pred
    if loss == "squared":
        return float(np.mean(r * r))
    if loss == "huber":
        a = np.abs(r)
        return float(np.mean(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))))
    return float(np.mean(np.maximum(tau * r, (tau - 1) * r)))


def _grad_hess(loss: str, y, pred, delta, tau):
    r = pred - y
    if loss == "squared":
        return r, np.ones_like(r)
    if loss == "huber":
        g = np.clip(r, -delta, delta)
        h = np.where(np.abs(r) <= delta, 1.0, HESSIAN_FLOOR)
        return g, h
    # pinball: unit curvature for split search, quantile refit in the leaf
    g = np.where(y < pred, 1.0 - tau, -tau)
    return g, np.ones_like(r)


def _leaf_value(loss: str, r: np.ndarray, delta: float, tau: float) -> float:
    """Minimiser of the loss over a constant shift of residuals ``r``."""
    if loss == "squared":
        return float(np.mean(r))
    if loss == "quantile":
        return float(np.quantile(r, tau, method="inverted_cdf"))
    # Huber location by majorise-minimise steps from 0; each step lowers the loss
    v = 0.0
    for _ in range(100):
        step = float(np.mean(np.clip(r - v, -delta, delta)))
        v += step
        if abs(step) <= 1e-13 * (1.0 + abs(v)):
            break
    return v


@dataclass
class Tree:
    feature: np.ndarray     # -1 for leaves
    threshold: np.ndarray   # go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        return _route(np.ascontiguousarray(X, dtype=float), self.feature, self.threshold,
                      self.left, self.right)

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if len(depth) else 0

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(),
                "threshold": [None if not np.isfinite(t) else float(t) for t in self.threshold],
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64),
                   np.array([np.nan if t is None else t for t in d["threshold"]], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=float))


@dataclass
class GbtModel:
    trees: List[Tree]
    learning_rate: float
    base_score: float
    params: GbtParams
    feature_names: List[str]
    train_loss: List[float] = field(default_factory=list)
    importance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def loss(self) -> str:
        return self.params.loss

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_X(X, len(self.feature_names))
        pred = np.full(len(X), self.base_score)
        for tree in self.trees:
            pred += self.learning_rate * tree.value[tree.apply(X)]
        return pred

    def to_dict(self) -> dict:
        p = self.params
        return {"model_format": MODEL_FORMAT, "type": "gbt",
                "loss": {"kind": p.loss, "huber_delta": p.huber_delta, "quantile": p.quantile},
                "params": {"n_trees": p.n_trees, "max_depth": p.max_depth,
                           "learning_rate": p.learning_rate, "subsample": p.subsample,
                           "min_leaf": p.min_leaf, "n_bins": p.n_bins, "seed": p.seed},
                "base_score": self.base_score, "learning_rate": self.learning_rate,
                "feature_names": list(self.feature_names),
                "importance": self.importance.tolist(),
                "train_loss": list(self.train_loss),
                "trees": [t.to_dict() for t in self.trees]}


def _bin_edges(col: np.ndarray, n_bins: int) -> np.ndarray:
    """Split candidates as actual data values, so thresholds follow monotone maps."""
    vals = np.unique(col)
    if len(vals) <= n_bins:
        return vals[:-1]
    qs = np.quantile(col, np.linspace(0.0, 1.0, n_bins + 1)[1:-1], method="inverted_cdf")
    edges = np.unique(qs)
    return edges[edges < vals[-1]]


def gbt_fit(X: np.ndarray, y: np.ndarray, params: GbtParams = GbtParams(),
            feature_names: Optional[Sequence[str]] = None) -> GbtModel:
    """Fit a boosted ensemble of regression trees.

    Deterministic for fixed ``params.seed``. Split ties go to the lowest
    feature index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, F = X.shape
    if len(y) != n:
        raise ModelError("X and y row counts differ")
    if n < 2 * params.min_leaf:
        raise ModelError(f"need at least {2 * params.min_leaf} rows, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ModelError("non-finite values in X or y")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(F)]
    if len(names) != F:
        raise ModelError("feature_names length does not match X columns")

    loss, delta, tau = params.loss, params.huber_delta, params.quantile
    edges = [_bin_edges(X[:, j], params.n_bins) for j in range(F)]
    nb = max((len(e) + 1 for e in edges), default=1)
    codes = np.empty((n, F), dtype=np.int32)
    for j in range(F):
        codes[:, j] = np.searchsorted(edges[j], X[:, j], side="left")
    n_split = np.array([len(e) for e in edges])
    # candidate (feature, bin) pairs that exist
    valid_bin = np.arange(nb)[None, :] < n_split[:, None]
    codes_t = np.ascontiguousarray(codes.T)
    all_rows = np.arange(n)

    base = _leaf_value(loss, y, delta, tau)
    pred = np.full(n, base)
    curve = [loss_value(loss, y, pred, delta, tau)]
    importance = np.zeros(F)
    rng = np.random.default_rng(params.seed)
    n_sub = max(int(round(params.subsample * n)), 1)
    trees: List[Tree] = []

    for _ in range(params.n_trees):
        g, h = _grad_hess(loss, y, pred, delta, tau)
        if n_sub < n:
            sub = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            sub = np.arange(n)
        tree, leaf_rows = _grow_tree(codes, codes_t, g, h, sub, all_rows, edges, valid_bin, nb,
                                     params, importance)
        for leaf, rows in leaf_rows.items():
            tree.value[leaf] = _leaf_value(loss, y[rows] - pred[rows], delta, tau)
        for leaf, rows in leaf_rows.items():
            pred[rows] += params.learning_rate * tree.value[leaf]
        curve.append(loss_value(loss, y, pred, delta, tau))
        trees.append(tree)

    return GbtModel(trees, params.learning_rate, base, params, names, curve, importance)


def _grow_tree(codes, codes_t, g, h, sub, full, edges, valid_bin, nb, params, importance):
    F = codes.shape[1]
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        return len(feature) - 1

    leaf_rows: Dict[int, np.ndarray] = {}
    stack = [(new_node(), sub, full, 0)]
    while stack:
        node, s_rows, f_rows, depth = stack.pop()
        split = None
        if depth < params.max_depth and len(s_rows) >= 2 * params.min_leaf:
            split = _best_split(codes, s_rows, g, h, valid_bin, nb, params.min_leaf)
        if split is None:
            leaf_rows[node] = f_rows
            continue
        j, b, gain = split
        importance[j] += gain
        feature[node] = j
        threshold[node] = float(edges[j][b])
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        s_left = codes_t[j][s_rows] <= b
        f_left = codes_t[j][f_rows] <= b
        # right child pushed first so the left subtree is numbered first
        stack.append((r_node, s_rows[~s_left], f_rows[~f_left], depth + 1))
        stack.append((l_node, s_rows[s_left], f_rows[f_left], depth + 1))

    tree = Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.zeros(len(feature)))
    return tree, leaf_rows


@njit(cache=True)
def _route(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            k = left[k] if X[i, feature[k]] <= threshold[k] else right[k]
        out[i] = k
    return out


@njit(cache=True)
def _histograms(codes, rows, g, h, nb):
    F = codes.shape[1]
    G = np.zeros((F, nb))
    H = np.zeros((F, nb))
    C = np.zeros((F, nb), dtype=np.int64)
    for i in rows:
        gi = g[i]
        hi = h[i]
        for f in range(F):
            b = codes[i, f]
            G[f, b] += gi
            H[f, b] += hi
            C[f, b] += 1
    return G, H, C


def _best_split(codes, rows, g, h, valid_bin, nb, min_leaf):
    G, H, C = _histograms(codes, rows, g, h, nb)
    m = len(rows)
    GL, HL, CL = np.cumsum(G, axis=1), np.cumsum(H, axis=1), np.cumsum(C, axis=1)
    Gt, Ht = GL[:, -1:], HL[:, -1:]
    GR, HR, CR = Gt - GL, Ht - HL, m - CL
    ok = valid_bin & (CL >= min_leaf) & (CR >= min_leaf)
    if not ok.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = GL * GL / HL + GR * GR / HR - Gt * Gt / Ht
    gain = np.where(ok, gain, -np.inf)
    best = int(np.argmax(gain))       # first max: lowest feature, then lowest bin
    j, b = divmod(best, nb)
    if not gain[j, b] > 1e-12 * max(float(Gt[0, 0] ** 2 / Ht[0, 0]), 1e-300):
        return None
    return j, b, float(gain[j, b])


# ---------------------------------------------------------------------------
# shared entry points

Model = Union[LinearFit, GbtModel]


def _check_X(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != n_features:
        raise ModelError(f"expected {n_features} feature columns, got {X.shape[1]}")
    return X


def predict(model: Model, X: np.ndarray, names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Predict with any fitted model; ``names`` (if given) must match training."""
    if names is not None and list(names) != list(model.feature_names):
        raise ModelError(f"column names {list(names)} do not match {model.feature_names}")
    return model.predict(X)


def model_to_json(model: Model) -> str:
    return json.dumps(model.to_dict())


def model_from_json(text: str) -> Model:
    d = json.loads(text)
    if d.get("model_format") != MODEL_FORMAT:
        raise ModelError(f"unsupported model_format {d.get('model_format')!r}")
    if d["type"] == "linear":
        coef = d["coefficients"]
        names = ["intercept"] + [k for k in coef if k != "intercept"]
        return LinearFit(names, np.array([coef[k] for k in names]), d["n_train"],
                         d["condition_warning"], d["train_loss"])
    if d["type"] == "gbt":
        p = d["params"]
        params = GbtParams(loss=d["loss"]["kind"], huber_delta=d["loss"]["huber_delta"],
                           quantile=d["loss"]["quantile"], **p)
        return GbtModel([Tree.from_dict(t) for t in d["trees"]], d["learning_rate"],
                        d["base_score"], params, d["feature_names"], d["train_loss"],
                        np.array(d["importance"], dtype=float))
    raise ModelError(f"unknown model type {d['type']!r}")
