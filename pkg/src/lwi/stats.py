"""Diagnostics and feature screening.

ADF unit-root test, ACF/PACF, histogram mutual information, LASSO by
coordinate descent, the three-method screen and the cross-symbol consensus
table.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular
from scipy.stats import rankdata

from .features import FeatureFrame
from .models import GbtParams, gbt_fit


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ADF

# MacKinnon (2010) response surface, constant-only case, one variable:
# crit(n) = b0 + b1/n + b2/n^2 + b3/n^3
_ADF_C_SURFACE = {
    "1%": (-3.43035, -6.5393, -16.786, -79.433),
    "5%": (-2.86154, -2.8903, -4.234, -40.040),
    "10%": (-2.56677, -1.5384, -2.809, 0.0),
}


def adf_critical_values(nobs: float = math.inf) -> Dict[str, float]:
    if math.isinf(nobs):
        return {k: v[0] for k, v in _ADF_C_SURFACE.items()}
    return {k: b0 + b1 / nobs + b2 / nobs ** 2 + b3 / nobs ** 3
            for k, (b0, b1, b2, b3) in _ADF_C_SURFACE.items()}


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    lags_used: int
    n_obs: int
    critical_values: Dict[str, float]
    reject_at_5pct: bool


def default_adf_lags(n: int) -> int:
    return int(min(math.ceil(12.0 * (n / 100.0) ** 0.25), n // 2 - 2))


def _adf_design(x: np.ndarray, dx: np.ndarray, p: int, nlag_common: int):
    """Rows use the sample that drops the first ``nlag_common`` differences."""
    nobs = len(dx) - nlag_common
    y = dx[nlag_common:]
    cols = [x[nlag_common:nlag_common + nobs]]
    for j in range(1, p + 1):
        cols.append(dx[nlag_common - j:nlag_common - j + nobs])
    return np.column_stack(cols), y


def _qr_ols(A: np.ndarray, y: np.ndarray):
    Q, R = np.linalg.qr(A)
    beta = solve_triangular(R, Q.T @ y)
    resid = y - A @ beta
    return beta, R, float(resid @ resid)


def adf_test(series: np.ndarray, max_lags: Optional[int] = None) -> AdfResult:
    """Augmented Dickey-Fuller test with a constant term.

    The lag order is chosen by minimum AIC over ``0..max_lags`` on a common
    sample; the chosen regression is then refit on all available rows and
    the statistic is the t-ratio on the lagged level.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if not np.all(np.isfinite(x)):
        raise StatsError("series has missing or non-finite values")
    if max_lags is None:
        max_lags = default_adf_lags(n)
    if max_lags < 0:
        raise StatsError("max_lags must be >= 0")
    if n < 20 + max_lags or max_lags > n // 2 - 2:
        raise StatsError(f"series too short ({n}) for max_lags={max_lags}")
    if np.ptp(x) == 0:
        raise StatsError("series is constant")
    dx = np.diff(x)

    levels, y = _adf_design(x, dx, max_lags, max_lags)
    nobs = len(y)
    full = np.column_stack([np.ones(nobs), levels])
    best_aic, best_p = np.inf, 0
    for p in range(max_lags + 1):
        _, _, ssr = _qr_ols(full[:, :p + 2], y)
        aic = nobs * (math.log(2 * math.pi) + math.log(ssr / nobs) + 1) + 2 * (p + 2)
        if aic < best_aic:
            best_aic, best_p = aic, p

    levels, y = _adf_design(x, dx, best_p, best_p)
    nobs = len(y)
    A = np.column_stack([levels, np.ones(nobs)])
    beta, R, ssr = _qr_ols(A, y)
    if not np.all(np.isfinite(beta)):
        raise StatsError("singular ADF regression")
    sigma2 = ssr / (nobs - A.shape[1])
    Rinv = solve_triangular(R, np.eye(A.shape[1]))
    se = math.sqrt(sigma2 * float(Rinv[0] @ Rinv[0]))
    stat = float(beta[0] / se)
    crit = adf_critical_values(nobs)
    return AdfResult(stat, best_p, nobs, crit, stat < crit["5%"])


# ---------------------------------------------------------------------------
# ACF / PACF

def acf_pacf(series: np.ndarray, max_lag: int = 40) -> Tuple[np.ndarray, np.ndarray, float]:
    """Sample ACF (1/n autocovariances), PACF by Durbin-Levinson, 95% band."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n <= max_lag + 1:
        raise StatsError(f"need more than {max_lag + 1} observations")
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0:
        raise StatsError("series has zero variance")
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for k in range(1, max_lag + 1):
        acf[k] = float(xc[k:] @ xc[:-k]) / denom
    pacf = np.empty(max_lag + 1)
    pacf[0] = 1.0
    phi = np.zeros(max_lag + 1)
    for k in range(1, max_lag + 1):
        if k == 1:
            phikk = acf[1]
        else:
            num = acf[k] - phi[1:k] @ acf[k - 1:0:-1]
            den = 1.0 - phi[1:k] @ acf[1:k]
            phikk = num / den
        new = phi.copy()
        new[k] = phikk
        new[1:k] = phi[1:k] - phikk * phi[k - 1:0:-1]
        phi = new
        pacf[k] = phikk
    return acf, pacf, 1.96 / math.sqrt(n)


# ---------------------------------------------------------------------------
# mutual information

def quantile_bins(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency bin codes; tied values always share a bin."""
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="min") - 1
    return np.minimum((r * bins) // len(x), bins - 1).astype(np.int64)


def mutual_information(x: np.ndarray, y: np.ndarray, bins: int = 16) -> float:
    """Plug-in MI in nats from a ``bins x bins`` equal-frequency histogram."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise StatsError("x and y lengths differ")
    if len(x) < 100:
        raise StatsError("need at least 100 observations")
    if bins < 2:
        raise StatsError("bins must be >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    bx = quantile_bins(x, bins)
    by = quantile_bins(y, bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins) / len(x)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(px, py)
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return max(mi, 0.0)


# ---------------------------------------------------------------------------
# LASSO

LASSO_TOL = 1e-8


@dataclass
class LassoPath:
    """Coefficients on the standardised scale, one row per lambda."""
    lambdas: np.ndarray
    coefs: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    n_iter: np.ndarray

    def coef_original(self, i: int) -> Tuple[float, np.ndarray]:
        """(intercept, slopes) on the original feature scale for lambda ``i``."""
        scale = np.where(self.x_scale > 0, self.x_scale, 1.0)
        slopes = self.coefs[i] / scale
        return self.y_mean - float(self.x_mean @ slopes), slopes

    def predict(self, i: int, X: np.ndarray) -> np.ndarray:
        b0, b = self.coef_original(i)
        return b0 + np.asarray(X, dtype=float) @ b


def standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    Z = np.zeros_like(X)
    ok = scale > 0
    Z[:, ok] = (X[:, ok] - mean[ok]) / scale[ok]
    return Z, mean, scale


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    Z, _, _ = standardize(np.asarray(X, dtype=float))
    yc = np.asarray(y, dtype=float) - np.mean(y)
    return float(np.max(np.abs(Z.T @ yc)) / len(yc))


def lasso_path(X: np.ndarray, y: np.ndarray, lambdas: Sequence[float],
               tol: float = LASSO_TOL, max_iter: int = 100_000) -> LassoPath:
    """Cyclic coordinate descent on ``(1/2n)||y - Zb||^2 + lam ||b||_1``.

    ``Z`` is ``X`` standardised to mean 0 / sd 1 and ``y`` is centred.
    Each lambda warm-starts from the previous solution; a sweep converges
    when no coefficient moves by ``tol`` or more.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise StatsError("X must be 2-D with one row per y")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(lambdas))):
        raise StatsError("non-finite input to lasso_path")
    if len(lambdas) == 0 or np.any(lambdas < 0) or np.any(np.diff(lambdas) >= 0):
        raise StatsError("lambdas must be non-negative and strictly decreasing")
    Z, mean, scale = standardize(X)
    ym = float(y.mean())
    yc = y - ym
    n = len(y)
    G = Z.T @ Z / n
    c = Z.T @ yc / n
    coefs, iters = _cd_path(G, c, lambdas, tol, max_iter)
    return LassoPath(lambdas, coefs, mean, scale, ym, iters)


@njit(cache=True)
def _cd_path(G, c, lambdas, tol, max_iter):
    p = c.shape[0]
    L = lambdas.shape[0]
    out = np.zeros((L, p))
    iters = np.zeros(L, np.int64)
    beta = np.zeros(p)
    grad = np.zeros(p)   # G @ beta, kept current
    for li in range(L):
        lam = lambdas[li]
        it = 0
        while it < max_iter:
            it += 1
            maxd = 0.0
            for j in range(p):
                gjj = G[j, j]
                if gjj <= 0.0:
                    continue
                z = c[j] - grad[j] + gjj * beta[j]
                if z > lam:
                    new = (z - lam) / gjj
                elif z < -lam:
                    new = (z + lam) / gjj
                else:
                    new = 0.0
                d = new - beta[j]
                if d != 0.0:
                    for k in range(p):
                        grad[k] += G[k, j] * d
                    beta[j] = new
                    if abs(d) > maxd:
                        maxd = abs(d)
            if maxd < tol:
                break
        # refresh the running product to shed accumulated rounding
        for k in range(p):
            s = 0.0
            for j in range(p):
                s += G[k, j] * beta[j]
            grad[k] = s
        out[li] = beta
        iters[li] = it
    return out, iters


def lambda_grid(X: np.ndarray, y: np.ndarray, n_lambdas: int = 50, ratio: float = 1e-3) -> np.ndarray:
    lmax = lambda_max(X, y)
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(lmax, lmax * ratio, n_lambdas)


@dataclass
class LassoCV:
    lam: float
    coef: np.ndarray          # standardised scale
    cv_mse: np.ndarray
    path: LassoPath


def lasso_cv(X: np.ndarray, y: np.ndarray, n_folds: int = 5, n_lambdas: int = 50) -> LassoCV:
    """Pick lambda by contiguous-block K-fold CV, then refit on all rows."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    lambdas = lambda_grid(X, y, n_lambdas)
    n = len(y)
    edges = np.linspace(0, n, n_folds + 1).astype(int)
    mse = np.zeros(len(lambdas))
    for f in range(n_folds):
        test = np.zeros(n, bool)
        test[edges[f]:edges[f + 1]] = True
        path = lasso_path(X[~test], y[~test], lambdas)
        for i in range(len(lambdas)):
            err = y[test] - path.predict(i, X[test])
            mse[i] += float(err @ err)
    mse /= n
    best = int(np.argmin(mse))
    path = lasso_path(X, y, lambdas)
    return LassoCV(float(lambdas[best]), path.coefs[best].copy(), mse, path)


# ---------------------------------------------------------------------------
# screening and consensus

METHODS = ("mi", "gbt", "lasso")


@dataclass
class Screening:
    rankings: Dict[str, List[str]]
    scores: Dict[str, Dict[str, float]]


def _rank(names: Sequence[str], scores: np.ndarray, top_k: int, positive_only: bool) -> List[str]:
    order = sorted(range(len(names)), key=lambda j: (-scores[j], j))
    if positive_only:
        order = [j for j in order if scores[j] > 0]
    return [names[j] for j in order[:top_k]]


def screen_features(frame: FeatureFrame, k: int = 4, top_k: int = 15,
                    features: Optional[Sequence[str]] = None,
                    rows: Optional[np.ndarray] = None, mi_bins: int = 16,
                    gbt_params: GbtParams = GbtParams()) -> Screening:
    """Rank features against target ``k`` by MI, GBT gain and |LASSO coef|.

    Each ranking is truncated to ``top_k``; the GBT and LASSO lists only
    contain features with positive importance / non-zero coefficient.
    """
    names = list(features) if features is not None else frame.feature_names
    if rows is None:
        rows = frame.modelable_rows
    X = frame.matrix(names, rows)
    y = frame.target(k)[rows]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise StatsError("screening rows contain missing values")

    mi = np.array([mutual_information(X[:, j], y, mi_bins) for j in range(len(names))])
    model = gbt_fit(X, y, gbt_params, names)
    gain = model.importance
    cv = lasso_cv(X, y)
    lasso = np.abs(cv.coef)

    return Screening(
        rankings={"mi": _rank(names, mi, top_k, False),
                  "gbt": _rank(names, gain, top_k, True),
                  "lasso": _rank(names, lasso, top_k, True)},
        scores={"mi": dict(zip(names, mi.tolist())),
                "gbt": dict(zip(names, gain.tolist())),
                "lasso": dict(zip(names, lasso.tolist()))},
    )


@dataclass(frozen=True)
class ConsensusRow:
    feature: str
    n_symbols: int
    mean_best_rank: float
    method_hits: int
    consensus: bool


def consensus(rankings: Mapping[str, Mapping[str, Sequence[str]]],
              threshold: float = 0.6) -> List[ConsensusRow]:
    """Aggregate per-symbol, per-method top-k lists into consensus rows.

    ``rankings[symbol][method]`` is a ranked list (rank 1 first). A
    feature's best rank within a symbol is its minimum rank over methods.
    Rows are ordered by symbol coverage, then mean best rank, then method
    hits, then name.
    """
    if not rankings:
        raise StatsError("need at least one symbol")
    if not 0 < threshold <= 1:
        raise StatsError("threshold must be in (0, 1]")
    total = len(rankings)
    best: Dict[str, List[int]] = {}
    hits: Dict[str, int] = {}
    for sym in rankings:
        sym_best: Dict[str, int] = {}
        for method, ranked in rankings[sym].items():
            for pos, feat in enumerate(ranked, start=1):
                hits[feat] = hits.get(feat, 0) + 1
                sym_best[feat] = min(sym_best.get(feat, pos), pos)
        for feat, r in sym_best.items():
            best.setdefault(feat, []).append(r)
    rows = [ConsensusRow(f, len(r), float(np.mean(r)), hits[f],
                         len(r) >= threshold * total - 1e-12)
            for f, r in best.items()]
    return order_rows(rows)


def order_rows(rows: Sequence[ConsensusRow]) -> List[ConsensusRow]:
    """Coverage first, then mean best rank, then method hits, then name."""
    return sorted(rows, key=lambda r: (-r.n_symbols, r.mean_best_rank, -r.method_hits, r.feature))


CONSENSUS_COLUMNS = ("feature", "n_symbols", "mean_best_rank", "method_hits", "consensus")


def consensus_to_csv(rows: Sequence[ConsensusRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONSENSUS_COLUMNS)
    for r in rows:
        w.writerow([r.feature, r.n_symbols, f"{r.mean_best_rank:.2f}", r.method_hits,
                    "Yes" if r.consensus else "No"])
    return buf.getvalue()
