"""Embargoed expanding-window walk-forward evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .features import FeatureFrame
from .models import (GbtParams, ModelError, ar_columns, gbt_fit, har_columns, ols_fit,
                     Model)

logger = logging.getLogger(__name__)

DEFAULT_EMBARGO = 240
DEFAULT_INITIAL_FRACTION = 0.4

Range = Tuple[int, int]


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Fold:
    train: Range
    embargo: Range
    test: Range

    @property
    def n_test(self) -> int:
        return self.test[1] - self.test[0]


@dataclass(frozen=True)
class WalkForwardPlan:
    folds: Tuple[Fold, ...]
    n_folds: int
    embargo_bins: int
    n: int

    @property
    def n_test(self) -> int:
        return sum(f.n_test for f in self.folds)


def make_plan(n: int, n_folds: int = 5, embargo_bins: int = DEFAULT_EMBARGO,
              initial_train: Optional[int] = None) -> WalkForwardPlan:
    """Split ``n`` chronologically ordered rows into walk-forward folds.

    After an initial training block of ``initial_train`` rows the remainder
    is cut into ``n_folds`` blocks of ``(n - initial_train) // n_folds`` rows.
    Fold ``f`` tests on block ``f`` shifted right by the embargo (the last
    block is clipped at ``n`` and absorbs the remainder) and trains on every
    row before its embargo.

    Example: ``n=100, n_folds=5, embargo_bins=4, initial_train=20`` tests on
    [24,40), [40,56), [56,72), [72,88), [88,100).
    """
    if initial_train is None:
        initial_train = int(DEFAULT_INITIAL_FRACTION * n)
    if n_folds < 1:
        raise PlanError("n_folds must be >= 1")
    if embargo_bins < 0:
        raise PlanError("embargo_bins must be >= 0")
    if initial_train < 1:
        raise PlanError(f"initial training block must hold >= 1 row (got {initial_train})")
    block = (n - initial_train) // n_folds
    if block < 1:
        raise PlanError(f"{n} rows leave no room for {n_folds} test blocks after "
                        f"{initial_train} initial training rows")
    folds = []
    for f in range(n_folds):
        start = initial_train + f * block + embargo_bins
        end = n if f == n_folds - 1 else min(initial_train + (f + 1) * block + embargo_bins, n)
        if end <= start:
            raise PlanError(f"fold {f + 1} test block is empty: embargo {embargo_bins} too long "
                            f"for blocks of {block} rows")
        train_end = start - embargo_bins
        folds.append(Fold((0, train_end), (train_end, start), (start, end)))
    return WalkForwardPlan(tuple(folds), n_folds, embargo_bins, n)


# ---------------------------------------------------------------------------
# metrics

def r2(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if len(y_true) == 0 or len(y_true) != len(y_pred):
        raise ValueError("r2 needs equal non-zero lengths")
    dev = y_true - y_true.mean()
    ss_tot = float(dev @ dev)
    if ss_tot == 0:
        raise ValueError("r2 undefined for constant y_true")
    res = y_true - y_pred
    return 1.0 - float(res @ res) / ss_tot


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    res = np.asarray(y_true, dtype=float) - np.asarray(y_pred, dtype=float)
    return math.sqrt(float(np.mean(res ** 2)))


def skewness(x: np.ndarray) -> float:
    """Adjusted Fisher-Pearson sample skewness (G1)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        return float("nan")
    d = x - x.mean()
    m2 = float(np.mean(d ** 2))
    if m2 == 0:
        return 0.0
    g1 = float(np.mean(d ** 3)) / m2 ** 1.5
    return g1 * math.sqrt(n * (n - 1)) / (n - 2)


# ---------------------------------------------------------------------------
# model specs

MODEL_KINDS = ("ar", "har", "gbt")


@dataclass(frozen=True)
class ModelSpec:
    """One model column of the experiment.

    ``kind`` is ``ar`` (uses ``p``), ``har`` (uses ``windows``) or ``gbt``
    (uses ``gbt`` parameters on ``features``; empty means every feature in
    the frame).
    """
    name: str
    kind: str
    p: int = 5
    windows: Tuple[int, ...] = (1, 8, 40)
    features: Tuple[str, ...] = ()
    gbt: GbtParams = GbtParams()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")

    def columns(self, frame: FeatureFrame) -> Tuple[np.ndarray, List[str]]:
        if self.kind == "ar":
            return ar_columns(frame.lwi, self.p)
        if self.kind == "har":
            return har_columns(frame.lwi, self.windows)
        names = list(self.features) or frame.feature_names
        missing = [f for f in names if f not in frame.columns]
        if missing:
            raise ModelError(f"frame lacks feature(s): {', '.join(missing)}")
        return frame.matrix(names), names

    def fit(self, X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> Model:
        if self.kind == "gbt":
            return gbt_fit(X, y, self.gbt, names)
        return ols_fit(X, y, names)


DEFAULT_MODELS = (ModelSpec("AR5", "ar"), ModelSpec("HAR", "har"), ModelSpec("GBT", "gbt"))


# ---------------------------------------------------------------------------
# experiment

REPORT_COLUMNS = ("symbol", "model", "horizon_ms", "fold", "r2", "rmse", "resid_mean", "resid_skew")


@dataclass
class EvalRow:
    symbol: str
    model: str
    horizon: int
    fold: int
    r2: float
    rmse: float
    resid_mean: float
    resid_skew: float
    n_train: int = 0
    n_test: int = 0
    error: str = ""


@dataclass
class Forecast:
    model: str
    horizon: int
    fold: int
    timestamp: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray


@dataclass
class EvalReport:
    symbol: str
    rows: List[EvalRow]
    forecasts: List[Forecast]
    plan: WalkForwardPlan
    grid_ns: int
    fitted: Dict[Tuple[str, int, int], Model] = field(default_factory=dict)

    def horizon_ms(self, k: int) -> int:
        return k * self.grid_ns // 1_000_000

    def mean_r2(self) -> Dict[Tuple[str, int], float]:
        """Mean out-of-sample R² per (model, horizon) over successful folds."""
        acc: Dict[Tuple[str, int], List[float]] = {}
        for r in self.rows:
            acc.setdefault((r.model, r.horizon), [])
            if not r.error:
                acc[(r.model, r.horizon)].append(r.r2)
        return {key: (float(np.mean(v)) if v else float("nan")) for key, v in acc.items()}

    def residuals(self, model: str, horizon: int) -> np.ndarray:
        parts = [f.y_true - f.y_pred for f in self.forecasts
                 if f.model == model and f.horizon == horizon]
        return np.concatenate(parts) if parts else np.empty(0)

    @property
    def failures(self) -> List[EvalRow]:
        return [r for r in self.rows if r.error]


def evaluation_rows(frame: FeatureFrame, models: Sequence[ModelSpec]) -> np.ndarray:
    """Modelable rows on which every model's regressors are available."""
    ok = frame.modelable_mask.copy()
    for spec in models:
        cols, _ = spec.columns(frame)
        ok &= np.all(np.isfinite(cols), axis=1)
    return np.flatnonzero(ok)


def run_experiment(frame: FeatureFrame, models: Sequence[ModelSpec] = DEFAULT_MODELS,
                   horizons: Iterable[int] = (1, 4, 8, 20), n_folds: int = 5,
                   embargo_bins: int = DEFAULT_EMBARGO,
                   initial_fraction: float = DEFAULT_INITIAL_FRACTION,
                   keep_models: bool = False) -> EvalReport:
    """Walk-forward evaluation of every (model, horizon) cell on one frame.

    Rows are the frame's modelable rows where all models' regressors exist,
    in time order; the fold plan is laid over that sequence. A cell whose
    fit fails is recorded with an error message and the run continues.
    """
    horizons = [int(k) for k in horizons]
    missing = [k for k in horizons if k not in frame.targets]
    if missing:
        raise ValueError(f"frame has no target for horizon(s) {missing}")
    rows = evaluation_rows(frame, models)
    plan = make_plan(len(rows), n_folds, embargo_bins, int(initial_fraction * len(rows)))
    ts = frame.bin_start_ns[rows]
    designs = {spec.name: spec.columns(frame) for spec in models}

    out_rows: List[EvalRow] = []
    forecasts: List[Forecast] = []
    fitted: Dict[Tuple[str, int, int], Model] = {}
    for spec in models:
        cols, names = designs[spec.name]
        X = cols[rows]
        for k in horizons:
            y = frame.target(k)[rows]
            for f, fold in enumerate(plan.folds, start=1):
                tr = slice(*fold.train)
                te = slice(*fold.test)
                try:
                    model = spec.fit(X[tr], y[tr], names)
                    pred = model.predict(X[te])
                    res = y[te] - pred
                    row = EvalRow(frame.symbol, spec.name, k, f, r2(y[te], pred), rmse(y[te], pred),
                                  float(res.mean()), skewness(res),
                                  fold.train[1] - fold.train[0], fold.n_test)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    logger.warning("%s %s k=%d fold %d failed: %s", frame.symbol, spec.name, k, f, exc)
                    nan = float("nan")
                    out_rows.append(EvalRow(frame.symbol, spec.name, k, f, nan, nan, nan, nan,
                                            error=str(exc)))
                    continue
                out_rows.append(row)
                forecasts.append(Forecast(spec.name, k, f, ts[te], y[te], pred))
                if keep_models:
                    fitted[(spec.name, k, f)] = model
    return EvalReport(frame.symbol, out_rows, forecasts, plan, frame.grid_ns, fitted)


# ---------------------------------------------------------------------------
# CSV output

def _num(x: float) -> str:
    return "" if not math.isfinite(x) else f"{x:.6f}"


def horizon_label(ms: int) -> str:
    return f"{ms}ms" if ms < 1000 else f"{ms / 1000:g}s"


def report_csv(reports: Sequence[EvalReport]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for rep in reports:
        for r in rep.rows:
            lines.append(",".join([r.symbol, r.model, str(rep.horizon_ms(r.horizon)), str(r.fold),
                                   _num(r.r2), _num(r.rmse), _num(r.resid_mean), _num(r.resid_skew)]))
    return "\n".join(lines) + "\n"


def summary_csv(reports: Sequence[EvalReport]) -> str:
    """Mean R² over folds with one column per horizon, one row per symbol/model."""
    if not reports:
        return "symbol,model\n"
    horizons = sorted({r.horizon for rep in reports for r in rep.rows})
    grid_ns = reports[0].grid_ns
    header = ["symbol", "model"] + [horizon_label(k * grid_ns // 1_000_000) for k in horizons]
    lines = [",".join(header)]
    for rep in reports:
        means = rep.mean_r2()
        for model in dict.fromkeys(r.model for r in rep.rows):
            vals = [_num(means.get((model, k), float("nan"))) for k in horizons]
            lines.append(",".join([rep.symbol, model, *vals]))
    return "\n".join(lines) + "\n"


def forecast_csv(forecasts: Sequence[Forecast]) -> str:
    lines = ["fold,timestamp,y_true,y_pred"]
    for fc in forecasts:
        for t, a, b in zip(fc.timestamp.tolist(), fc.y_true.tolist(), fc.y_pred.tolist()):
            lines.append(f"{fc.fold},{t},{a!r},{b!r}")
    return "\n".join(lines) + "\n"


def failures_csv(reports: Sequence[EvalReport]) -> str:
    lines = ["symbol,model,horizon_ms,fold,reason"]
    for rep in reports:
        for r in rep.failures:
            reason = r.error.replace('"', "'")
            lines.append(f'{r.symbol},{r.model},{rep.horizon_ms(r.horizon)},{r.fold},"{reason}"')
    return "\n".join(lines) + "\n"


def write_reports(reports: Sequence[EvalReport], out_dir: Union[str, Path]) -> List[Path]:
    """Write report, summary and per-(symbol, model, horizon) forecast files."""
    out = Path(out_dir)
    (out / "forecasts").mkdir(parents=True, exist_ok=True)
    written = [out / "report.csv", out / "summary.csv"]
    written[0].write_text(report_csv(reports), encoding="utf-8")
    written[1].write_text(summary_csv(reports), encoding="utf-8")
    if any(rep.failures for rep in reports):
        p = out / "failures.csv"
        p.write_text(failures_csv(reports), encoding="utf-8")
        written.append(p)
    for rep in reports:
        cells: Dict[Tuple[str, int], List[Forecast]] = {}
        for fc in rep.forecasts:
            cells.setdefault((fc.model, fc.horizon), []).append(fc)
        for (model, k), fcs in cells.items():
            p = out / "forecasts" / f"{rep.symbol}_{model}_{rep.horizon_ms(k)}ms.csv"
            p.write_text(forecast_csv(fcs), encoding="utf-8")
            written.append(p)
    return written
