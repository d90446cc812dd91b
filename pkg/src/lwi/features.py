"""LWI target, microstructure features and horizon targets.

Window suffixes follow one convention throughout: ``Ns`` means a window of
N seconds (``4N`` bins on the 250 ms grid) and a bare ``lagN`` means N bins.
``X_lagNs`` is the mean of X over the N-second window that ends one bin
before the current bin (the same stabilised lag the LWI denominator uses).

Every feature at row ``t`` depends on bins ``<= t`` only.
"""

from __future__ import annotations

import io
import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import BinTable, GRID_NS

DEFAULT_EPSILON = 1.0
DEFAULT_MA_WINDOW = 4
DEFAULT_HORIZONS = (1, 4, 8, 20)

# consensus features, in consensus-table order
CONSENSUS_FEATURES = (
    "LWI_ma1s", "LWI_lag1", "LWI_sd1s", "dLWI_1s", "LWI_lag2", "adds_rate1s",
    "canc_rate1s", "QI_lag1s", "depth_L1_lag1s", "depth_L1_lag4", "QI_sd1s",
    "LWI_ma10s", "QI_lag4", "LWI_ma2s", "LWI_sd2s", "spread_sd1s",
)


class FeatureSpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitive series

def lwi_value(cancels: float, depth_ma_prev: float, adds: float, epsilon: float) -> float:
    """Single-bin LWI from its four ingredients."""
    return cancels / (depth_ma_prev + max(adds, epsilon))


def compute_lwi(bins: BinTable, epsilon: float = DEFAULT_EPSILON,
                ma_window: int = DEFAULT_MA_WINDOW) -> np.ndarray:
    """Per-bin LWI; the first ``ma_window`` bins are NaN.

    Denominator: moving average of L1 depth (bid + ask) over the
    ``ma_window`` bins ending at ``t-1``, plus adds at ``t`` floored at
    ``epsilon``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if ma_window < 1:
        raise ValueError("ma_window must be >= 1")
    depth = bins.depth_L1.astype(float)
    ma_prev = lag(rolling_stats(depth, ma_window, "mean"), 1)
    denom = ma_prev + np.maximum(bins.adds_L1.astype(float), epsilon)
    return bins.cancels_L1.astype(float) / denom


def compute_qi(bins: BinTable) -> np.ndarray:
    b = bins.bid_depth.astype(float)
    a = bins.ask_depth.astype(float)
    tot = a + b
    out = np.zeros(len(bins))
    nz = tot > 0
    out[nz] = (b[nz] - a[nz]) / tot[nz]
    return out


def compute_ofi(bins: BinTable) -> np.ndarray:
    """Best-quote order flow imbalance per bin.

    Each event contributes +size for bid adds and ask cancels/executions at
    L1, and -size for ask adds and bid cancels/executions at L1.
    """
    return bins.ofi.astype(float)


def rolling_stats(col: np.ndarray, window: int, kind: str = "mean") -> np.ndarray:
    """Trailing-window mean or sample sd ending at each index (inclusive).

    NaN until the window is full, and wherever the window holds a NaN.
    """
    col = np.asarray(col, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if kind not in ("mean", "sd"):
        raise ValueError(f"unknown kind {kind!r}")
    if kind == "sd" and window < 2:
        raise ValueError("sd needs window >= 2")
    out = np.full(col.shape, np.nan)
    if len(col) < window:
        return out
    win = sliding_window_view(col, window)
    if kind == "mean":
        out[window - 1:] = win.mean(axis=1)
    else:
        out[window - 1:] = win.std(axis=1, ddof=1)
    return out


def lag(col: np.ndarray, n: int) -> np.ndarray:
    col = np.asarray(col, dtype=float)
    out = np.full(col.shape, np.nan)
    if n == 0:
        return col.copy()
    if n < len(col):
        out[n:] = col[:-n]
    return out


def activity_rates(bins: BinTable, window: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Trailing adds and cancels at L1 in shares per second."""
    if window < 1:
        raise ValueError("window must be >= 1")
    seconds = window * bins.grid_ns / 1e9
    adds = rolling_stats(bins.adds_L1.astype(float), window, "mean") * window / seconds
    canc = rolling_stats(bins.cancels_L1.astype(float), window, "mean") * window / seconds
    return adds, canc


def _lead(col: np.ndarray, n: int) -> np.ndarray:
    out = np.full(col.shape, np.nan)
    if n < len(col):
        out[:-n] = col[n:]
    return out


def forward_mean(col: np.ndarray, k: int) -> np.ndarray:
    """``out[t] = mean(col[t+1 .. t+k])``; NaN for the last k rows."""
    if k < 1:
        raise ValueError("horizon must be >= 1")
    return _lead(rolling_stats(col, k, "mean"), k)


# ---------------------------------------------------------------------------
# named feature vocabulary

@dataclass
class BaseSeries:
    """Per-bin base series from which every named feature is derived."""
    LWI: np.ndarray
    QI: np.ndarray
    depth_L1: np.ndarray
    spread: np.ndarray
    OFI: np.ndarray
    adds: np.ndarray
    cancels: np.ndarray
    mid: np.ndarray
    bins_per_second: int = 4

    def __len__(self) -> int:
        return len(self.LWI)

    def replace_lwi(self, lwi: np.ndarray) -> "BaseSeries":
        return replace(self, LWI=np.asarray(lwi, dtype=float))


def base_series(bins: BinTable, epsilon: float = DEFAULT_EPSILON,
                ma_window: int = DEFAULT_MA_WINDOW) -> BaseSeries:
    bps = int(round(1e9 / bins.grid_ns))
    return BaseSeries(
        LWI=compute_lwi(bins, epsilon, ma_window),
        QI=compute_qi(bins),
        depth_L1=bins.depth_L1.astype(float),
        spread=bins.spread / 1e9,
        OFI=compute_ofi(bins),
        adds=bins.adds_L1.astype(float),
        cancels=bins.cancels_L1.astype(float),
        mid=bins.mid,
        bins_per_second=max(bps, 1),
    )


def _vocabulary() -> Dict[str, Callable[[BaseSeries], np.ndarray]]:
    v: Dict[str, Callable[[BaseSeries], np.ndarray]] = {}

    def sec(b: BaseSeries, s: int) -> int:
        return s * b.bins_per_second

    for base in ("LWI", "QI", "depth_L1", "spread", "OFI"):
        v[base] = lambda b, base=base: getattr(b, base).copy()
    for n in range(1, 6):
        v[f"LWI_lag{n}"] = lambda b, n=n: lag(b.LWI, n)
    for s in (1, 2, 10, 60):
        v[f"LWI_ma{s}s"] = lambda b, s=s: rolling_stats(b.LWI, sec(b, s), "mean")
    for s in (1, 2):
        v[f"LWI_sd{s}s"] = lambda b, s=s: rolling_stats(b.LWI, sec(b, s), "sd")
    v["dLWI_1s"] = lambda b: b.LWI - lag(b.LWI, sec(b, 1))
    for n in range(1, 5):
        v[f"QI_lag{n}"] = lambda b, n=n: lag(b.QI, n)
    v["QI_lag1s"] = lambda b: lag(rolling_stats(b.QI, sec(b, 1), "mean"), 1)
    v["QI_sd1s"] = lambda b: rolling_stats(b.QI, sec(b, 1), "sd")
    v["depth_L1_lag1s"] = lambda b: lag(rolling_stats(b.depth_L1, sec(b, 1), "mean"), 1)
    v["depth_L1_lag4"] = lambda b: lag(b.depth_L1, 4)
    v["spread_sd1s"] = lambda b: rolling_stats(b.spread, sec(b, 1), "sd")
    v["adds_rate1s"] = lambda b: rolling_stats(b.adds, sec(b, 1), "mean") * b.bins_per_second
    v["canc_rate1s"] = lambda b: rolling_stats(b.cancels, sec(b, 1), "mean") * b.bins_per_second
    for s in (1, 10):
        v[f"midret_sd{s}s"] = lambda b, s=s: rolling_stats(_log_returns(b.mid), sec(b, s), "sd")
    return v


def _log_returns(mid: np.ndarray) -> np.ndarray:
    out = np.full(mid.shape, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[1:] = np.log(mid[1:] / mid[:-1])
    return out


VOCABULARY = _vocabulary()
# screening pool: every named feature except the raw current-bin target
SCREEN_FEATURES = tuple(n for n in VOCABULARY if n != "LWI")


@dataclass(frozen=True)
class FeatureSpec:
    features: Tuple[str, ...] = CONSENSUS_FEATURES
    horizons: Tuple[int, ...] = DEFAULT_HORIZONS

    def __post_init__(self):
        unknown = [f for f in self.features if f not in VOCABULARY]
        if unknown:
            raise FeatureSpecError(
                f"unknown feature(s) {', '.join(unknown)}; vocabulary: "
                + ", ".join(VOCABULARY))
        if not self.horizons or any(int(k) < 1 for k in self.horizons):
            raise FeatureSpecError("horizons must be a non-empty set of integers >= 1")
        if len(set(self.features)) != len(self.features):
            raise FeatureSpecError("duplicate feature names")


# ---------------------------------------------------------------------------
# frame

@dataclass
class FeatureFrame:
    """Aligned per-symbol matrix of features, LWI and horizon targets."""
    symbol: str
    bin_index: np.ndarray
    columns: Dict[str, np.ndarray]
    targets: Dict[int, np.ndarray]
    modelable_mask: np.ndarray
    t0_ns: int = 0
    grid_ns: int = GRID_NS

    def __post_init__(self):
        n = len(self.bin_index)
        for name, col in list(self.columns.items()) + [(f"target_k{k}", t) for k, t in self.targets.items()]:
            if len(col) != n:
                raise ValueError(f"column {name} has length {len(col)}, expected {n}")
        if len(self.modelable_mask) != n:
            raise ValueError("modelable_mask length mismatch")
        for arr in [self.bin_index, self.modelable_mask, *self.columns.values(), *self.targets.values()]:
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.bin_index)

    @property
    def feature_names(self) -> List[str]:
        return [c for c in self.columns if c != "LWI"]

    @property
    def lwi(self) -> np.ndarray:
        return self.columns["LWI"]

    @property
    def bin_start_ns(self) -> np.ndarray:
        return self.t0_ns + self.grid_ns * self.bin_index.astype(np.int64)

    @property
    def modelable_rows(self) -> np.ndarray:
        return np.flatnonzero(self.modelable_mask)

    def matrix(self, names: Sequence[str], rows: Optional[np.ndarray] = None) -> np.ndarray:
        cols = [self.columns[n] for n in names]
        X = np.column_stack(cols) if cols else np.empty((len(self), 0))
        return X if rows is None else X[rows]

    def target(self, k: int) -> np.ndarray:
        return self.targets[k]

    def with_target(self, k: int, values: np.ndarray) -> "FeatureFrame":
        """Copy with target ``k`` replaced (used to plant signals in tests)."""
        values = np.array(values, dtype=float)
        targets = dict(self.targets)
        targets[k] = values
        mask = self.modelable_mask & np.isfinite(values)
        return replace(self, targets=targets, modelable_mask=mask)

    # -- I/O ---------------------------------------------------------------
    def to_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(frame_to_csv(self), encoding="utf-8")

    def to_ffr(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(frame_to_ffr(self))


def frame_from_base(base: BaseSeries, spec: FeatureSpec, symbol: str = "",
                    excluded: Optional[np.ndarray] = None, t0_ns: int = 0,
                    grid_ns: int = GRID_NS) -> FeatureFrame:
    n = len(base)
    columns: Dict[str, np.ndarray] = {"LWI": np.asarray(base.LWI, dtype=float).copy()}
    for name in spec.features:
        if name != "LWI":
            columns[name] = np.asarray(VOCABULARY[name](base), dtype=float)
    targets = {int(k): forward_mean(base.LWI, int(k)) for k in spec.horizons}
    mask = np.ones(n, bool) if excluded is None else ~np.asarray(excluded, bool)
    for name in spec.features:
        mask &= np.isfinite(columns[name])
    mask &= np.isfinite(columns["LWI"])
    for t in targets.values():
        mask &= np.isfinite(t)
    return FeatureFrame(symbol, np.arange(n, dtype=np.int64), columns, targets, mask,
                        t0_ns, grid_ns)


def build_frame(bins: BinTable, spec: FeatureSpec = FeatureSpec(), symbol: str = "",
                epsilon: float = DEFAULT_EPSILON,
                ma_window: int = DEFAULT_MA_WINDOW) -> FeatureFrame:
    """Compute LWI, the requested features and targets for one symbol.

    Rows flagged ``excluded`` in ``bins`` (warm start) and rows with any
    missing requested value are left out of ``modelable_mask``.
    """
    base = base_series(bins, epsilon, ma_window)
    t0 = int(bins.bin_start[0]) if len(bins) else 0
    return frame_from_base(base, spec, symbol, bins.excluded, t0, bins.grid_ns)


# ---------------------------------------------------------------------------
# serialisation

FFR_MAGIC = b"FFR1"
_KIND_META, _KIND_FEATURE, _KIND_TARGET = 0, 1, 2


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def frame_to_csv(frame: FeatureFrame) -> str:
    names = list(frame.columns)
    tnames = [f"target_k{k}" for k in frame.targets]
    buf = io.StringIO()
    buf.write(",".join(["bin_index", "bin_start_ns", *names, *tnames, "modelable"]) + "\n")
    cols = [frame.columns[n] for n in names] + list(frame.targets.values())
    starts = frame.bin_start_ns
    for i in range(len(frame)):
        vals = [str(int(frame.bin_index[i])), str(int(starts[i]))]
        vals += [_fmt(c[i]) for c in cols]
        vals.append("1" if frame.modelable_mask[i] else "0")
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def frame_from_csv(path: Union[str, Path], symbol: str = "",
                   grid_ns: int = GRID_NS) -> FeatureFrame:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    if header[:2] != ["bin_index", "bin_start_ns"] or header[-1] != "modelable":
        raise ValueError("not a feature frame CSV")
    body = [ln.split(",") for ln in lines[1:]]
    n = len(body)
    idx = np.array([int(r[0]) for r in body], dtype=np.int64)
    starts = [int(r[1]) for r in body]
    t0 = starts[0] - grid_ns * int(idx[0]) if n else 0
    columns: Dict[str, np.ndarray] = {}
    targets: Dict[int, np.ndarray] = {}
    for j, name in enumerate(header[2:-1], start=2):
        arr = np.array([float(r[j]) if r[j] else np.nan for r in body], dtype=float)
        m = re.fullmatch(r"target_k(\d+)", name)
        if m:
            targets[int(m.group(1))] = arr
        else:
            columns[name] = arr
    mask = np.array([r[-1] == "1" for r in body], dtype=bool)
    return FeatureFrame(symbol, idx, columns, targets, mask, t0, grid_ns)


def frame_to_ffr(frame: FeatureFrame) -> bytes:
    """Binary frame: header, column directory, then one f64 LE block per column.

    Layout (little-endian): ``b"FFR1"``, u16 version (1), i64 t0_ns,
    i64 grid_ns, u16 symbol length + UTF-8 symbol, u64 n_rows, u32 n_cols,
    then per column u8 kind (0 meta, 1 feature, 2 target) + u16 name length
    + UTF-8 name, then the column blocks in directory order. NaN = missing.
    """
    entries: List[Tuple[int, str, np.ndarray]] = [
        (_KIND_META, "bin_index", frame.bin_index.astype(float)),
        (_KIND_META, "modelable", frame.modelable_mask.astype(float)),
    ]
    entries += [(_KIND_FEATURE, n, c) for n, c in frame.columns.items()]
    entries += [(_KIND_TARGET, f"target_k{k}", t) for k, t in frame.targets.items()]
    sym = frame.symbol.encode("utf-8")
    out = [FFR_MAGIC, struct.pack("<Hqq", 1, frame.t0_ns, frame.grid_ns),
           struct.pack("<H", len(sym)), sym, struct.pack("<QI", len(frame), len(entries))]
    for kind, name, _ in entries:
        nb = name.encode("utf-8")
        out.append(struct.pack("<BH", kind, len(nb)) + nb)
    for _, _, col in entries:
        out.append(np.ascontiguousarray(col, dtype="<f8").tobytes())
    return b"".join(out)


def frame_from_ffr(source: Union[str, Path, bytes]) -> FeatureFrame:
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if data[:4] != FFR_MAGIC:
        raise ValueError("bad magic; expected b'FFR1'")
    pos = 4
    version, t0, grid = struct.unpack_from("<Hqq", data, pos)
    pos += 18
    if version != 1:
        raise ValueError(f"unsupported FFR1 version {version}")
    (slen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    symbol = data[pos:pos + slen].decode("utf-8")
    pos += slen
    n_rows, n_cols = struct.unpack_from("<QI", data, pos)
    pos += 12
    directory = []
    for _ in range(n_cols):
        kind, nlen = struct.unpack_from("<BH", data, pos)
        pos += 3
        directory.append((kind, data[pos:pos + nlen].decode("utf-8")))
        pos += nlen
    need = pos + 8 * n_rows * n_cols
    if len(data) < need:
        raise ValueError("truncated FFR1 file")
    blocks = np.frombuffer(data, dtype="<f8", count=n_rows * n_cols, offset=pos)
    blocks = blocks.reshape(n_cols, n_rows) if n_cols else blocks.reshape(0, n_rows)
    idx = mask = None
    columns: Dict[str, np.ndarray] = {}
    targets: Dict[int, np.ndarray] = {}
    for (kind, name), col in zip(directory, blocks):
        col = col.astype(float)
        if kind == _KIND_META and name == "bin_index":
            idx = col.astype(np.int64)
        elif kind == _KIND_META and name == "modelable":
            mask = col != 0
        elif kind == _KIND_TARGET:
            targets[int(name[len("target_k"):])] = col
        elif kind == _KIND_FEATURE:
            columns[name] = col
    if idx is None or mask is None:
        raise ValueError("FFR1 file lacks bin_index/modelable")
    return FeatureFrame(symbol, idx, columns, targets, mask, t0, grid)
