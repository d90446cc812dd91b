"""Uniform-time resampling of replayed book state.

Bins are labelled by their start time. A bin carries the book snapshot at
its end (state after the last event with ``ts_event < bin_end``) and the sum
of L1 flow over events inside it. Empty bins carry the previous snapshot
forward with zero flow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .book import BookL1, replay
from .mbo import MboEvent, events_to_array

logger = logging.getLogger(__name__)

GRID_NS = 250_000_000
DEFAULT_WARM_BINS = 240

BIN_CSV_COLUMNS = ("bin_start_ns", "best_bid_px", "best_ask_px", "bid_depth",
                   "ask_depth", "adds_L1", "cancels_L1", "exec_L1", "event_count")


@dataclass(frozen=True)
class GridBin:
    bin_start: int
    book: BookL1
    adds_L1: int
    cancels_L1: int
    exec_L1: int
    ofi: int
    event_count: int
    excluded: bool = False

    @property
    def mid_px(self) -> Optional[Fraction]:
        if self.book.best_bid_px is None or self.book.best_ask_px is None:
            return None
        return Fraction(self.book.best_bid_px + self.book.best_ask_px, 2)

    @property
    def spread(self) -> Optional[int]:
        if self.book.best_bid_px is None or self.book.best_ask_px is None:
            return None
        return self.book.best_ask_px - self.book.best_bid_px


@dataclass
class BinTable:
    """Columnar sequence of ``GridBin``; price 0 marks an empty side."""
    bin_start: np.ndarray
    bid_px: np.ndarray
    ask_px: np.ndarray
    bid_depth: np.ndarray
    ask_depth: np.ndarray
    adds_L1: np.ndarray
    cancels_L1: np.ndarray
    exec_L1: np.ndarray
    ofi: np.ndarray
    event_count: np.ndarray
    excluded: np.ndarray
    grid_ns: int = GRID_NS
    n_dropped: int = 0
    book_errors: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.bin_start)

    def __getitem__(self, i: int) -> GridBin:
        if i < 0:
            i += len(self)
        bid, ask = int(self.bid_px[i]), int(self.ask_px[i])
        return GridBin(
            bin_start=int(self.bin_start[i]),
            book=BookL1(bid or None, ask or None, int(self.bid_depth[i]), int(self.ask_depth[i])),
            adds_L1=int(self.adds_L1[i]),
            cancels_L1=int(self.cancels_L1[i]),
            exec_L1=int(self.exec_L1[i]),
            ofi=int(self.ofi[i]),
            event_count=int(self.event_count[i]),
            excluded=bool(self.excluded[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def depth_L1(self) -> np.ndarray:
        return self.bid_depth + self.ask_depth

    @property
    def two_sided(self) -> np.ndarray:
        return (self.bid_px > 0) & (self.ask_px > 0)

    @property
    def spread(self) -> np.ndarray:
        """Spread in price units as float; NaN unless both sides are present."""
        out = (self.ask_px - self.bid_px).astype(float)
        out[~self.two_sided] = np.nan
        return out

    @property
    def mid(self) -> np.ndarray:
        out = (self.ask_px.astype(float) + self.bid_px.astype(float)) / 2.0
        out[~self.two_sided] = np.nan
        return out

    @property
    def modelable(self) -> np.ndarray:
        return ~self.excluded


def empty_bins(n: int, t0: int = 0, grid_ns: int = GRID_NS) -> BinTable:
    z = np.zeros(n, np.int64)
    return BinTable(t0 + grid_ns * np.arange(n, dtype=np.int64), z.copy(), z.copy(),
                    z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(),
                    np.zeros(n, bool), grid_ns)


def resample(events: Union[np.ndarray, Sequence[MboEvent]], session: Tuple[int, int],
             grid_ns: int = GRID_NS) -> BinTable:
    """Replay ``events`` and sample the book onto a uniform grid over ``session``.

    ``session = (t0, t1)`` in UTC nanoseconds, already aligned to the
    session open; ``t1 - t0`` must be a whole number of bins. Events before
    ``t0`` still build book state but contribute no flow; events at or after
    ``t1`` are ignored. Both are counted in ``n_dropped``.
    """
    t0, t1 = int(session[0]), int(session[1])
    if grid_ns <= 0:
        raise ValueError("grid_ns must be > 0")
    if t1 <= t0 or (t1 - t0) % grid_ns:
        raise ValueError("session must span a positive whole number of bins")
    if not isinstance(events, np.ndarray):
        events = events_to_array(list(events))
    n_bins = (t1 - t0) // grid_ns
    bins = empty_bins(n_bins, t0, grid_ns)

    ts = events["ts_event"].astype(np.int64)
    if len(ts) and np.any(np.diff(ts) < 0):
        raise ValueError("events must be sorted by ts_event")
    keep = int(np.searchsorted(ts, t1, side="left"))
    first = int(np.searchsorted(ts, t0, side="left"))
    bins.n_dropped = first + (len(ts) - keep)
    if bins.n_dropped:
        logger.info("%d events outside session excluded from bins", bins.n_dropped)
    if keep == 0:
        return bins
    events, ts = events[:keep], ts[:keep]
    rep = replay(events)
    bins.book_errors = rep.error_counts()

    # flow of in-session events
    idx = (ts[first:] - t0) // grid_ns
    sl = slice(first, keep)
    sign = np.where(rep.side[sl] == 1, 1, np.where(rep.side[sl] == 2, -1, 0))
    ofi = sign * (rep.adds_L1[sl] - rep.cancels_L1[sl] - rep.exec_L1[sl])
    bins.adds_L1 = np.bincount(idx, weights=rep.adds_L1[sl], minlength=n_bins).astype(np.int64)
    bins.cancels_L1 = np.bincount(idx, weights=rep.cancels_L1[sl], minlength=n_bins).astype(np.int64)
    bins.exec_L1 = np.bincount(idx, weights=rep.exec_L1[sl], minlength=n_bins).astype(np.int64)
    bins.ofi = np.bincount(idx, weights=ofi, minlength=n_bins).astype(np.int64)
    bins.event_count = np.bincount(idx, minlength=n_bins).astype(np.int64)

    # end-of-bin snapshot = state after the last event strictly before bin end
    ends = bins.bin_start + grid_ns
    last = np.searchsorted(ts, ends, side="left") - 1
    has = last >= 0
    li = last[has]
    bins.bid_px[has] = rep.bid_px[li]
    bins.ask_px[has] = rep.ask_px[li]
    bins.bid_depth[has] = rep.bid_depth[li]
    bins.ask_depth[has] = rep.ask_depth[li]
    return bins


def warm_start(bins: BinTable, warm: int = DEFAULT_WARM_BINS) -> BinTable:
    """Flag the first ``warm`` bins as excluded from modelling."""
    if warm < 0:
        raise ValueError("warm must be >= 0")
    if warm >= len(bins):
        logger.warning("warm start of %d bins covers all %d bins", warm, len(bins))
    excluded = bins.excluded.copy()
    excluded[:warm] = True
    return replace(bins, excluded=excluded)


def write_bins_csv(bins: BinTable, path: Union[str, Path]) -> None:
    lines = [",".join(BIN_CSV_COLUMNS)]
    for i in range(len(bins)):
        bid = int(bins.bid_px[i])
        ask = int(bins.ask_px[i])
        lines.append(
            f"{int(bins.bin_start[i])},{bid if bid else ''},{ask if ask else ''},"
            f"{int(bins.bid_depth[i])},{int(bins.ask_depth[i])},{int(bins.adds_L1[i])},"
            f"{int(bins.cancels_L1[i])},{int(bins.exec_L1[i])},{int(bins.event_count[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_bins_csv(path: Union[str, Path], grid_ns: int = GRID_NS) -> BinTable:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or tuple(rows[0].split(",")) != BIN_CSV_COLUMNS:
        raise ValueError("not a bin dump: unexpected header")
    data = np.array([[int(v) if v else 0 for v in r.split(",")] for r in rows[1:]],
                    dtype=np.int64).reshape(-1, len(BIN_CSV_COLUMNS))
    bins = empty_bins(len(data), 0, grid_ns)
    (bins.bin_start, bins.bid_px, bins.ask_px, bins.bid_depth, bins.ask_depth,
     bins.adds_L1, bins.cancels_L1, bins.exec_L1, bins.event_count) = (
        np.ascontiguousarray(data[:, j]) for j in range(len(BIN_CSV_COLUMNS)))
    return bins
