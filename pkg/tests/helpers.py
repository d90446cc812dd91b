"""Shared builders for synthetic inputs used across test modules."""

from dataclasses import fields, replace

import numpy as np

from lwi.grid import BinTable, empty_bins
from lwi.mbo import SynthParams

T0 = SynthParams().start_ns


def random_bins(seed, n):
    """Random but internally consistent L1 table (both sides quoted)."""
    rng = np.random.default_rng(seed)
    b = empty_bins(n, T0)
    b.bid_px[:] = 10_000 + np.cumsum(rng.integers(-1, 2, n))
    b.ask_px[:] = b.bid_px + rng.integers(1, 4, n)
    b.bid_depth[:] = rng.integers(0, 500, n)
    b.ask_depth[:] = rng.integers(0, 500, n)
    b.adds_L1[:] = rng.poisson(30, n)
    b.cancels_L1[:] = rng.poisson(25, n)
    b.exec_L1[:] = rng.poisson(3, n)
    b.ofi[:] = rng.integers(-80, 80, n)
    return b


def truncate(bins: BinTable, t: int) -> BinTable:
    """Bin table holding rows 0..t only."""
    kw = {f.name: getattr(bins, f.name)[:t + 1] for f in fields(bins)
          if isinstance(getattr(bins, f.name), np.ndarray)}
    return replace(bins, **kw)


def shuffle_inside(y, lo, hi, seed):
    """Copy of ``y`` with the values in ``[lo, hi)`` permuted."""
    y = np.array(y)
    seg = y[lo:hi].copy()
    np.random.default_rng(seed).shuffle(seg)
    y[lo:hi] = seg
    return y
