"""Synthetic per-bin series with known structure.

These generate ``BaseSeries`` directly (no order book) so that the
predictable part of LWI is controlled exactly: a slow latent level, a
regime shift triggered when L1 depth falls below a threshold, and
right-skewed bin noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
from scipy.signal import lfilter

from .features import (CONSENSUS_FEATURES, SCREEN_FEATURES, BaseSeries, FeatureFrame,
                       FeatureSpec, frame_from_base)
from .grid import DEFAULT_WARM_BINS, GRID_NS

SESSION_BINS = 14_400


def ar1(rng: np.random.Generator, n: int, phi: float, sd: float = 1.0) -> np.ndarray:
    """Stationary Gaussian AR(1) with marginal standard deviation ``sd``."""
    e = rng.standard_normal(n) * sd * np.sqrt(1 - phi ** 2)
    x0 = rng.standard_normal() * sd
    out, _ = lfilter([1.0], [1.0, -phi], e, zi=[phi * x0])
    return out


@dataclass(frozen=True)
class RegimeParams:
    """LWI = max(0, level + latent + jump·1{depth < threshold} + noise).

    ``latent`` is AR(1) with coefficient ``latent_phi``. Log depth follows
    a two-state Markov chain (normal / thin, with per-bin switching
    probabilities ``p_enter_thin`` and ``p_exit_thin``) that shifts it down
    by ``thin_gap``, plus AR(1) wobble. The jump fires while depth is below
    the geometric midpoint of the two state levels. Noise is exponential
    with mean ``noise_mean`` minus that mean (zero-mean, right-skewed).
    """
    level: float = 1.0
    latent_phi: float = 0.997
    latent_sd: float = 0.25
    depth_mean: float = 800.0
    depth_phi: float = 0.9
    depth_log_sd: float = 0.15
    thin_gap: float = 1.2
    p_enter_thin: float = 0.001
    p_exit_thin: float = 0.0025
    jump: float = 0.9
    noise_mean: float = 0.85


def markov_states(rng: np.random.Generator, n: int, p_enter: float, p_exit: float) -> np.ndarray:
    """Two-state chain started from its stationary distribution."""
    u = rng.random(n)
    state = np.empty(n, bool)
    s = rng.random() < p_enter / (p_enter + p_exit)
    for i in range(n):
        s = (u[i] >= p_exit) if s else (u[i] < p_enter)
        state[i] = s
    return state


def regime_base(seed: int, n_bins: int = SESSION_BINS,
                params: RegimeParams = RegimeParams()) -> BaseSeries:
    rng = np.random.default_rng(seed)
    latent = ar1(rng, n_bins, params.latent_phi, params.latent_sd)
    state = markov_states(rng, n_bins, params.p_enter_thin, params.p_exit_thin)
    log_depth = ar1(rng, n_bins, params.depth_phi, params.depth_log_sd) - params.thin_gap * state
    depth = np.round(params.depth_mean * np.exp(log_depth))
    thin = depth < params.depth_mean * np.exp(-params.thin_gap / 2)
    noise = rng.exponential(params.noise_mean, n_bins) - params.noise_mean
    lwi = np.maximum(0.0, params.level + latent + params.jump * thin + noise)

    bid_share = 1 / (1 + np.exp(-ar1(rng, n_bins, 0.9, 1.0)))
    bid = np.round(depth * bid_share)
    ask = depth - bid
    qi = np.where(depth > 0, (bid - ask) / np.maximum(depth, 1), 0.0)
    adds = rng.poisson(8.0, n_bins).astype(float)
    cancels = rng.poisson(6.0, n_bins).astype(float)
    spread = 0.01 * (1 + rng.poisson(0.2, n_bins))
    mid = 120.0 * np.exp(np.cumsum(rng.standard_normal(n_bins) * 1e-5))
    ofi = rng.normal(0, 20, n_bins).round()
    return BaseSeries(lwi, qi, depth, spread, ofi, adds, cancels, mid, 4)


def regime_frame(seed: int, n_bins: int = SESSION_BINS, params: RegimeParams = RegimeParams(),
                 features: Sequence[str] = CONSENSUS_FEATURES,
                 horizons: Sequence[int] = (1, 4, 8, 20), symbol: str = "SYN",
                 warm: int = DEFAULT_WARM_BINS) -> FeatureFrame:
    base = regime_base(seed, n_bins, params)
    excluded = np.zeros(n_bins, bool)
    excluded[:warm] = True
    return frame_from_base(base, FeatureSpec(tuple(features), tuple(horizons)), symbol,
                           excluded, 0, GRID_NS)


def noise_base(seed: int, n_bins: int = SESSION_BINS) -> BaseSeries:
    """Mutually independent base series with no structure."""
    rng = np.random.default_rng(seed)
    depth = rng.poisson(800, n_bins).astype(float)
    bid = rng.binomial(depth.astype(int), 0.5).astype(float)
    return BaseSeries(
        LWI=rng.exponential(1.0, n_bins),
        QI=(2 * bid - depth) / np.maximum(depth, 1),
        depth_L1=depth,
        spread=0.01 * (1 + rng.poisson(0.5, n_bins)),
        OFI=rng.normal(0, 20, n_bins).round(),
        adds=rng.poisson(8.0, n_bins).astype(float),
        cancels=rng.poisson(6.0, n_bins).astype(float),
        mid=120.0 * np.exp(np.cumsum(rng.standard_normal(n_bins) * 1e-4)),
        bins_per_second=4,
    )


def planted_frame(seed: int, planted: Dict[str, float], k: int = 4,
                  n_bins: int = SESSION_BINS, noise_sd: float = 0.5, symbol: str = "SYN",
                  warm: int = DEFAULT_WARM_BINS) -> FeatureFrame:
    """Frame over independent base series whose target ``k`` is a planted
    linear combination of standardised features plus Gaussian noise."""
    base = noise_base(seed, n_bins)
    excluded = np.zeros(n_bins, bool)
    excluded[:warm] = True
    frame = frame_from_base(base, FeatureSpec(SCREEN_FEATURES, (k,)), symbol, excluded, 0, GRID_NS)
    rng = np.random.default_rng(seed + 1)
    rows = frame.modelable_rows
    y = np.full(len(frame), np.nan)
    signal = np.zeros(len(rows))
    for name, w in planted.items():
        col = frame.columns[name][rows]
        signal += w * (col - col.mean()) / col.std()
    y[rows] = signal + noise_sd * rng.standard_normal(len(rows))
    return frame.with_target(k, y)
