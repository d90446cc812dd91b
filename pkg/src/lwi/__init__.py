"""Liquidity withdrawal index (LWI) from market-by-order data.

Pipeline: MBO ingestion (``mbo``) -> order-book replay (``book``) -> 250 ms
grid (``grid``) -> feature frames and horizon targets (``features``) ->
diagnostics and screening (``stats``) -> forecasting models (``models``) ->
walk-forward evaluation (``evalkit``). ``cli`` wires the stages together.
"""

__version__ = "0.1.0"
