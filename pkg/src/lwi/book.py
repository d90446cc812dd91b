"""Limit-order-book state machine over MBO events.

Two implementations of the same rules live here:

* ``BookEngine`` -- per-event API (``apply`` / ``snapshot``) for callers
  that consume one event at a time.
* ``replay`` -- a compiled batch kernel over ``EVENT_DTYPE`` arrays that
  returns the L1 state and flow classification after every event. The
  feature pipeline uses this path.

Rules shared by both:

* Flow is classified against the best price of the order's side *before*
  the event. An Add at or through the best bid/ask counts as L1 add.
* Cancel removes ``size`` shares (the whole order when size is 0 or
  covers the remainder). Trade and Fill both execute against the resting
  order named by ``order_id`` and are reported as executions.
* Modify is cancel-old-then-add-new; the L1 cancel and add legs are
  netted so that each event reports at most one positive flow.
* Unknown order ids, duplicate Adds and invalid events leave the book
  untouched and are counted.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from numba import njit
from numba.typed import Dict as NbDict
from numba import types

from .mbo import Action, MboEvent, Side

ERR_NONE = 0
ERR_UNKNOWN_ORDER = 1
ERR_DUPLICATE_ADD = 2
ERR_INVALID = 3
ERROR_NAMES = {ERR_UNKNOWN_ORDER: "unknown_order", ERR_DUPLICATE_ADD: "duplicate_add",
               ERR_INVALID: "invalid_event"}


@dataclass
class OrderRec:
    price: int
    size: int
    side: Side


@dataclass(frozen=True)
class BookL1:
    best_bid_px: Optional[int] = None
    best_ask_px: Optional[int] = None
    bid_depth_L1: int = 0
    ask_depth_L1: int = 0

    @property
    def depth_L1(self) -> int:
        return self.bid_depth_L1 + self.ask_depth_L1


@dataclass(frozen=True)
class FlowDelta:
    adds_L1: int = 0
    cancels_L1: int = 0
    exec_L1: int = 0
    side: Side = Side.NONE


_EMPTY_DELTA = FlowDelta()


class BookEngine:
    """Incremental order book for one symbol."""

    def __init__(self):
        self._orders: Dict[int, OrderRec] = {}
        self._levels: Dict[Side, Dict[int, int]] = {Side.BID: {}, Side.ASK: {}}
        # bid heap holds negated prices; entries may be stale (lazy deletion)
        self._heaps: Dict[Side, List[int]] = {Side.BID: [], Side.ASK: []}
        self.errors: Counter = Counter()

    # -- level bookkeeping -------------------------------------------------
    def _best(self, side: Side) -> Optional[int]:
        levels = self._levels[side]
        heap = self._heaps[side]
        sign = -1 if side == Side.BID else 1
        while heap and (sign * heap[0]) not in levels:
            heapq.heappop(heap)
        return sign * heap[0] if heap else None

    def _level_add(self, side: Side, price: int, qty: int) -> None:
        levels = self._levels[side]
        if price in levels:
            levels[price] += qty
            return
        levels[price] = qty
        heap = self._heaps[side]
        heapq.heappush(heap, -price if side == Side.BID else price)
        if len(heap) > 4 * len(levels) + 64:
            sign = -1 if side == Side.BID else 1
            heap[:] = [sign * p for p in levels]
            heapq.heapify(heap)

    def _level_remove(self, side: Side, price: int, qty: int) -> None:
        levels = self._levels[side]
        left = levels[price] - qty
        if left:
            levels[price] = left
        else:
            del levels[price]

    def _fail(self, code: int) -> FlowDelta:
        self.errors[ERROR_NAMES[code]] += 1
        return _EMPTY_DELTA

    # -- public API --------------------------------------------------------
    def apply(self, event: MboEvent) -> FlowDelta:
        act = event.action
        if act == Action.ADD:
            if event.size <= 0 or event.price <= 0 or event.side == Side.NONE:
                return self._fail(ERR_INVALID)
            if event.order_id in self._orders:
                return self._fail(ERR_DUPLICATE_ADD)
            side = Side(event.side)
            best = self._best(side)
            self._orders[event.order_id] = OrderRec(event.price, event.size, side)
            self._level_add(side, event.price, event.size)
            at_l1 = best is None or _at_or_better(side, event.price, best)
            return FlowDelta(adds_L1=event.size if at_l1 else 0, side=side)

        if act == Action.CLEAR:
            self._orders.clear()
            for side in (Side.BID, Side.ASK):
                self._levels[side].clear()
                self._heaps[side].clear()
            return _EMPTY_DELTA

        if act == Action.NONE:
            return _EMPTY_DELTA

        rec = self._orders.get(event.order_id)
        if rec is None:
            return self._fail(ERR_UNKNOWN_ORDER)
        side = rec.side
        best = self._best(side)

        if act == Action.CANCEL:
            qty = event.size if 0 < event.size < rec.size else rec.size
            self._take(event.order_id, rec, qty)
            return FlowDelta(cancels_L1=qty if rec.price == best else 0, side=side)

        if act in (Action.TRADE, Action.FILL):
            qty = min(event.size, rec.size)
            if qty <= 0:
                return self._fail(ERR_INVALID)
            self._take(event.order_id, rec, qty)
            return FlowDelta(exec_L1=qty if rec.price == best else 0, side=side)

        # Modify
        if event.size > 0 and event.price <= 0:
            return self._fail(ERR_INVALID)
        old_l1 = rec.size if rec.price == best else 0
        self._level_remove(side, rec.price, rec.size)
        if event.size == 0:
            del self._orders[event.order_id]
            new_l1 = 0
        else:
            rec.price, rec.size = event.price, event.size
            self._level_add(side, rec.price, rec.size)
            new_l1 = rec.size if _at_or_better(side, rec.price, best) else 0
        net = new_l1 - old_l1
        return FlowDelta(adds_L1=max(net, 0), cancels_L1=max(-net, 0), side=side)

    def _take(self, order_id: int, rec: OrderRec, qty: int) -> None:
        self._level_remove(rec.side, rec.price, qty)
        rec.size -= qty
        if rec.size == 0:
            del self._orders[order_id]

    def snapshot(self) -> BookL1:
        bid = self._best(Side.BID)
        ask = self._best(Side.ASK)
        return BookL1(
            best_bid_px=bid,
            best_ask_px=ask,
            bid_depth_L1=self._levels[Side.BID][bid] if bid is not None else 0,
            ask_depth_L1=self._levels[Side.ASK][ask] if ask is not None else 0,
        )

    def level_size(self, side: Side, price: int) -> int:
        return self._levels[side].get(price, 0)

    def order(self, order_id: int) -> Optional[OrderRec]:
        rec = self._orders.get(order_id)
        return None if rec is None else OrderRec(rec.price, rec.size, rec.side)

    def __len__(self) -> int:
        return len(self._orders)


def _at_or_better(side: Side, price: int, best: Optional[int]) -> bool:
    if best is None:
        return True
    return price >= best if side == Side.BID else price <= best


# ---------------------------------------------------------------------------
# batch replay

@dataclass
class ReplayResult:
    """Per-event book state after each event (0 price = side empty)."""
    bid_px: np.ndarray
    ask_px: np.ndarray
    bid_depth: np.ndarray
    ask_depth: np.ndarray
    adds_L1: np.ndarray
    cancels_L1: np.ndarray
    exec_L1: np.ndarray
    side: np.ndarray
    error: np.ndarray

    def __len__(self) -> int:
        return len(self.bid_px)

    def error_counts(self) -> Dict[str, int]:
        codes = np.bincount(self.error, minlength=4)
        return {ERROR_NAMES[c]: int(codes[c]) for c in ERROR_NAMES if codes[c]}

    def l1_at(self, i: int) -> BookL1:
        bid, ask = int(self.bid_px[i]), int(self.ask_px[i])
        return BookL1(bid or None, ask or None, int(self.bid_depth[i]), int(self.ask_depth[i]))


def replay(events: np.ndarray) -> ReplayResult:
    """Replay an ``EVENT_DTYPE`` array from an empty book."""
    out = _replay_kernel(
        np.ascontiguousarray(events["order_id"]).view(np.int64),
        np.ascontiguousarray(events["price"], dtype=np.int64),
        np.ascontiguousarray(events["size"], dtype=np.int64),
        np.ascontiguousarray(events["side"], dtype=np.int64),
        np.ascontiguousarray(events["action"], dtype=np.int64),
    )
    return ReplayResult(*out)


@njit(cache=True)
def _heap_best(heap, levels, sign):
    while len(heap) > 0 and (sign * heap[0]) not in levels:
        heapq.heappop(heap)
    if len(heap) == 0:
        return 0
    return sign * heap[0]


@njit(cache=True)
def _heap_level_add(heap, levels, price, qty, sign):
    if price in levels:
        levels[price] += qty
        return
    levels[price] = qty
    heapq.heappush(heap, sign * price)
    if len(heap) > 4 * len(levels) + 64:
        heap.clear()
        for p in levels.keys():
            heap.append(sign * p)
        heapq.heapify(heap)


@njit(cache=True)
def _level_remove(levels, price, qty):
    left = levels[price] - qty
    if left != 0:
        levels[price] = left
    else:
        del levels[price]


@njit(cache=True)
def _better_eq(side, price, best):
    if best == 0:
        return True
    if side == 1:
        return price >= best
    return price <= best


@njit(cache=True)
def _replay_kernel(oid, px, sz, sd, ac):
    n = oid.shape[0]
    bid_px = np.zeros(n, np.int64)
    ask_px = np.zeros(n, np.int64)
    bid_dp = np.zeros(n, np.int64)
    ask_dp = np.zeros(n, np.int64)
    adds = np.zeros(n, np.int64)
    cans = np.zeros(n, np.int64)
    exes = np.zeros(n, np.int64)
    fside = np.zeros(n, np.int64)
    err = np.zeros(n, np.int64)

    slot_of = NbDict.empty(key_type=types.int64, value_type=types.int64)
    cap = 1024
    o_px = np.zeros(cap, np.int64)
    o_sz = np.zeros(cap, np.int64)
    o_sd = np.zeros(cap, np.int64)
    free = np.zeros(cap, np.int64)
    nfree = 0
    nslots = 0
    bid_lv = NbDict.empty(key_type=types.int64, value_type=types.int64)
    ask_lv = NbDict.empty(key_type=types.int64, value_type=types.int64)
    bid_heap = [np.int64(0)]
    bid_heap.pop()
    ask_heap = [np.int64(0)]
    ask_heap.pop()

    for i in range(n):
        a = ac[i]
        if a == 1:  # Add
            s = sd[i]
            if sz[i] <= 0 or px[i] <= 0 or (s != 1 and s != 2):
                err[i] = 3
            elif oid[i] in slot_of:
                err[i] = 2
            else:
                if nfree > 0:
                    nfree -= 1
                    k = free[nfree]
                else:
                    if nslots >= o_px.shape[0]:
                        o_px = np.concatenate((o_px, np.zeros(nslots, np.int64)))
                        o_sz = np.concatenate((o_sz, np.zeros(nslots, np.int64)))
                        o_sd = np.concatenate((o_sd, np.zeros(nslots, np.int64)))
                        free = np.concatenate((free, np.zeros(nslots, np.int64)))
                    k = nslots
                    nslots += 1
                slot_of[oid[i]] = k
                o_px[k] = px[i]
                o_sz[k] = sz[i]
                o_sd[k] = s
                if s == 1:
                    best = _heap_best(bid_heap, bid_lv, -1)
                    _heap_level_add(bid_heap, bid_lv, px[i], sz[i], -1)
                else:
                    best = _heap_best(ask_heap, ask_lv, 1)
                    _heap_level_add(ask_heap, ask_lv, px[i], sz[i], 1)
                if _better_eq(s, px[i], best):
                    adds[i] = sz[i]
                fside[i] = s
        elif a == 4:  # Clear
            slot_of.clear()
            bid_lv.clear()
            ask_lv.clear()
            bid_heap.clear()
            ask_heap.clear()
            nfree = 0
            nslots = 0
        elif a == 0:
            pass
        elif oid[i] not in slot_of:
            err[i] = 1
        else:
            k = slot_of[oid[i]]
            s = o_sd[k]
            if s == 1:
                best = _heap_best(bid_heap, bid_lv, -1)
                lv = bid_lv
            else:
                best = _heap_best(ask_heap, ask_lv, 1)
                lv = ask_lv
            at_best = o_px[k] == best
            if a == 2 or a == 5 or a == 6:
                if a == 2:
                    qty = sz[i] if (sz[i] > 0 and sz[i] < o_sz[k]) else o_sz[k]
                else:
                    qty = min(sz[i], o_sz[k])
                if qty <= 0:
                    err[i] = 3
                else:
                    _level_remove(lv, o_px[k], qty)
                    o_sz[k] -= qty
                    if o_sz[k] == 0:
                        del slot_of[oid[i]]
                        free[nfree] = k
                        nfree += 1
                    if at_best:
                        if a == 2:
                            cans[i] = qty
                        else:
                            exes[i] = qty
                    fside[i] = s
            elif a == 3:  # Modify
                if sz[i] > 0 and px[i] <= 0:
                    err[i] = 3
                else:
                    old_l1 = o_sz[k] if at_best else 0
                    _level_remove(lv, o_px[k], o_sz[k])
                    new_l1 = 0
                    if sz[i] == 0:
                        del slot_of[oid[i]]
                        free[nfree] = k
                        nfree += 1
                    else:
                        o_px[k] = px[i]
                        o_sz[k] = sz[i]
                        if s == 1:
                            _heap_level_add(bid_heap, bid_lv, px[i], sz[i], -1)
                        else:
                            _heap_level_add(ask_heap, ask_lv, px[i], sz[i], 1)
                        if _better_eq(s, px[i], best):
                            new_l1 = sz[i]
                    net = new_l1 - old_l1
                    if net > 0:
                        adds[i] = net
                    elif net < 0:
                        cans[i] = -net
                    fside[i] = s
            else:
                err[i] = 3

        b = _heap_best(bid_heap, bid_lv, -1)
        if b != 0:
            bid_px[i] = b
            bid_dp[i] = bid_lv[b]
        q = _heap_best(ask_heap, ask_lv, 1)
        if q != 0:
            ask_px[i] = q
            ask_dp[i] = ask_lv[q]

    return bid_px, ask_px, bid_dp, ask_dp, adds, cans, exes, fside, err
