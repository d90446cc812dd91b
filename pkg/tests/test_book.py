from collections import defaultdict

import numpy as np
import pytest

from lwi.book import BookEngine, BookL1, FlowDelta, replay
from lwi.mbo import Action, MboEvent, Side, SynthParams, array_to_events, events_to_array, synth_stream
from oracles import naive_replay

_seq = iter(range(1, 10**9))


def ev(action, side=Side.NONE, price=0, size=0, oid=0):
    return MboEvent(next(_seq), oid, "X", price, size, side, action, next(_seq))


def add(side, price, size, oid):
    return ev(Action.ADD, side, price, size, oid)


def test_single_add_and_cancel():
    b = BookEngine()
    assert b.snapshot() == BookL1(None, None, 0, 0)
    d = b.apply(add(Side.BID, 100, 50, 1))
    assert d == FlowDelta(adds_L1=50, side=Side.BID)
    assert b.snapshot() == BookL1(100, None, 50, 0)
    d = b.apply(ev(Action.CANCEL, Side.BID, 100, 50, 1))
    assert d == FlowDelta(cancels_L1=50, side=Side.BID)
    assert b.snapshot() == BookL1(None, None, 0, 0)
    assert len(b) == 0


def test_same_price_aggregates():
    b = BookEngine()
    b.apply(add(Side.BID, 100, 50, 1))
    b.apply(add(Side.BID, 100, 30, 2))
    assert b.snapshot().bid_depth_L1 == 80


def test_better_price_becomes_l1():
    b = BookEngine()
    b.apply(add(Side.BID, 100, 50, 1))
    b.apply(add(Side.BID, 101, 10, 2))
    assert (b.snapshot().best_bid_px, b.snapshot().bid_depth_L1) == (101, 10)


def test_add_behind_best_is_not_l1_flow():
    b = BookEngine()
    b.apply(add(Side.ASK, 200, 5, 1))
    assert b.apply(add(Side.ASK, 201, 7, 2)).adds_L1 == 0
    assert b.apply(add(Side.ASK, 199, 3, 3)).adds_L1 == 3   # inside the spread
    assert b.apply(ev(Action.CANCEL, size=0, oid=2)).cancels_L1 == 0   # cancel behind best


def test_partial_cancel_and_executions():
    b = BookEngine()
    b.apply(add(Side.ASK, 200, 50, 1))
    assert b.apply(ev(Action.CANCEL, size=20, oid=1)).cancels_L1 == 20
    assert b.order(1).size == 30
    assert b.apply(ev(Action.TRADE, size=10, oid=1)) == FlowDelta(exec_L1=10, side=Side.ASK)
    assert b.apply(ev(Action.FILL, size=100, oid=1)) == FlowDelta(exec_L1=20, side=Side.ASK)
    assert b.snapshot() == BookL1(None, None, 0, 0)


def test_modify_nets_cancel_and_add_legs():
    b = BookEngine()
    b.apply(add(Side.BID, 100, 50, 1))
    b.apply(add(Side.BID, 99, 50, 2))
    # size up at best: +20 net add
    assert b.apply(ev(Action.MODIFY, price=100, size=70, oid=1)) == FlowDelta(adds_L1=20, side=Side.BID)
    # move away from best: whole size leaves L1
    assert b.apply(ev(Action.MODIFY, price=98, size=70, oid=1)) == FlowDelta(cancels_L1=70, side=Side.BID)
    assert b.snapshot() == BookL1(99, None, 50, 0)
    # move through best: becomes new L1
    assert b.apply(ev(Action.MODIFY, price=101, size=5, oid=1)) == FlowDelta(adds_L1=5, side=Side.BID)
    assert b.snapshot() == BookL1(101, None, 5, 0)
    # size zero removes the order
    assert b.apply(ev(Action.MODIFY, price=101, size=0, oid=1)) == FlowDelta(cancels_L1=5, side=Side.BID)
    assert b.order(1) is None


def test_unknown_and_duplicate_orders_are_counted_and_ignored():
    b = BookEngine()
    b.apply(add(Side.BID, 100, 50, 1))
    before = b.snapshot()
    assert b.apply(ev(Action.CANCEL, size=5, oid=99)) == FlowDelta()
    assert b.apply(add(Side.BID, 105, 5, 1)) == FlowDelta()
    assert b.apply(add(Side.BID, 105, 0, 3)) == FlowDelta()
    assert b.snapshot() == before
    assert b.errors == {"unknown_order": 1, "duplicate_add": 1, "invalid_event": 1}


def test_clear_book():
    b = BookEngine()
    b.apply(add(Side.BID, 100, 50, 1))
    b.apply(add(Side.ASK, 101, 50, 2))
    b.apply(ev(Action.CLEAR))
    assert b.snapshot() == BookL1() and len(b) == 0
    b.apply(add(Side.BID, 90, 1, 1))   # ids are free again
    assert b.snapshot().best_bid_px == 90


def _engine_run(events):
    b = BookEngine()
    snaps, deltas = [], []
    for e in events:
        deltas.append(b.apply(e))
        snaps.append(b.snapshot())
    return b, snaps, deltas


def test_engine_matches_batch_kernel():
    arr = synth_stream(21, 120.0, max_events=20_000)
    b, snaps, deltas = _engine_run(array_to_events(arr, "S"))
    rep = replay(arr)
    assert [rep.l1_at(i) for i in range(len(arr))] == snaps
    assert np.array_equal(rep.adds_L1, [d.adds_L1 for d in deltas])
    assert np.array_equal(rep.cancels_L1, [d.cancels_L1 for d in deltas])
    assert np.array_equal(rep.exec_L1, [d.exec_L1 for d in deltas])
    assert np.array_equal(rep.side, [int(d.side) for d in deltas])


def test_kernel_matches_naive_oracle_with_errors_and_clears():
    rng = np.random.default_rng(0)
    n = 5000
    arr = np.zeros(n, dtype=events_to_array([]).dtype)
    arr["order_id"] = rng.integers(1, 40, n)
    arr["side"] = rng.integers(0, 3, n)
    arr["action"] = rng.choice([1, 1, 1, 2, 3, 4, 5, 6, 0], n, p=[.2, .2, .2, .15, .1, .01, .05, .05, .04])
    arr["price"] = rng.integers(-1, 12, n)
    arr["size"] = rng.integers(0, 30, n)
    rep = replay(arr)
    got = (rep.bid_px, rep.ask_px, rep.bid_depth, rep.ask_depth)
    for a, b in zip(got, naive_replay(arr)):
        assert np.array_equal(a, b)
    assert sum(rep.error_counts().values()) > 0


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_kernel_matches_naive_oracle_on_synthetic_streams(seed):
    arr = synth_stream(seed, 1250.0, max_events=100_000)
    rep = replay(arr)
    for a, b in zip((rep.bid_px, rep.ask_px, rep.bid_depth, rep.ask_depth), naive_replay(arr)):
        assert np.array_equal(a, b)


def test_flow_fields_nonnegative_and_exclusive():
    rep = replay(synth_stream(5, 600.0))
    flows = np.stack([rep.adds_L1, rep.cancels_L1, rep.exec_L1])
    assert flows.min() >= 0
    assert np.all((flows > 0).sum(axis=0) <= 1)


def test_level_conservation_on_random_stream():
    arr = synth_stream(8, 200.0, SynthParams(price_move_prob=0.05), max_events=15_000)
    events = array_to_events(arr, "S")
    b = BookEngine()
    net = defaultdict(int)
    live = {}
    for i, e in enumerate(events):
        if e.action == Action.ADD:
            net[(e.side, e.price)] += e.size
            live[e.order_id] = [e.side, e.price, e.size]
        elif e.action in (Action.CANCEL, Action.TRADE, Action.FILL, Action.MODIFY):
            side, price, size = live[e.order_id]
            if e.action == Action.CANCEL:
                qty = e.size if 0 < e.size < size else size
            elif e.action == Action.MODIFY:
                qty = size
            else:
                qty = min(e.size, size)
            net[(side, price)] -= qty
            live[e.order_id][2] -= qty
            if e.action == Action.MODIFY and e.size > 0:
                net[(side, e.price)] += e.size
                live[e.order_id] = [side, e.price, e.size]
            elif live[e.order_id][2] == 0:
                del live[e.order_id]
        b.apply(e)
        if i % 500 == 0 or i == len(events) - 1:
            for (side, price), q in net.items():
                assert b.level_size(side, price) == q


def test_replay_is_deterministic():
    arr = synth_stream(9, 100.0)
    a, b = replay(arr), replay(arr)
    for name in ("bid_px", "ask_px", "bid_depth", "ask_depth", "adds_L1", "cancels_L1", "exec_L1"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
