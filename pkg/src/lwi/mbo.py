"""Market-by-order event ingestion.

Parses and writes MBO records in two interchange formats (CSV with the
vendor's column names, and a fixed-layout little-endian binary file) and
generates seeded synthetic MBO streams for tests and demos.

Events travel through the pipeline in two shapes: ``MboEvent`` objects for
the per-event API, and numpy structured arrays (``EVENT_DTYPE``) for bulk
replay. ``events_to_array`` / ``array_to_events`` convert between them.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np
from numba import njit


class Side(enum.IntEnum):
    NONE = 0
    BID = 1
    ASK = 2


class Action(enum.IntEnum):
    NONE = 0
    ADD = 1
    CANCEL = 2
    MODIFY = 3
    CLEAR = 4
    TRADE = 5
    FILL = 6


_SIDE_CODES = {"B": Side.BID, "A": Side.ASK, "N": Side.NONE,
               "BID": Side.BID, "ASK": Side.ASK, "NONE": Side.NONE}
_ACTION_CODES = {"A": Action.ADD, "C": Action.CANCEL, "M": Action.MODIFY,
                 "R": Action.CLEAR, "T": Action.TRADE, "F": Action.FILL,
                 "N": Action.NONE, "ADD": Action.ADD, "CANCEL": Action.CANCEL,
                 "MODIFY": Action.MODIFY, "CLEAR": Action.CLEAR,
                 "CLEARBOOK": Action.CLEAR, "TRADE": Action.TRADE,
                 "FILL": Action.FILL, "NONE": Action.NONE}
_SIDE_LETTER = {Side.BID: "B", Side.ASK: "A", Side.NONE: "N"}
_ACTION_LETTER = {Action.ADD: "A", Action.CANCEL: "C", Action.MODIFY: "M",
                  Action.CLEAR: "R", Action.TRADE: "T", Action.FILL: "F",
                  Action.NONE: "N"}

REQUIRED_COLUMNS = ("ts_event", "symbol", "order_id", "price", "size", "side",
                    "action", "sequence")
# Column order written by write_csv; the extra vendor fields are passthrough.
CSV_COLUMNS = ("ts_recv", "ts_event", "rtype", "publisher_id", "instrument_id",
               "action", "side", "price", "size", "channel_id", "order_id",
               "flags", "ts_in_delta", "sequence", "symbol")

BINARY_MAGIC = b"MBO1"
# Packed record layout of the binary format; also the in-memory batch layout.
EVENT_DTYPE = np.dtype([
    ("ts_event", "<u8"),
    ("order_id", "<u8"),
    ("price", "<i8"),
    ("size", "<u4"),
    ("side", "u1"),
    ("action", "u1"),
    ("sequence", "<u8"),
])
assert EVENT_DTYPE.itemsize == 38

U64_MAX = 2**64 - 1
U32_MAX = 2**32 - 1
I64_MIN, I64_MAX = -(2**63), 2**63 - 1

_INT_RE = re.compile(r"[+-]?[0-9]+\Z")


class MboFormatError(ValueError):
    """Fatal input problem: bad header, bad magic, truncated binary file."""


@dataclass(frozen=True)
class MboEvent:
    ts_event: int
    order_id: int
    symbol: str
    price: int
    size: int
    side: Side
    action: Action
    sequence: int


@dataclass(frozen=True)
class RowError:
    row: int
    message: str


@dataclass
class ParseResult:
    events: List[MboEvent] = field(default_factory=list)
    errors: List[RowError] = field(default_factory=list)
    n_rows: int = 0

    @property
    def n_errors(self) -> int:
        return len(self.errors)

    def by_symbol(self) -> Dict[str, List[MboEvent]]:
        out: Dict[str, List[MboEvent]] = {}
        for ev in self.events:
            out.setdefault(ev.symbol, []).append(ev)
        return out


def _parse_int(text: str, name: str, lo: int, hi: int) -> int:
    text = text.strip()
    if not _INT_RE.match(text):
        raise ValueError(f"{name}: not an integer: {text[:40]!r}")
    value = int(text)
    if value < lo or value > hi:
        raise ValueError(f"{name}: {value} outside [{lo}, {hi}]")
    return value


def _parse_enum(text: str, table, name: str):
    key = text.strip().upper()
    try:
        return table[key]
    except KeyError:
        raise ValueError(f"{name}: unknown code {text[:20]!r}") from None


def check_event(ev: MboEvent) -> Optional[str]:
    """Return a message if ``ev`` breaks a per-event invariant, else None."""
    if ev.action == Action.ADD:
        if ev.size <= 0:
            return "Add with size <= 0"
        if ev.price <= 0:
            return "Add with price <= 0"
        if ev.side == Side.NONE:
            return "Add without side"
    return None


class _OrderGuard:
    """Tracks per-symbol sequence/timestamp ordering of accepted events."""

    def __init__(self):
        self.last: Dict[str, tuple] = {}

    def check(self, ev: MboEvent) -> Optional[str]:
        prev = self.last.get(ev.symbol)
        if prev is not None:
            prev_seq, prev_ts = prev
            if ev.sequence <= prev_seq:
                return f"out-of-order sequence {ev.sequence} after {prev_seq}"
            if ev.ts_event < prev_ts:
                return f"ts_event {ev.ts_event} earlier than {prev_ts}"
        return None

    def accept(self, ev: MboEvent) -> None:
        self.last[ev.symbol] = (ev.sequence, ev.ts_event)


def parse_csv(stream: Union[BinaryIO, bytes, str, Path],
              symbol_filter: Optional[Set[str]] = None) -> ParseResult:
    """Parse a CSV MBO file.

    ``stream`` may be a binary file object, raw bytes, or a path. The header
    must name every column in ``REQUIRED_COLUMNS``; other vendor columns are
    ignored. Rows that fail to parse or break an invariant are reported in
    ``ParseResult.errors`` with their 1-based data row number and skipped.

    Raises:
        MboFormatError: the header is missing or lacks a required column.
    """
    if isinstance(stream, (str, Path)):
        data = Path(stream).read_bytes()
    elif isinstance(stream, (bytes, bytearray)):
        data = bytes(stream)
    else:
        data = stream.read()
    text = data.decode("utf-8", errors="replace").lstrip("﻿")
    text = text.replace("\x00", "�")
    lines = text.splitlines()

    result = ParseResult()
    if not lines or not lines[0].strip():
        raise MboFormatError("missing header row")
    header = [h.strip() for h in _split_line(lines[0])]
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in REQUIRED_COLUMNS if c not in col]
    if missing:
        raise MboFormatError(f"missing required column(s): {', '.join(missing)}")
    i_ts, i_sym, i_oid = col["ts_event"], col["symbol"], col["order_id"]
    i_px, i_sz, i_side = col["price"], col["size"], col["side"]
    i_act, i_seq = col["action"], col["sequence"]
    width = max(col[c] for c in REQUIRED_COLUMNS) + 1

    guard = _OrderGuard()
    for row_no, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        result.n_rows += 1
        try:
            parts = _split_line(line)
            if len(parts) < width:
                raise ValueError(f"expected at least {width} fields, got {len(parts)}")
            symbol = parts[i_sym].strip()
            if symbol_filter is not None and symbol not in symbol_filter:
                continue
            ev = MboEvent(
                ts_event=_parse_int(parts[i_ts], "ts_event", 0, U64_MAX),
                order_id=_parse_int(parts[i_oid], "order_id", 0, U64_MAX),
                symbol=symbol,
                price=_parse_int(parts[i_px], "price", I64_MIN, I64_MAX),
                size=_parse_int(parts[i_sz], "size", 0, U32_MAX),
                side=_parse_enum(parts[i_side], _SIDE_CODES, "side"),
                action=_parse_enum(parts[i_act], _ACTION_CODES, "action"),
                sequence=_parse_int(parts[i_seq], "sequence", 0, U64_MAX),
            )
        except (ValueError, csv.Error) as exc:
            result.errors.append(RowError(row_no, str(exc)))
            continue
        problem = check_event(ev) or guard.check(ev)
        if problem:
            result.errors.append(RowError(row_no, problem))
            continue
        guard.accept(ev)
        result.events.append(ev)
    return result


def _split_line(line: str) -> List[str]:
    if '"' in line:
        return next(csv.reader([line]), [])
    return line.split(",")


def format_csv(events: Iterable[MboEvent]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for ev in events:
        buf.write(
            f"{ev.ts_event},{ev.ts_event},160,2,0,{_ACTION_LETTER[ev.action]},"
            f"{_SIDE_LETTER[ev.side]},{ev.price},{ev.size},0,{ev.order_id},"
            f"0,0,{ev.sequence},{ev.symbol}\n"
        )
    return buf.getvalue()


def write_csv(events: Iterable[MboEvent], path: Union[str, Path]) -> None:
    Path(path).write_text(format_csv(events), encoding="utf-8")


def write_binary(events: Union[np.ndarray, Sequence[MboEvent]],
                 path: Union[str, Path]) -> None:
    arr = events if isinstance(events, np.ndarray) else events_to_array(events)
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(np.ascontiguousarray(arr, dtype=EVENT_DTYPE).tobytes())


def read_binary(source: Union[str, Path, bytes]) -> np.ndarray:
    """Read a binary MBO file into a structured array of ``EVENT_DTYPE``."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise MboFormatError("bad magic; expected b'MBO1'")
    body = data[4:]
    if len(body) % EVENT_DTYPE.itemsize:
        raise MboFormatError(
            f"truncated record: {len(body)} bytes is not a multiple of "
            f"{EVENT_DTYPE.itemsize}")
    return np.frombuffer(body, dtype=EVENT_DTYPE).copy()


def events_to_array(events: Sequence[MboEvent]) -> np.ndarray:
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    if len(events):
        arr["ts_event"] = [e.ts_event for e in events]
        arr["order_id"] = [e.order_id for e in events]
        arr["price"] = [e.price for e in events]
        arr["size"] = [e.size for e in events]
        arr["side"] = [int(e.side) for e in events]
        arr["action"] = [int(e.action) for e in events]
        arr["sequence"] = [e.sequence for e in events]
    return arr


def array_to_events(arr: np.ndarray, symbol: str) -> List[MboEvent]:
    cols = [arr[name].tolist() for name in
            ("ts_event", "order_id", "price", "size", "side", "action", "sequence")]
    sides = list(Side)
    actions = list(Action)
    return [MboEvent(ts, oid, symbol, px, sz, sides[sd], actions[ac], seq)
            for ts, oid, px, sz, sd, ac, seq in zip(*cols)]


def load_events(path: Union[str, Path], symbol: str) -> tuple:
    """Load one symbol's events from a ``.csv`` or binary file.

    Returns ``(array, ParseResult or None)``; binary files carry no per-row
    errors.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        res = parse_csv(path, symbol_filter={symbol})
        return events_to_array(res.events), res
    return read_binary(path), None


# ---------------------------------------------------------------------------
# synthetic streams

# 2025-07-30 14:00 ET (EDT, UTC-4) as UTC nanoseconds
DEFAULT_SESSION_START_NS = 1_753_898_400_000_000_000


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic MBO generator.

    Event times follow a Poisson clock whose total rate is the sum of the
    four base intensities (events per second), multiplied by
    ``burst_mult`` while a burst regime is active. Bursts start at
    ``burst_rate`` per second and last ``burst_duration`` seconds on average.
    Withdrawal episodes (``withdrawal_rate`` per second) cancel every resting
    order within ``withdrawal_levels`` ticks of each best quote.
    """
    add_rate: float = 40.0
    cancel_rate: float = 30.0
    exec_rate: float = 5.0
    modify_rate: float = 5.0
    burst_mult: float = 4.0
    burst_rate: float = 0.05
    burst_duration: float = 2.0
    withdrawal_rate: float = 0.02
    withdrawal_levels: int = 1
    target_orders: int = 100
    size_log_mean: float = math.log(100.0)
    size_log_sd: float = 0.8
    tick: int = 10_000_000
    start_price: int = 12_000_000_000
    price_move_prob: float = 0.01
    start_ns: int = DEFAULT_SESSION_START_NS

    def __post_init__(self):
        for name in ("add_rate", "cancel_rate", "exec_rate", "modify_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.add_rate <= 0:
            raise ValueError("add_rate must be > 0")
        if self.burst_mult < 1:
            raise ValueError("burst_mult must be >= 1")
        if self.burst_rate < 0 or self.withdrawal_rate < 0:
            raise ValueError("episode rates must be >= 0")
        if self.burst_duration <= 0:
            raise ValueError("burst_duration must be > 0")
        if self.withdrawal_levels < 1 or self.target_orders < 1:
            raise ValueError("withdrawal_levels and target_orders must be >= 1")
        if self.size_log_sd < 0:
            raise ValueError("size_log_sd must be >= 0")
        if self.tick <= 0 or self.start_price < 20 * self.tick:
            raise ValueError("start_price must be at least 20 ticks")
        if not 0 <= self.price_move_prob <= 1:
            raise ValueError("price_move_prob must be in [0, 1]")

    @property
    def base_rate(self) -> float:
        return self.add_rate + self.cancel_rate + self.exec_rate + self.modify_rate


def synth_stream(seed: int, duration: float, params: SynthParams = SynthParams(),
                 max_events: int = 0) -> np.ndarray:
    """Generate a synthetic MBO stream as a structured array of ``EVENT_DTYPE``.

    The stream is a pure function of ``(seed, duration, params, max_events)``.
    Every Cancel/Modify/Fill/Trade refers to a live order, and replaying it
    never produces crossed best quotes. ``max_events > 0`` truncates.
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    p = params
    ts, oid, px, sz, sd, ac = _synth_kernel(
        np.int64(seed), float(duration), np.int64(p.start_ns),
        p.add_rate, p.cancel_rate, p.exec_rate, p.modify_rate,
        p.burst_mult, p.burst_rate, p.burst_duration,
        p.withdrawal_rate, np.int64(p.withdrawal_levels),
        float(p.target_orders), p.size_log_mean, p.size_log_sd,
        np.int64(p.tick), np.int64(p.start_price), p.price_move_prob,
        np.int64(max_events))
    out = np.zeros(len(ts), dtype=EVENT_DTYPE)
    out["ts_event"] = ts
    out["order_id"] = oid
    out["price"] = px
    out["size"] = sz
    out["side"] = sd
    out["action"] = ac
    out["sequence"] = np.arange(1, len(ts) + 1, dtype=np.uint64)
    return out


@njit(cache=True)
def _grow(a, n):
    b = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@njit(cache=True)
def _draw_size(mu, sd):
    return max(1, int(np.round(np.exp(mu + sd * np.random.standard_normal()))))


@njit(cache=True)
def _synth_kernel(seed, duration, t0, add_rate, cancel_rate, exec_rate, modify_rate,
                  burst_mult, burst_rate, burst_dur, wd_rate, wd_levels,
                  target_orders, size_mu, size_sd, tick, p0, move_prob, max_events):
    np.random.seed(seed)
    base = add_rate + cancel_rate + exec_rate + modify_rate
    cap = int(base * duration * 1.2) + 1024
    if max_events > 0:
        cap = min(cap, max_events + 1024)
    o_ts = np.empty(cap, np.uint64)
    o_id = np.empty(cap, np.uint64)
    o_px = np.empty(cap, np.int64)
    o_sz = np.empty(cap, np.uint32)
    o_sd = np.empty(cap, np.uint8)
    o_ac = np.empty(cap, np.uint8)
    n = 0

    # live orders, unordered with swap-remove
    lcap = 1024
    l_id = np.empty(lcap, np.int64)
    l_px = np.empty(lcap, np.int64)
    l_sz = np.empty(lcap, np.int64)
    l_sd = np.empty(lcap, np.int64)
    nl = 0

    next_id = 1_000_000
    ref = p0  # reference best-bid price
    t = 0.0
    last_ts = t0
    inf = np.inf
    burst = False
    next_switch = np.random.exponential(1.0 / burst_rate) if burst_rate > 0 else inf
    next_wd = np.random.exponential(1.0 / wd_rate) if wd_rate > 0 else inf

    while True:
        rate = base * (burst_mult if burst else 1.0)
        t_next = t + np.random.exponential(1.0 / rate)
        t_regime = min(next_switch, next_wd)
        if t_regime < t_next:
            if t_regime >= duration:
                break
            t = t_regime
            if next_switch <= next_wd:
                burst = not burst
                if burst:
                    next_switch = t + np.random.exponential(burst_dur)
                elif burst_rate > 0:
                    next_switch = t + np.random.exponential(1.0 / burst_rate)
                else:
                    next_switch = inf
                continue
            next_wd = t + np.random.exponential(1.0 / wd_rate)
            # withdrawal episode: pull every order near both best quotes
            bb = -1
            ba = -1
            for i in range(nl):
                if l_sd[i] == 1 and l_px[i] > bb:
                    bb = l_px[i]
                if l_sd[i] == 2 and (ba < 0 or l_px[i] < ba):
                    ba = l_px[i]
            ts_base = max(t0 + np.int64(t * 1e9), last_ts)
            j = 0
            i = 0
            while i < nl:
                near = False
                if l_sd[i] == 1 and bb >= 0 and l_px[i] > bb - wd_levels * tick:
                    near = True
                if l_sd[i] == 2 and ba >= 0 and l_px[i] < ba + wd_levels * tick:
                    near = True
                if not near:
                    i += 1
                    continue
                if n >= o_ts.shape[0]:
                    o_ts = _grow(o_ts, n + 1)
                    o_id = _grow(o_id, n + 1)
                    o_px = _grow(o_px, n + 1)
                    o_sz = _grow(o_sz, n + 1)
                    o_sd = _grow(o_sd, n + 1)
                    o_ac = _grow(o_ac, n + 1)
                ts_ev = ts_base + j * 1000
                o_ts[n] = ts_ev
                o_id[n] = l_id[i]
                o_px[n] = l_px[i]
                o_sz[n] = l_sz[i]
                o_sd[n] = l_sd[i]
                o_ac[n] = 2
                n += 1
                j += 1
                last_ts = ts_ev
                nl -= 1
                l_id[i] = l_id[nl]
                l_px[i] = l_px[nl]
                l_sz[i] = l_sz[nl]
                l_sd[i] = l_sd[nl]
                if max_events > 0 and n >= max_events:
                    break
            if max_events > 0 and n >= max_events:
                break
            continue

        t = t_next
        if t >= duration:
            break
        if max_events > 0 and n >= max_events:
            break
        if np.random.random() < move_prob:
            if np.random.random() < 0.5:
                ref += tick
            elif ref > 20 * tick:
                ref -= tick

        bb = -1
        ba = -1
        for i in range(nl):
            if l_sd[i] == 1 and l_px[i] > bb:
                bb = l_px[i]
            if l_sd[i] == 2 and (ba < 0 or l_px[i] < ba):
                ba = l_px[i]

        w_add = add_rate
        w_can = cancel_rate * nl / target_orders if nl > 0 else 0.0
        w_exe = exec_rate if nl > 0 else 0.0
        w_mod = modify_rate if nl > 0 else 0.0
        u = np.random.random() * (w_add + w_can + w_exe + w_mod)

        if n >= o_ts.shape[0]:
            o_ts = _grow(o_ts, n + 1)
            o_id = _grow(o_id, n + 1)
            o_px = _grow(o_px, n + 1)
            o_sz = _grow(o_sz, n + 1)
            o_sd = _grow(o_sd, n + 1)
            o_ac = _grow(o_ac, n + 1)
        ts_ev = max(t0 + np.int64(t * 1e9), last_ts)
        last_ts = ts_ev

        if u < w_add:
            side = 1 if np.random.random() < 0.5 else 2
            g = np.random.geometric(0.5) - 1
            size = _draw_size(size_mu, size_sd)
            if side == 1:
                price = ref - g * tick
                if ba >= 0 and price >= ba:
                    price = ba - tick
            else:
                price = ref + tick + g * tick
                if bb >= 0 and price <= bb:
                    price = bb + tick
            if price < tick:
                price = tick
            if nl >= l_id.shape[0]:
                l_id = _grow(l_id, nl + 1)
                l_px = _grow(l_px, nl + 1)
                l_sz = _grow(l_sz, nl + 1)
                l_sd = _grow(l_sd, nl + 1)
            l_id[nl] = next_id
            l_px[nl] = price
            l_sz[nl] = size
            l_sd[nl] = side
            nl += 1
            o_id[n] = next_id
            o_px[n] = price
            o_sz[n] = size
            o_sd[n] = side
            o_ac[n] = 1
            next_id += 1
        elif u < w_add + w_can:
            i = np.random.randint(0, nl)
            o_id[n] = l_id[i]
            o_px[n] = l_px[i]
            o_sz[n] = l_sz[i]
            o_sd[n] = l_sd[i]
            o_ac[n] = 2
            nl -= 1
            l_id[i] = l_id[nl]
            l_px[i] = l_px[nl]
            l_sz[i] = l_sz[nl]
            l_sd[i] = l_sd[nl]
        elif u < w_add + w_can + w_exe:
            side = 1 if np.random.random() < 0.5 else 2
            if (side == 1 and bb < 0) or (side == 2 and ba < 0):
                side = 3 - side
            best = bb if side == 1 else ba
            k = -1
            for i in range(nl):
                if l_sd[i] == side and l_px[i] == best:
                    if k < 0 or l_id[i] < l_id[k]:
                        k = i
            qty = min(l_sz[k], _draw_size(size_mu, size_sd))
            o_id[n] = l_id[k]
            o_px[n] = l_px[k]
            o_sz[n] = qty
            o_sd[n] = l_sd[k]
            o_ac[n] = 6 if np.random.random() < 0.5 else 5
            l_sz[k] -= qty
            if l_sz[k] == 0:
                nl -= 1
                l_id[k] = l_id[nl]
                l_px[k] = l_px[nl]
                l_sz[k] = l_sz[nl]
                l_sd[k] = l_sd[nl]
        else:
            i = np.random.randint(0, nl)
            size = _draw_size(size_mu, size_sd)
            price = l_px[i]
            if np.random.random() < 0.5 and price > 2 * tick:
                # move away from the spread so the book stays uncrossed
                price = price - tick if l_sd[i] == 1 else price + tick
            l_px[i] = price
            l_sz[i] = size
            o_id[n] = l_id[i]
            o_px[n] = price
            o_sz[n] = size
            o_sd[n] = l_sd[i]
            o_ac[n] = 3
        o_ts[n] = ts_ev
        n += 1

    return o_ts[:n], o_id[:n], o_px[:n], o_sz[:n], o_sd[:n], o_ac[:n]
