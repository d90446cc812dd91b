"""``lwi`` command line: build | screen | eval | diag | synth | defaults.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal
error. Logging goes to stderr at the level named by ``LWI_LOG``
(error, warn, info, debug; default warn).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import plotting
from .config import DEFAULTS_TEXT, ConfigError, RunConfig, load_config
from .evalkit import (EvalReport, PlanError, horizon_label, run_experiment, write_reports)
from .features import (FeatureFrame, FeatureSpecError, build_frame, frame_from_ffr)
from .grid import resample, warm_start, write_bins_csv
from .mbo import MboFormatError, array_to_events, load_events, synth_stream, write_binary, write_csv
from .models import GbtParams, ModelError
from .stats import (METHODS, StatsError, acf_pacf, adf_test, consensus, consensus_to_csv,
                    screen_features)

logger = logging.getLogger("lwi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="INI run configuration")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="override [run] seed")
    p.add_argument("--jobs", type=int, metavar="N", default=d, help="worker processes")
    p.add_argument("--out", metavar="DIR", default=d, help="override [run] out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lwi", description="Liquidity withdrawal index pipeline.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "build": "replay MBO inputs and write per-symbol feature frames",
        "screen": "rank features per symbol and write the consensus table",
        "eval": "walk-forward evaluation of the configured models",
        "diag": "ADF test and ACF/PACF of each symbol's LWI",
        "synth": "write synthetic MBO inputs plus a matching config",
        "defaults": "print the default configuration",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        _global_flags(sp, suppress=True)
    return parser


# ---------------------------------------------------------------------------
# helpers

def _pmap(fn: Callable, items: Sequence, jobs: int) -> List:
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _frame_path(cfg: RunConfig, sym: str) -> Path:
    return cfg.out / "frames" / f"{sym}.ffr"


def _load_frames(cfg: RunConfig) -> Dict[str, FeatureFrame]:
    syms = cfg.symbols or sorted(p.stem for p in (cfg.out / "frames").glob("*.ffr"))
    if not syms:
        raise DataError(f"no frames under {cfg.out / 'frames'}; run 'lwi build' first")
    missing = [s for s in syms if not _frame_path(cfg, s).is_file()]
    if missing:
        raise DataError(f"missing frame(s) for {', '.join(missing)}; run 'lwi build' first")
    frames = {}
    for s in syms:
        try:
            frames[s] = frame_from_ffr(_frame_path(cfg, s))
        except ValueError as exc:
            raise DataError(f"{_frame_path(cfg, s)}: {exc}") from None
    return frames


def _empty_frame(cfg: RunConfig, sym: str) -> FeatureFrame:
    cols = {name: np.empty(0) for name in ("LWI", *cfg.feature_spec.features)}
    targets = {int(k): np.empty(0) for k in cfg.feature_spec.horizons}
    return FeatureFrame(sym, np.empty(0, np.int64), cols, targets, np.empty(0, bool),
                        cfg.session_start_ns, cfg.grid_ns)


# ---------------------------------------------------------------------------
# build

def _build_one(args: Tuple[RunConfig, str]) -> str:
    cfg, sym = args
    path = cfg.inputs[sym]
    n_parse_err = 0
    if path.stat().st_size == 0:
        logger.warning("%s: input %s is empty; writing a zero-row frame", sym, path)
        frame = _empty_frame(cfg, sym)
        bins = None
        n_events = 0
    else:
        try:
            events, parsed = load_events(path, sym)
        except MboFormatError as exc:
            raise DataError(f"{sym}: {path}: {exc}") from None
        if parsed is not None:
            n_parse_err = parsed.n_errors
            for err in parsed.errors[:20]:
                logger.warning("%s: row %d: %s", sym, err.row, err.message)
        n_events = len(events)
        if n_events == 0:
            logger.warning("%s: no events for this symbol in %s; writing a zero-row frame", sym, path)
            frame = _empty_frame(cfg, sym)
            bins = None
        else:
            bins = warm_start(resample(events, cfg.session, cfg.grid_ns), cfg.warm_bins)
            frame = build_frame(bins, cfg.feature_spec, sym, cfg.epsilon, cfg.ma_window)
    out = cfg.out / "frames"
    frame.to_ffr(out / f"{sym}.ffr")
    frame.to_csv(out / f"{sym}.csv")
    book_err = 0
    dropped = 0
    if bins is not None:
        write_bins_csv(bins, cfg.out / "bins" / f"{sym}.csv")
        book_err = sum(bins.book_errors.values())
        dropped = bins.n_dropped
    return (f"{sym}: events={n_events} parse_errors={n_parse_err} book_errors={book_err} "
            f"out_of_session={dropped} rows={len(frame)} modelable={int(frame.modelable_mask.sum())}")


def cmd_build(cfg: RunConfig) -> int:
    if not cfg.inputs:
        raise ConfigError("[inputs] lists no symbols")
    (cfg.out / "frames").mkdir(parents=True, exist_ok=True)
    (cfg.out / "bins").mkdir(parents=True, exist_ok=True)
    for line in _pmap(_build_one, [(cfg, s) for s in cfg.symbols], cfg.jobs):
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# screen

def _screen_one(args) -> Tuple[str, dict, dict]:
    cfg, sym, frame = args
    try:
        sc = screen_features(frame, cfg.screen_horizon, cfg.top_k, mi_bins=cfg.mi_bins,
                             gbt_params=GbtParams(seed=cfg.seed))
    except (StatsError, ModelError, ValueError) as exc:
        raise DataError(f"{sym}: screening failed: {exc}") from None
    return sym, sc.rankings, sc.scores


def cmd_screen(cfg: RunConfig) -> int:
    frames = _load_frames(cfg)
    results = _pmap(_screen_one, [(cfg, s, f) for s, f in frames.items()], cfg.jobs)
    out = cfg.out / "screen"
    out.mkdir(parents=True, exist_ok=True)
    rankings = {}
    for sym, ranks, scores in results:
        rankings[sym] = ranks
        lines = ["method,rank,feature,score"]
        for method in METHODS:
            for i, feat in enumerate(ranks[method], start=1):
                lines.append(f"{method},{i},{feat},{scores[method][feat]:.6g}")
        (out / f"rankings_{sym}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rows = consensus(rankings, cfg.threshold)
    (out / "consensus.csv").write_text(consensus_to_csv(rows), encoding="utf-8")
    print(consensus_to_csv(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _eval_one(args) -> EvalReport:
    cfg, frame = args
    try:
        return run_experiment(frame, cfg.models, cfg.feature_spec.horizons, cfg.n_folds,
                              cfg.embargo_bins, cfg.initial_fraction)
    except (PlanError, ModelError, ValueError) as exc:
        raise DataError(f"{frame.symbol}: {exc}") from None


def _eval_figures(rep: EvalReport, out: Path) -> None:
    models = list(dict.fromkeys(r.model for r in rep.rows))
    horizons = sorted({r.horizon for r in rep.rows})
    labels = [horizon_label(rep.horizon_ms(k)) for k in horizons]
    means = rep.mean_r2()
    plotting.summary_figure({m: [means[(m, k)] for k in horizons] for m in models}, labels,
                            f"{rep.symbol} mean out-of-sample R²", out / f"{rep.symbol}_r2.png")
    for m in models:
        for k in horizons:
            fcs = [f for f in rep.forecasts if f.model == m and f.horizon == k]
            if fcs:
                fc = fcs[-1]
                plotting.forecast_figure(fc.timestamp, fc.y_true, fc.y_pred,
                                         f"{rep.symbol} {m} {horizon_label(rep.horizon_ms(k))} "
                                         f"(fold {fc.fold})",
                                         out / f"{rep.symbol}_{m}_{rep.horizon_ms(k)}ms_forecast.png")
        plotting.residual_figure({lab: rep.residuals(m, k) for lab, k in zip(labels, horizons)},
                                 f"{rep.symbol} {m} residuals", out / f"{rep.symbol}_{m}_residuals.png")


def cmd_eval(cfg: RunConfig) -> int:
    frames = _load_frames(cfg)
    reports = _pmap(_eval_one, [(cfg, f) for f in frames.values()], cfg.jobs)
    out = cfg.out / "eval"
    write_reports(reports, out)
    if cfg.figures:
        for rep in reports:
            _eval_figures(rep, out / "figures")
    for rep in reports:
        for r in rep.failures:
            print(f"{rep.symbol} {r.model} k={r.horizon} fold {r.fold} failed: {r.error}",
                  file=sys.stderr)
    print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diag

ADF_COLUMNS = ("symbol", "statistic", "lags_used", "n_obs", "crit_1pct", "crit_5pct",
               "crit_10pct", "reject_5pct", "error")


def cmd_diag(cfg: RunConfig) -> int:
    frames = _load_frames(cfg)
    out = cfg.out / "diag"
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(ADF_COLUMNS)]
    for sym, frame in frames.items():
        series = np.asarray(frame.lwi)[frame.modelable_rows]
        try:
            res = adf_test(series, cfg.adf_max_lags)
            cv = res.critical_values
            lines.append(f"{sym},{res.statistic:.6f},{res.lags_used},{res.n_obs},{cv['1%']:.6f},"
                         f"{cv['5%']:.6f},{cv['10%']:.6f},{'true' if res.reject_at_5pct else 'false'},")
        except StatsError as exc:
            lines.append(f"{sym},,,,,,,,{exc}")
            logger.warning("%s: ADF not computed: %s", sym, exc)
        try:
            acf, pacf, band = acf_pacf(series, cfg.max_lag)
        except StatsError as exc:
            logger.warning("%s: ACF not computed: %s", sym, exc)
            continue
        rows = ["lag,acf,pacf,conf_band"]
        rows += [f"{k},{acf[k]:.6f},{pacf[k]:.6f},{band:.6f}" for k in range(len(acf))]
        (out / f"acf_{sym}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        if cfg.figures:
            plotting.acf_figure(acf, pacf, band, sym, out / "figures" / f"acf_{sym}.png")
    (out / "adf.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth

def _synth_one(args) -> Path:
    cfg, i, sym = args
    events = synth_stream(cfg.seed * 1000 + i, cfg.synth_duration_s, cfg.synth_params)
    d = cfg.out / "inputs"
    if cfg.synth_format == "binary":
        path = d / f"{sym}.mbo"
        write_binary(events, path)
    else:
        path = d / f"{sym}.csv"
        write_csv(array_to_events(events, sym), path)
    return path


def cmd_synth(cfg: RunConfig) -> int:
    if not cfg.synth_symbols:
        raise ConfigError("[synth] symbols is empty")
    (cfg.out / "inputs").mkdir(parents=True, exist_ok=True)
    paths = _pmap(_synth_one, [(cfg, i, s) for i, s in enumerate(cfg.synth_symbols)], cfg.jobs)
    src = cfg.source.read_text(encoding="utf-8") if cfg.source else ""
    lines = [src.rstrip(), "", "[inputs]"]
    # paths relative to the written config, which lives in the output directory
    lines += [f"{s} = inputs/{p.name}" for s, p in zip(cfg.synth_symbols, paths)]
    ini = cfg.out / "synth.ini"
    ini.write_text("\n".join(lines).lstrip("\n") + "\n", encoding="utf-8")
    for p in paths:
        print(p)
    print(f"config: {ini}")
    return EXIT_OK


COMMANDS = {"build": cmd_build, "screen": cmd_screen, "eval": cmd_eval, "diag": cmd_diag,
            "synth": cmd_synth}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("LWI_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.command == "defaults":
        print(DEFAULTS_TEXT, end="")
        return EXIT_OK
    try:
        cfg = load_config(args.config, check_inputs=args.command == "build")
        cfg = cfg.with_overrides(args.seed, args.jobs, args.out)
        if args.command == "synth" and cfg.source and "[inputs]" in cfg.source.read_text(encoding="utf-8"):
            raise ConfigError("synth writes its own [inputs]; use a config without one")
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"lwi: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MboFormatError, StatsError, PlanError, FeatureSpecError) as exc:
        print(f"lwi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"lwi: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001 - last-resort mapping to the internal exit code
        print("lwi: internal error", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
