"""Run configuration: a single INI file with every default embedded.

``lwi defaults`` prints the file below; any key left out of a user config
takes the value shown there. Symbols and their input files go under
``[inputs]`` as ``SYMBOL = path``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .evalkit import MODEL_KINDS, ModelSpec
from .features import CONSENSUS_FEATURES, VOCABULARY, FeatureSpec, FeatureSpecError
from .grid import DEFAULT_WARM_BINS
from .mbo import DEFAULT_SESSION_START_NS, SynthParams
from .models import GbtParams


class ConfigError(ValueError):
    pass


DEFAULTS_TEXT = f"""\
# lwi run configuration. Every key below is optional.

[run]
seed = 0
jobs = 1
out = lwi-out

[session]
# UTC nanoseconds of the session open; bins are aligned to it
start_ns = {DEFAULT_SESSION_START_NS}
duration_s = 3600
grid_ms = 250

[inputs]
# SYMBOL = path/to/events.csv (or a binary .mbo file)

[features]
epsilon = 1.0
ma_window = 4
warm_bins = {DEFAULT_WARM_BINS}
# "all" = the full named vocabulary (needed by the screen command)
features = all
horizons = 1, 4, 8, 20

[models]
# comma-separated names; each name is configured by a [model NAME] section
# or is one of the built-ins AR5, HAR, GBT
models = AR5, HAR, GBT
ar_p = 5
har_windows = 1, 8, 40
gbt_features = {", ".join(CONSENSUS_FEATURES)}
gbt_n_trees = 200
gbt_max_depth = 4
gbt_learning_rate = 0.05
gbt_subsample = 0.8
gbt_min_leaf = 20
gbt_bins = 64
gbt_loss = squared
gbt_huber_delta = 1.0
gbt_quantile = 0.5

[plan]
n_folds = 5
embargo_bins = 240
initial_fraction = 0.4

[screen]
horizon = 4
top_k = 15
threshold = 0.6
mi_bins = 16

[diag]
max_lag = 40
# blank = ceil(12 (n/100)^(1/4))
adf_max_lags =

[synth]
symbols = SYN1, SYN2, SYN3, SYN4
duration_s = 3600
format = csv
add_rate = 40.0
cancel_rate = 30.0
exec_rate = 5.0
modify_rate = 5.0
burst_mult = 4.0
burst_rate = 0.05
burst_duration = 2.0
withdrawal_rate = 0.02
withdrawal_levels = 1
target_orders = 100

[report]
figures = yes
"""

_SECTIONS = ("run", "session", "inputs", "features", "models", "plan", "screen", "diag",
             "synth", "report")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    jobs: int
    out: Path
    session_start_ns: int
    duration_s: int
    grid_ms: int
    inputs: Dict[str, Path]
    epsilon: float
    ma_window: int
    warm_bins: int
    feature_spec: FeatureSpec
    models: Tuple[ModelSpec, ...]
    n_folds: int
    embargo_bins: int
    initial_fraction: float
    screen_horizon: int
    top_k: int
    threshold: float
    mi_bins: int
    max_lag: int
    adf_max_lags: Optional[int]
    synth_symbols: Tuple[str, ...]
    synth_duration_s: float
    synth_format: str
    synth_params: SynthParams
    figures: bool
    source: Optional[Path] = None

    @property
    def grid_ns(self) -> int:
        return self.grid_ms * 1_000_000

    @property
    def session(self) -> Tuple[int, int]:
        return (self.session_start_ns, self.session_start_ns + self.duration_s * 1_000_000_000)

    @property
    def symbols(self) -> List[str]:
        return list(self.inputs)

    def with_overrides(self, seed: Optional[int] = None, jobs: Optional[int] = None,
                       out: Optional[Union[str, Path]] = None) -> "RunConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = seed
            kw["models"] = tuple(dataclasses.replace(m, gbt=dataclasses.replace(m.gbt, seed=seed))
                                 for m in self.models)
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            kw["jobs"] = jobs
        if out is not None:
            kw["out"] = Path(out)
        return dataclasses.replace(self, **kw)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str   # keep symbol case
    cp.read_string(DEFAULTS_TEXT)
    return cp


def _list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


class _Reader:
    """Typed access with error messages that name section and key."""

    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp

    def _raw(self, sec: str, key: str) -> str:
        return self.cp.get(sec, key, fallback="").strip()

    def int(self, sec: str, key: str, lo: Optional[int] = None) -> int:
        raw = self._raw(sec, key)
        try:
            v = int(raw)
        except ValueError:
            raise ConfigError(f"[{sec}] {key}: expected an integer, got {raw!r}") from None
        if lo is not None and v < lo:
            raise ConfigError(f"[{sec}] {key}: must be >= {lo}, got {v}")
        return v

    def float(self, sec: str, key: str, lo: Optional[float] = None,
              lo_open: bool = False) -> float:
        raw = self._raw(sec, key)
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"[{sec}] {key}: expected a number, got {raw!r}") from None
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ConfigError(f"[{sec}] {key}: must be {'>' if lo_open else '>='} {lo}, got {v}")
        return v

    def ints(self, sec: str, key: str) -> Tuple[int, ...]:
        try:
            return tuple(int(t) for t in _list(self._raw(sec, key)))
        except ValueError:
            raise ConfigError(f"[{sec}] {key}: expected comma-separated integers") from None

    def bool(self, sec: str, key: str) -> bool:
        try:
            return self.cp.getboolean(sec, key)
        except ValueError:
            raise ConfigError(f"[{sec}] {key}: expected yes/no") from None

    def str(self, sec: str, key: str) -> str:
        return self._raw(sec, key)


def _gbt_params(r: _Reader, sec: str, seed: int, prefix: str = "gbt_") -> GbtParams:
    try:
        return GbtParams(
            n_trees=r.int(sec, prefix + "n_trees"),
            max_depth=r.int(sec, prefix + "max_depth"),
            learning_rate=r.float(sec, prefix + "learning_rate"),
            subsample=r.float(sec, prefix + "subsample"),
            min_leaf=r.int(sec, prefix + "min_leaf"),
            n_bins=r.int(sec, prefix + "bins"),
            loss=r.str(sec, prefix + "loss"),
            huber_delta=r.float(sec, prefix + "huber_delta"),
            quantile=r.float(sec, prefix + "quantile"),
            seed=seed,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{sec}] GBT parameters: {exc}") from None


def _model_specs(cp: configparser.ConfigParser, r: _Reader, seed: int) -> Tuple[ModelSpec, ...]:
    names = _list(r.str("models", "models"))
    if not names:
        raise ConfigError("[models] models: at least one model is required")
    if len(set(names)) != len(names):
        raise ConfigError("[models] models: duplicate model names")
    gbt = _gbt_params(r, "models", seed)
    p = r.int("models", "ar_p", lo=1)
    windows = r.ints("models", "har_windows")
    gbt_features = tuple(_list(r.str("models", "gbt_features")))
    builtin = {"AR5": ModelSpec("AR5", "ar", p=p),
               "HAR": ModelSpec("HAR", "har", windows=windows),
               "GBT": ModelSpec("GBT", "gbt", features=gbt_features, gbt=gbt)}
    specs = []
    for name in names:
        sec = f"model {name}"
        if cp.has_section(sec):
            # a per-model section inherits the [models] values it does not set
            for key, val in cp.items("models"):
                if not cp.has_option(sec, key):
                    cp.set(sec, key, val)
            kind = r.str(sec, "kind")
            if kind not in MODEL_KINDS:
                raise ConfigError(f"[{sec}] kind: expected one of {', '.join(MODEL_KINDS)}")
            specs.append(ModelSpec(name, kind, p=r.int(sec, "ar_p", lo=1),
                                   windows=r.ints(sec, "har_windows"),
                                   features=tuple(_list(r.str(sec, "gbt_features"))),
                                   gbt=_gbt_params(r, sec, seed)))
        elif name in builtin:
            specs.append(builtin[name])
        else:
            raise ConfigError(f"[models] models: {name!r} is neither built in (AR5, HAR, GBT) "
                              f"nor defined by a [model {name}] section")
    for spec in specs:
        w = spec.windows
        if spec.kind == "har" and (not w or w[0] < 1 or any(b <= a for a, b in zip(w, w[1:]))):
            raise ConfigError(f"model {spec.name}: har_windows must be strictly increasing >= 1")
        unknown = [f for f in spec.features if f not in VOCABULARY]
        if unknown:
            raise ConfigError(f"model {spec.name}: unknown feature(s) {', '.join(unknown)}")
    return tuple(specs)


def load_config(path: Optional[Union[str, Path]] = None, check_inputs: bool = True) -> RunConfig:
    """Parse and fully validate a config file (``None`` = all defaults)."""
    cp = _parser()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for sec in cp.sections():
        if sec not in _SECTIONS and not sec.startswith("model "):
            raise ConfigError(f"unknown section [{sec}]")
    r = _Reader(cp)
    seed = r.int("run", "seed")

    grid_ms = r.int("session", "grid_ms", lo=1)
    duration_s = r.int("session", "duration_s", lo=1)
    if (duration_s * 1000) % grid_ms:
        raise ConfigError("[session] duration_s must be a whole number of grid_ms bins")

    base_dir = path.parent if path is not None else Path.cwd()
    inputs: Dict[str, Path] = {}
    for sym, raw in cp.items("inputs"):
        p = Path(raw.strip())
        if not p.is_absolute():
            p = base_dir / p
        if check_inputs and not (p.is_file() and _readable(p)):
            raise ConfigError(f"[inputs] {sym}: cannot read {p}")
        inputs[sym] = p

    feats = r.str("features", "features")
    features = tuple(VOCABULARY) if feats in ("", "all") else tuple(_list(feats))
    try:
        spec = FeatureSpec(features, r.ints("features", "horizons"))
    except FeatureSpecError as exc:
        raise ConfigError(f"[features] {exc}") from None

    synth_fields = {f.name: f.type for f in dataclasses.fields(SynthParams)}
    synth_kw = {}
    for key, _ in cp.items("synth"):
        if key in ("symbols", "duration_s", "format"):
            continue
        if key not in synth_fields:
            raise ConfigError(f"[synth] unknown key {key}")
        synth_kw[key] = r.int("synth", key) if synth_fields[key] in ("int", int) else r.float("synth", key)
    try:
        synth_params = SynthParams(start_ns=r.int("session", "start_ns"), **synth_kw)
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from None
    fmt = r.str("synth", "format")
    if fmt not in ("csv", "binary"):
        raise ConfigError("[synth] format: expected csv or binary")

    threshold = r.float("screen", "threshold", lo=0.0, lo_open=True)
    if threshold > 1:
        raise ConfigError("[screen] threshold: must be in (0, 1]")
    screen_k = r.int("screen", "horizon", lo=1)
    if screen_k not in spec.horizons:
        raise ConfigError(f"[screen] horizon {screen_k} is not among [features] horizons")
    init = r.float("plan", "initial_fraction", lo=0.0, lo_open=True)
    if init >= 1:
        raise ConfigError("[plan] initial_fraction: must be in (0, 1)")
    adf_raw = r.str("diag", "adf_max_lags")

    return RunConfig(
        seed=seed,
        jobs=r.int("run", "jobs", lo=1),
        out=Path(r.str("run", "out") or "lwi-out"),
        session_start_ns=r.int("session", "start_ns"),
        duration_s=duration_s,
        grid_ms=grid_ms,
        inputs=inputs,
        epsilon=r.float("features", "epsilon", lo=0.0, lo_open=True),
        ma_window=r.int("features", "ma_window", lo=1),
        warm_bins=r.int("features", "warm_bins", lo=0),
        feature_spec=spec,
        models=_model_specs(cp, r, seed),
        n_folds=r.int("plan", "n_folds", lo=1),
        embargo_bins=r.int("plan", "embargo_bins", lo=0),
        initial_fraction=init,
        screen_horizon=screen_k,
        top_k=r.int("screen", "top_k", lo=1),
        threshold=threshold,
        mi_bins=r.int("screen", "mi_bins", lo=2),
        max_lag=r.int("diag", "max_lag", lo=1),
        adf_max_lags=None if adf_raw == "" else r.int("diag", "adf_max_lags", lo=0),
        synth_symbols=tuple(_list(r.str("synth", "symbols"))),
        synth_duration_s=r.float("synth", "duration_s", lo=0.0, lo_open=True),
        synth_format=fmt,
        synth_params=synth_params,
        figures=r.bool("report", "figures"),
        source=path,
    )


def _readable(p: Path) -> bool:
    try:
        with open(p, "rb"):
            return True
    except OSError:
        return False
