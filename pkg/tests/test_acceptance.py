"""Acceptance suite: one test per criterion, stated tolerances, fixed seeds.

Each test stores a one-line summary in ``conftest.ACCEPTANCE``; the
terminal summary prints a PASS/FAIL line per criterion.
"""

import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from statsmodels.tsa.stattools import adfuller

from conftest import ACCEPTANCE
from helpers import random_bins, shuffle_inside, truncate
from oracles import naive_replay, normal_equations

from lwi.book import replay
from lwi.cli import EXIT_OK, main
from lwi.evalkit import ModelSpec, evaluation_rows, run_experiment, skewness
from lwi.features import CONSENSUS_FEATURES, VOCABULARY, FeatureSpec, build_frame, compute_lwi
from lwi.grid import GRID_NS, empty_bins, resample
from lwi.mbo import EVENT_DTYPE, SynthParams, synth_stream
from lwi.models import GbtParams, LinearFit, gbt_fit, ols_fit
from lwi.scenarios import planted_frame, regime_frame
from lwi.stats import adf_test, consensus, lambda_max, lasso_path, screen_features, standardize


def record(n, title, detail):
    ACCEPTANCE.setdefault(n, {}).update(title=title, detail=detail)


# ---------------------------------------------------------------------------

def test_criterion_1_book_matches_rescan_oracle():
    t0 = time.perf_counter()
    mismatched = []
    n_events = 0
    for seed in range(100):
        arr = synth_stream(seed, 1250.0, max_events=100_000)
        n_events += len(arr)
        rep = replay(arr)
        got = (rep.bid_px, rep.ask_px, rep.bid_depth, rep.ask_depth)
        if not all(np.array_equal(a, b) for a, b in zip(got, naive_replay(arr))):
            mismatched.append(seed)
    elapsed = time.perf_counter() - t0
    record(1, "incremental book == rescan oracle, 100 x 100k events",
           f"{len(mismatched)} mismatched streams, {n_events} events, {elapsed:.1f}s")
    assert n_events == 100 * 100_000
    assert not mismatched
    assert elapsed < 60


def test_criterion_2_lwi_formula():
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_zero = 0
    for i in range(1000):
        depths = rng.integers(0, 5000, 4)
        cancels = 0 if i % 10 == 0 else int(rng.integers(1, 3000))
        adds = int(rng.integers(0, 3000)) if i % 7 else 0
        eps = float(rng.uniform(0.01, 5.0))
        bins = empty_bins(5)
        bins.bid_depth[:4] = depths
        bins.cancels_L1[4] = cancels
        bins.adds_L1[4] = adds
        got = compute_lwi(bins, epsilon=eps)[4]
        want = Fraction(cancels) / (Fraction(int(depths.sum()), 4) + max(Fraction(adds), Fraction(eps)))
        assert got >= 0
        if cancels == 0:
            n_zero += 1
            assert got == 0.0
        else:
            worst = max(worst, abs(Fraction(got) - want) / want)
    record(2, "LWI formula on 1000 random tuples",
           f"max rel err {float(worst):.2e}, {n_zero} zero-cancel bins exactly 0")
    assert worst <= Fraction(1, 10**12)


def test_criterion_3_one_hour_is_14400_bins():
    t0 = SynthParams().start_ns
    hour = (t0, t0 + 3600 * 10**9)
    empty = resample(np.zeros(0, EVENT_DTYPE), hour)
    full = resample(synth_stream(3, 3600.0), hour)
    record(3, "1-hour session at 250 ms", f"{len(empty)} bins (empty), {len(full)} bins (synthetic)")
    assert len(empty) == len(full) == 14_400
    assert np.all(np.diff(full.bin_start) == GRID_NS)


def test_criterion_4_no_leakage():
    names = tuple(n for n in VOCABULARY if n != "LWI")
    spec = FeatureSpec(names)
    changed = []
    for i in range(50):
        rng = np.random.default_rng(4000 + i)
        bins = random_bins(4000 + i, int(rng.integers(300, 900)))
        t = int(rng.integers(250, len(bins) - 1))
        full, cut = build_frame(bins, spec), build_frame(truncate(bins, t), spec)
        for name in ("LWI", *names):
            if not np.array_equal(full.columns[name][:t + 1], cut.columns[name], equal_nan=True):
                changed.append((i, name))

    frame = regime_frame(7, horizons=(4,))
    models = (ModelSpec("AR5", "ar"), ModelSpec("HAR", "har"),
              ModelSpec("GBT", "gbt", features=CONSENSUS_FEATURES, gbt=GbtParams(n_trees=50)))
    base = run_experiment(frame, models, horizons=(4,), keep_models=True)
    rows = evaluation_rows(frame, models)
    X = frame.matrix(list(CONSENSUS_FEATURES), rows)
    worst = 0.0
    for f, fold in enumerate(base.plan.folds, start=1):
        lo, hi = rows[fold.test[0]], rows[fold.test[1] - 1] + 1
        shuffled = frame.with_target(4, shuffle_inside(frame.target(4), lo, hi, 100 + f))
        rep = run_experiment(shuffled, models, horizons=(4,), keep_models=True)
        for spec in models:
            a, b = base.fitted[(spec.name, 4, f)], rep.fitted[(spec.name, 4, f)]
            if isinstance(a, LinearFit):
                worst = max(worst, float(np.max(np.abs(a.beta - b.beta))))
            else:
                worst = max(worst, float(np.max(np.abs(a.predict(X) - b.predict(X)))))
    record(4, "no look-ahead (50 truncations) and test-shuffle leakage check",
           f"{len(changed)} changed feature rows; max fitted delta {worst:.1e}")
    assert not changed
    assert worst < 1e-12


def test_criterion_5_estimator_oracles():
    worst_ols = 0.0
    for i in range(100):
        rng = np.random.default_rng(5000 + i)
        n, p = int(rng.integers(50, 600)), int(rng.integers(1, 10))
        X = rng.normal(size=(n, p)) * rng.uniform(0.1, 10, p) + rng.normal(0, 3, p)
        y = X @ rng.normal(size=p) + rng.normal(size=n)
        worst_ols = max(worst_ols, float(np.max(np.abs(ols_fit(X, y).beta - normal_equations(X, y)))))

    worst_kkt = 0.0
    for i in range(20):
        rng = np.random.default_rng(5200 + i)
        X = rng.normal(size=(400, 12)) @ rng.normal(size=(12, 12)) * 0.3
        y = X[:, :3] @ rng.normal(size=3) + rng.normal(size=400)
        lmax = lambda_max(X, y)
        lams = np.geomspace(lmax, lmax * 1e-4, 50)
        path = lasso_path(X, y, lams)
        Z, _, _ = standardize(X)
        yc = y - y.mean()
        for lam, b in zip(lams, path.coefs):
            grad = Z.T @ (yc - Z @ b) / len(y)
            zero = b == 0
            worst_kkt = max(worst_kkt, float(np.max(np.abs(grad[zero]) - lam, initial=0.0)),
                            float(np.max(np.abs(grad[~zero] - lam * np.sign(b[~zero])), initial=0.0)))

    rises = 0
    for i in range(20):
        rng = np.random.default_rng(5400 + i)
        X = rng.normal(size=(1500, 5))
        y = np.sin(X[:, 0] * 2) + (X[:, 1] > 0) * X[:, 2] + rng.standard_t(3, 1500) * 0.3
        loss = ("squared", "huber", "quantile")[i % 3]
        curve = np.array(gbt_fit(X, y, GbtParams(n_trees=80, loss=loss, seed=i)).train_loss)
        rises += int(np.any(np.diff(curve) > 1e-12 * curve[0]))
    record(5, "OLS / LASSO KKT / GBT loss oracles",
           f"OLS max |dβ| {worst_ols:.1e}; KKT max violation {worst_kkt:.1e}; "
           f"{rises}/20 GBT curves rising")
    assert worst_ols < 1e-8
    assert worst_kkt < 1e-6
    assert rises == 0


def test_criterion_6_adf_decisions_and_reference():
    correct = 0
    agree = 0
    worst = 0.0
    for i, phi in enumerate(np.linspace(0.3, 0.7, 10)):
        rng = np.random.default_rng(6000 + i)
        e = rng.normal(size=2000)
        x = np.empty(2000)
        x[0] = e[0]
        for t in range(1, 2000):
            x[t] = phi * x[t - 1] + e[t]
        res, ref = adf_test(x), adfuller(x, regression="c", autolag="AIC")
        correct += res.reject_at_5pct
        agree += res.reject_at_5pct == (ref[1] < 0.05)
        worst = max(worst, abs(res.statistic - ref[0]))
    for i in range(10):
        # 6100-block walk 8 is a true 5% false rejection (reference p=0.037)
        x = np.cumsum(np.random.default_rng(6200 + i).normal(size=2000))
        res, ref = adf_test(x), adfuller(x, regression="c", autolag="AIC")
        correct += not res.reject_at_5pct
        agree += res.reject_at_5pct == (ref[1] < 0.05)
        worst = max(worst, abs(res.statistic - ref[0]))
    record(6, "ADF on 10 stationary AR(1) + 10 random walks",
           f"{correct}/20 decisions correct, {agree}/20 agree with reference; "
           f"max |stat - reference| {worst:.1e}")
    assert correct == 20
    assert agree == 20
    assert worst < 1e-6


@pytest.fixture(scope="module")
def regime_reports():
    """Walk-forward reports for four synthetic symbols (seeds 1-4)."""
    t0 = time.perf_counter()
    reps = [run_experiment(regime_frame(seed, symbol=f"SYN{seed}")) for seed in (1, 2, 3, 4)]
    return reps, time.perf_counter() - t0


def test_criterion_7_horizon_pattern(regime_reports):
    reps, elapsed = regime_reports
    m = {key: float(np.mean([r.mean_r2()[key] for r in reps])) for key in reps[0].mean_r2()}
    k1 = max(m[(x, 1)] for x in ("AR5", "HAR", "GBT"))
    checks = {
        "k=1 all < 0.2": k1 < 0.2,
        "HAR >= AR5 at k=8": m[("HAR", 8)] >= m[("AR5", 8)],
        "GBT >= HAR >= 0.5 at k=20": m[("GBT", 20)] >= m[("HAR", 20)] >= 0.5,
        "GBT - AR5 >= 0.1 at k=20": m[("GBT", 20)] - m[("AR5", 20)] >= 0.1,
    }
    record(7, "mean R² pattern across horizons (4 symbols)",
           f"k1 max {k1:.3f}; k8 HAR {m[('HAR', 8)]:.3f} AR5 {m[('AR5', 8)]:.3f}; "
           f"k20 GBT {m[('GBT', 20)]:.3f} HAR {m[('HAR', 20)]:.3f} AR5 {m[('AR5', 20)]:.3f}; "
           f"{elapsed:.0f}s")
    assert all(checks.values()), [k for k, v in checks.items() if not v]
    assert elapsed < 300


def test_criterion_8_consensus_mechanics():
    planted = {
        "S1": ("LWI_ma1s", "QI_sd1s", "adds_rate1s"),
        "S2": ("LWI_ma1s", "QI_sd1s", "adds_rate1s"),
        "S3": ("LWI_ma1s", "QI_sd1s", "spread_sd1s"),
        "S4": ("LWI_ma1s", "midret_sd10s", "depth_L1_lag4"),
    }
    rankings = {}
    for i, (sym, feats) in enumerate(planted.items()):
        frame = planted_frame(100 + i, {f: 1.0 for f in feats}, k=4, symbol=sym)
        rankings[sym] = screen_features(frame, k=4, top_k=3).rankings
    rows = {r.feature: r for r in consensus(rankings, threshold=0.6)}
    got = {f: (rows[f].n_symbols, rows[f].consensus) for f in ("LWI_ma1s", "QI_sd1s", "adds_rate1s")
           if f in rows}
    record(8, "consensus Yes/Yes/No for 4/4, 3/4, 2/4 symbols",
           ", ".join(f"{f} {n}/4 {'Yes' if c else 'No'}" for f, (n, c) in got.items()))
    assert got == {"LWI_ma1s": (4, True), "QI_sd1s": (3, True), "adds_rate1s": (2, False)}


def test_criterion_9_residual_skew_shrinks_with_horizon(regime_reports):
    reps, _ = regime_reports
    diffs = [skewness(r.residuals("GBT", 4)) - skewness(r.residuals("GBT", 20)) for r in reps]
    record(9, "GBT residual skew(k=4) - skew(k=20)",
           f"mean {np.mean(diffs):.3f} (per symbol {', '.join(f'{d:.2f}' for d in diffs)})")
    assert np.mean(diffs) >= 0.2


def _pipeline(root: Path) -> Path:
    root.mkdir(parents=True)
    base = root / "base.ini"
    base.write_text("[session]\nduration_s = 1200\n[synth]\nsymbols = AAA, BBB, CCC\n"
                    "duration_s = 1200\n[diag]\nmax_lag = 30\n", encoding="utf-8")
    out = root / "out"
    assert main(["synth", "--config", str(base), "--out", str(out), "--seed", "7"]) == EXIT_OK
    cfg = str(out / "synth.ini")
    for cmd in ("build", "screen", "diag", "eval"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == EXIT_OK, cmd
    return out


def test_criterion_10_pipeline_is_byte_identical(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differ = [str(p) for p in files_a if (a / p).read_bytes() != (b / p).read_bytes()]
    record(10, "two full pipeline runs, identical seed/config",
           f"{len(files_a)} files compared, {len(differ)} differ")
    assert files_a == files_b
    assert any(p.name == "report.csv" for p in files_a)
    assert not differ, differ
