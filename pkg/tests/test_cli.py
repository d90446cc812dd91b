import csv
import logging
import subprocess
import sys
from pathlib import Path

import pytest

from lwi.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from lwi.config import DEFAULTS_TEXT, ConfigError, load_config
from lwi.features import frame_from_ffr
from lwi.mbo import DEFAULT_SESSION_START_NS, synth_stream, write_binary

SMALL_MODELS = """
[models]
models = AR5, HAR, GBT
gbt_n_trees = 30
gbt_max_depth = 3
gbt_learning_rate = 0.1
"""


def write_cfg(path: Path, *sections: str) -> Path:
    path.write_text("\n".join(sections) + "\n", encoding="utf-8")
    return path


def read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    """Two short synthetic symbols, generated and built once per module."""
    root = tmp_path_factory.mktemp("synth")
    base = write_cfg(root / "base.ini",
                     "[session]\nduration_s = 600",
                     "[synth]\nsymbols = AAA, BBB\nduration_s = 600",
                     SMALL_MODELS)
    out = root / "out"
    assert run("synth", "--config", base, "--out", out, "--seed", 3) == EXIT_OK
    assert run("build", "--config", out / "synth.ini", "--out", out) == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# parsing and config

def test_defaults_round_trip(tmp_path, capsys):
    assert run("defaults") == EXIT_OK
    text = capsys.readouterr().out
    assert text == DEFAULTS_TEXT
    cfg = load_config(write_cfg(tmp_path / "d.ini", text))
    assert cfg.grid_ns == 250_000_000 and cfg.feature_spec.horizons == (1, 4, 8, 20)
    assert [m.name for m in cfg.models] == ["AR5", "HAR", "GBT"]


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "lwi.cli", "defaults"], capture_output=True, text=True)
    assert res.returncode == 0 and "[session]" in res.stdout


def test_usage_errors_exit_1(capsys):
    assert run() == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run("bogus")
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run("build", "--seed", "x")
    assert e.value.code == EXIT_USAGE


@pytest.mark.parametrize("body,needle", [
    ("[session]\ngrid_ms = 0", "grid_ms"),
    ("[session]\nduration_s = 1\ngrid_ms = 300", "whole number"),
    ("[features]\nhorizons = 1, x", "horizons"),
    ("[features]\nfeatures = LWI_lag1, nope", "nope"),
    ("[models]\nmodels = AR5, LSTM", "LSTM"),
    ("[models]\ngbt_learning_rate = 2", "learning_rate"),
    ("[model FAST]\nkind = svm\n[models]\nmodels = FAST", "kind"),
    ("[bogus]\nx = 1", "bogus"),
    ("[inputs]\nXYZ = does/not/exist.csv", "XYZ"),
])
def test_invalid_config_exits_1_without_writing(tmp_path, capsys, body, needle):
    cfg = write_cfg(tmp_path / "bad.ini", body)
    out = tmp_path / "out"
    assert run("build", "--config", cfg, "--out", out) == EXIT_USAGE
    assert needle in capsys.readouterr().err
    assert not out.exists()


def test_missing_config_file_is_config_error(tmp_path):
    assert run("build", "--config", tmp_path / "none.ini", "--out", tmp_path / "o") == EXIT_USAGE


def test_custom_model_section_inherits_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "m.ini",
                                "[models]\nmodels = AR5, SLOW\ngbt_n_trees = 7",
                                "[model SLOW]\nkind = gbt\ngbt_max_depth = 2"))
    slow = cfg.models[1]
    assert (slow.kind, slow.gbt.n_trees, slow.gbt.max_depth) == ("gbt", 7, 2)
    assert cfg.with_overrides(seed=11).models[1].gbt.seed == 11


def test_relative_inputs_resolve_against_config_dir(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "x.csv").write_text("")
    cfg = load_config(write_cfg(tmp_path / "c.ini", "[inputs]\nX = data/x.csv"))
    assert cfg.inputs["X"] == tmp_path / "data" / "x.csv"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.ini").with_overrides(jobs=0)


# ---------------------------------------------------------------------------
# build

def test_empty_input_gives_zero_row_frame(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("")
    cfg = write_cfg(tmp_path / "c.ini", "[inputs]\nE = e.csv")
    assert run("build", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    f = frame_from_ffr(tmp_path / "o" / "frames" / "E.ffr")
    assert len(f) == 0
    assert "WARNING" in capsys.readouterr().err


def test_malformed_binary_is_data_error(tmp_path, capsys):
    (tmp_path / "x.mbo").write_bytes(b"NOPE" + bytes(38))
    cfg = write_cfg(tmp_path / "c.ini", "[inputs]\nX = x.mbo")
    assert run("build", "--config", cfg, "--out", tmp_path / "o") == EXIT_DATA
    assert "X" in capsys.readouterr().err


def test_one_hour_session_gives_14400_rows(tmp_path):
    write_binary(synth_stream(5, 3600.0), tmp_path / "h.mbo")
    cfg = write_cfg(tmp_path / "c.ini", "[inputs]\nH = h.mbo")
    assert run("build", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    f = frame_from_ffr(tmp_path / "o" / "frames" / "H.ffr")
    assert len(f) == 14_400
    assert f.t0_ns == DEFAULT_SESSION_START_NS
    assert not f.modelable_mask[:240].any() and f.modelable_mask[240:-20].mean() > 0.95
    bins = read_csv(tmp_path / "o" / "bins" / "H.csv")
    assert len(bins) == 14_400


def test_build_is_byte_identical_on_rerun(synth_run, tmp_path):
    assert run("build", "--config", synth_run / "synth.ini", "--out", tmp_path / "again",
               "--jobs", 2) == EXIT_OK
    for sub in ("frames/AAA.ffr", "frames/BBB.csv", "bins/AAA.csv"):
        assert (synth_run / sub).read_bytes() == (tmp_path / "again" / sub).read_bytes(), sub


def test_synth_outputs_and_seed(synth_run, tmp_path):
    ini = (synth_run / "synth.ini").read_text()
    assert "AAA = inputs/AAA.csv" in ini
    base = write_cfg(tmp_path / "b.ini", "[synth]\nsymbols = AAA\nduration_s = 20")
    run("synth", "--config", base, "--out", tmp_path / "s1", "--seed", 1)
    run("synth", "--config", base, "--out", tmp_path / "s2", "--seed", 1)
    run("synth", "--config", base, "--out", tmp_path / "s3", "--seed", 2)
    a, b, c = (tmp_path / f"s{i}" / "inputs" / "AAA.csv" for i in (1, 2, 3))
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_synth_refuses_config_with_inputs(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", "[inputs]\nX = x.csv")
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == EXIT_USAGE


# ---------------------------------------------------------------------------
# screen / eval / diag

def test_commands_need_frames(tmp_path, capsys):
    assert run("screen", "--out", tmp_path / "nothing") == EXIT_DATA
    cfg = write_cfg(tmp_path / "c.ini", "[inputs]\nQQQ = q.csv")
    assert run("eval", "--config", cfg, "--out", tmp_path / "nothing") == EXIT_DATA
    assert "QQQ" in capsys.readouterr().err


def test_screen_writes_rankings_and_consensus(synth_run, tmp_path):
    cfg = write_cfg(tmp_path / "s.ini", (synth_run / "synth.ini").read_text(),
                    "[screen]\ntop_k = 6")
    assert run("screen", "--config", cfg, "--out", synth_run) == EXIT_OK
    rows = read_csv(synth_run / "screen" / "consensus.csv")
    assert rows and list(rows[0]) == ["feature", "n_symbols", "mean_best_rank", "method_hits",
                                      "consensus"]
    for r in rows:
        assert r["consensus"] == ("Yes" if int(r["n_symbols"]) >= 2 else "No")
    rank = read_csv(synth_run / "screen" / "rankings_AAA.csv")
    assert {r["method"] for r in rank} == {"mi", "gbt", "lasso"}


def test_single_symbol_screen_marks_every_feature_yes(synth_run, tmp_path):
    text = (synth_run / "synth.ini").read_text().replace("BBB = inputs/BBB.csv", "")
    cfg = write_cfg(tmp_path / "one.ini", text, "[screen]\ntop_k = 5")
    out = tmp_path / "one"
    (out / "frames").mkdir(parents=True)
    (out / "frames" / "AAA.ffr").write_bytes((synth_run / "frames" / "AAA.ffr").read_bytes())
    assert run("screen", "--config", cfg, "--out", out) == EXIT_OK
    rows = read_csv(out / "screen" / "consensus.csv")
    assert rows and all(r["n_symbols"] == "1" and r["consensus"] == "Yes" for r in rows)


def test_threshold_one_needs_every_symbol(synth_run, tmp_path):
    cfg = write_cfg(tmp_path / "t.ini", (synth_run / "synth.ini").read_text(),
                    "[screen]\ntop_k = 4\nthreshold = 1.0")
    out = tmp_path / "t"
    (out / "frames").mkdir(parents=True)
    for s in ("AAA", "BBB"):
        (out / "frames" / f"{s}.ffr").write_bytes((synth_run / "frames" / f"{s}.ffr").read_bytes())
    assert run("screen", "--config", cfg, "--out", out) == EXIT_OK
    rows = read_csv(out / "screen" / "consensus.csv")
    for r in rows:
        assert (r["consensus"] == "Yes") == (r["n_symbols"] == "2")


def test_eval_single_model_summary_shape(synth_run, tmp_path):
    cfg = write_cfg(tmp_path / "e.ini", (synth_run / "synth.ini").read_text(),
                    "[features]\nhorizons = 1", "[screen]\nhorizon = 1",
                    "[report]\nfigures = no")
    text = cfg.read_text().replace("models = AR5, HAR, GBT", "models = AR5")
    cfg.write_text(text)
    out = tmp_path / "ev"
    (out / "frames").mkdir(parents=True)
    for s in ("AAA", "BBB"):
        (out / "frames" / f"{s}.ffr").write_bytes((synth_run / "frames" / f"{s}.ffr").read_bytes())
    assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
    rows = read_csv(out / "eval" / "summary.csv")
    assert [(r["symbol"], r["model"]) for r in rows] == [("AAA", "AR5"), ("BBB", "AR5")]
    assert list(rows[0]) == ["symbol", "model", "250ms"]
    assert not (out / "eval" / "figures").exists()


def test_eval_full_grid_and_figures(synth_run, capsys):
    assert run("eval", "--config", synth_run / "synth.ini", "--out", synth_run) == EXIT_OK
    rows = read_csv(synth_run / "eval" / "summary.csv")
    assert list(rows[0]) == ["symbol", "model", "250ms", "1s", "2s", "5s"]
    assert [(r["symbol"], r["model"]) for r in rows] == [
        (s, m) for s in ("AAA", "BBB") for m in ("AR5", "HAR", "GBT")]
    report = read_csv(synth_run / "eval" / "report.csv")
    assert len(report) == 2 * 3 * 4 * 5
    figs = synth_run / "eval" / "figures"
    assert (figs / "AAA_r2.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (figs / "BBB_GBT_residuals.png").exists()
    fc = read_csv(synth_run / "eval" / "forecasts" / "AAA_HAR_5000ms.csv")
    assert {r["fold"] for r in fc} == {"1", "2", "3", "4", "5"}


def test_diag_outputs(synth_run, tmp_path):
    cfg = write_cfg(tmp_path / "d.ini", (synth_run / "synth.ini").read_text(),
                    "[diag]\nmax_lag = 25")
    assert run("diag", "--config", cfg, "--out", synth_run) == EXIT_OK
    adf = read_csv(synth_run / "diag" / "adf.csv")
    assert [r["symbol"] for r in adf] == ["AAA", "BBB"]
    assert all(r["reject_5pct"] == "true" and float(r["statistic"]) < float(r["crit_5pct"])
               for r in adf)
    acf = read_csv(synth_run / "diag" / "acf_AAA.csv")
    assert len(acf) == 26 and float(acf[0]["acf"]) == 1.0
    first = (synth_run / "diag" / "adf.csv").read_bytes()
    assert run("diag", "--config", cfg, "--out", synth_run) == EXIT_OK
    assert (synth_run / "diag" / "adf.csv").read_bytes() == first


def test_flags_work_after_subcommand_and_log_level(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LWI_LOG", "debug")
    base = write_cfg(tmp_path / "b.ini", "[synth]\nsymbols = Z\nduration_s = 5\nformat = binary")
    assert main(["--seed", "4", "synth", "--config", str(base), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert (tmp_path / "o" / "inputs" / "Z.mbo").read_bytes()[:4] == b"MBO1"
    assert logging.getLogger("lwi").getEffectiveLevel() == logging.DEBUG
