import json
import subprocess
import sys
from pathlib import Path

import pytest

from curemi.cli import build_parser, main


def run(*argv):
    return main([str(a) for a in argv])


def files(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def sample(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert run("simulate", "B", "--seed", 3, "--n", 200, "--out", d) == 0
    return d


def test_simulate_outputs_and_manifest(sample):
    assert set(files(sample)) == {"data.csv", "data_full.csv", "schema.yaml", "manifest.json"}
    man = json.loads((sample / "manifest.json").read_text())
    assert man["seed"] == 3 and man["command"] == "simulate"
    assert man["outputs"] == ["data.csv", "data_full.csv", "schema.yaml", "manifest.json"]
    assert "started" not in man


def _twice(tmp_path, argv, workers=(1, 1)):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*argv, "--out", a, "--workers", workers[0]) == 0
    assert run(*argv, "--out", b, "--workers", workers[1]) == 0
    fa, fb = files(a), files(b)
    assert fa == fb
    return a


def test_fit_report_and_determinism(tmp_path, sample):
    out = _twice(tmp_path, ["fit", sample / "data_full.csv", "--schema", sample / "schema.yaml",
                            "--seed", 7, "--bootstrap", 4], workers=(1, 2))
    lines = (out / "fit_report.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["alpha0", "alpha_W", "alpha_X",
                                                      "beta_W", "beta_Z"]
    assert lines[1].endswith("bootstrap")


def test_fit_refuses_missing_data(tmp_path, sample, capsys):
    code = run("fit", sample / "data.csv", "--schema", sample / "schema.yaml", "--seed", 1,
               "--out", tmp_path)
    err = capsys.readouterr().err.strip()
    assert code == 2 and err.startswith("error: MissingDataPresent:") and "\n" not in err
    assert run("fit", sample / "data.csv", "--schema", sample / "schema.yaml", "--seed", 1,
               "--out", tmp_path, "--allow-complete-case") == 0


@pytest.mark.parametrize("method", ["exact", "approximate"])
def test_impute_then_pool_is_deterministic(tmp_path, sample, method):
    argv = ["impute", sample / "data.csv", "--schema", sample / "schema.yaml", "--seed", 11,
            "--method", method, "--k", 3, "--iters", 2, "--mh-burn", 20, "--mh-thin", 2]
    out = _twice(tmp_path, argv, workers=(1, 2))
    names = sorted(files(out))
    assert names == ["imputed_k01.csv", "imputed_k02.csv", "imputed_k03.csv", "manifest.json",
                     "schema.yaml"]
    imputed = sorted(str(p) for p in out.glob("imputed_*.csv"))
    pooled = _twice(tmp_path / "pool", ["pool", *imputed, "--schema", out / "schema.yaml",
                                        "--seed", 1])
    header = (pooled / "pooled_report.csv").read_text().splitlines()[0]
    assert header == "parameter,estimate,se,ci_lower,ci_upper,fmi"


def test_impute_rejects_single_dataset(tmp_path, sample, capsys):
    assert run("impute", sample / "data.csv", "--schema", sample / "schema.yaml", "--k", 1,
               "--seed", 1, "--out", tmp_path) == 2
    assert capsys.readouterr().err.startswith("error: ValueError")


def test_impute_defaults():
    args = build_parser().parse_args(["impute", "d.csv", "--schema", "s.yaml"])
    assert (args.k, args.iters, args.mh_burn, args.mh_thin, args.mh_sd) == (10, 10, 500, 100, 1.0)
    assert args.method == "exact"


def test_study_identical_across_workers(tmp_path):
    out = _twice(tmp_path, ["study", "C", "--b", 2, "--n", 150, "--seed", 5, "--methods",
                            "complete-case,exact,approximate", "--k", 2, "--iters", 2,
                            "--mh-burn", 20, "--mh-thin", 2], workers=(1, 2))
    rows = (out / "study_metrics.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"complete-case", "exact", "approximate"}


def test_study_full_coverage_band(tmp_path):
    assert run("study", "A", "--b", 50, "--methods", "full", "--seed", 2, "--out", tmp_path) == 0
    rows = [r.split(",") for r in (tmp_path / "study_metrics.csv").read_text().splitlines()]
    col = rows[0].index("coverage")
    assert all(0.8 <= float(r[col]) <= 1.0 for r in rows[1:])


def test_unknown_scenario(tmp_path, capsys):
    assert run("study", "Q", "--seed", 1, "--out", tmp_path) == 2
    assert capsys.readouterr().err.startswith("error: UnknownScenario:")


def test_scenario_file_and_config_file(tmp_path):
    scen = tmp_path / "scen.yaml"
    scen.write_text("base: A\nmissing_frac: 0.4\n")
    conf = tmp_path / "conf.yaml"
    conf.write_text("n: 120\nreplicate: 2\n")
    assert run("simulate", scen, "--config", conf, "--seed", 4, "--out", tmp_path / "o") == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["diagnostics"]["scenario"]["missing_frac"] == 0.4
    assert man["diagnostics"]["scenario"]["n"] == 120 and man["config"]["replicate"] == 2
    assert run("simulate", scen, "--config", conf, "--seed", 4, "--n", 90,
               "--out", tmp_path / "p") == 0
    man = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert man["diagnostics"]["scenario"]["n"] == 90
    conf.write_text("bogus: 1\n")
    assert run("simulate", scen, "--config", conf, "--out", tmp_path / "q") == 2


def test_check_followup(tmp_path, sample, capsys):
    assert run("check-followup", sample / "data_full.csv", "--schema", sample / "schema.yaml",
               "--stratify", "X", "--seed", 0, "--out", tmp_path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].startswith("stratum X=0")
    rows = json.loads((tmp_path / "manifest.json").read_text())["diagnostics"]["followup"]
    assert [r["stratum"] for r in rows] == ["X=0", "X=1"]


def test_missing_seed_is_drawn_and_recorded(tmp_path, sample):
    assert run("check-followup", sample / "data_full.csv", "--schema", sample / "schema.yaml",
               "--out", tmp_path) == 0
    assert isinstance(json.loads((tmp_path / "manifest.json").read_text())["seed"], int)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "curemi.cli", "simulate", "A", "--n", "50",
                           "--seed", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "curemi.cli", "fit", "nope.csv", "--schema",
                           str(tmp_path / "schema.yaml"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error: FileNotFoundError")
