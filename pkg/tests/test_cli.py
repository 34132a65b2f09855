import json
import os
import subprocess
import sys

import pytest

from jacobisup.cli import EXIT_PASS, EXIT_USAGE, RunConfig, main, render
from jacobisup.errors import DomainError

POINT = "0.1,1.1,0.2,0.3;0.0,1.6,0.5,0.8"


def run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


# ---------------------------------------------------------------- run configuration


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(DomainError):
        RunConfig.from_dict({"subcommand": "moment", "parameters": {}, "colour": "red"})
    with pytest.raises(DomainError):
        RunConfig.from_dict({"subcommand": "plot", "parameters": {}})
    cfg = RunConfig.from_dict({"subcommand": "moment", "parameters": {"p": 5}})
    assert cfg.to_dict()["parameters"] == {"p": 5}


def test_runconfig_validation():
    with pytest.raises(DomainError):
        RunConfig("moment", {}, output={"path": None, "format": "xml"})
    with pytest.raises(DomainError):
        RunConfig("moment", {}, threads=0)


def test_render_embeds_config_and_version():
    cfg = RunConfig("moment", {"p": 5})
    doc = json.loads(render(cfg, [{"x": float("inf"), "y": 1.5}], "pass"))
    assert doc["config"]["parameters"] == {"p": 5} and doc["version"]
    assert doc["rows"][0]["x"] == "inf"


# ---------------------------------------------------------------- subcommands


def test_selftest(capsys):
    rc, out, _ = run(capsys, "specfun-selftest")
    doc = json.loads(out)
    assert rc == EXIT_PASS and doc["status"] == "pass"
    assert len(doc["rows"]) == 4 and all(r["passed"] for r in doc["rows"])
    assert doc["config"]["subcommand"] == "specfun-selftest"


def test_orthogonality_single_k_mismatched(capsys):
    rc, out, _ = run(capsys, "orthogonality", "--k-list", "12", "--l", "1", "--r", "0", "--l2", "2", "--r2", "1")
    doc = json.loads(out)
    assert rc == EXIT_PASS
    assert len(doc["rows"]) == 1 and doc["rows"][0]["target"] == 0


def test_bergman_both_mode(capsys):
    rc, out, _ = run(capsys, "bergman", "--k", "12", "--points", POINT)
    doc = json.loads(out)
    assert rc == EXIT_PASS
    for row in doc["rows"]:
        assert row["rel_diff"] <= 1e-4
        assert "spectral_log" in row and "geometric_log" in row


def test_bergman_scan_metadata(capsys):
    rc, out, _ = run(capsys, "bergman", "--k", "12", "--scan", "--grid-density", "0.5")
    (row,) = json.loads(out)["rows"]
    assert rc == EXIT_PASS and set(row["argmax"]) >= {"u", "v", "x", "y"}


def test_bergman_odd_k_usage(capsys):
    rc, _, err = run(capsys, "bergman", "--k", "11")
    assert rc == EXIT_USAGE
    assert json.loads(err)["error"] == "DomainError"


def test_mass_empty_range_usage(capsys):
    rc, _, _ = run(capsys, "mass", "--target", "sk", "--k-min", "20", "--k-max", "18")
    assert rc == EXIT_USAGE


def test_unknown_option_usage(capsys):
    rc, _, _ = run(capsys, "moment", "--colour", "red")
    assert rc == EXIT_USAGE


def test_moment_forced_vanishing_refusal(capsys):
    rc, out, _ = run(capsys, "moment", "--p", "5", "--D", "5", "--k", "12")
    (row,) = json.loads(out)["rows"]
    assert rc == EXIT_PASS
    assert row["refused"] and row["classifier"]["forced_all"]


def test_moment_missing_arguments(capsys):
    rc, _, _ = run(capsys, "moment", "--p", "5")
    assert rc == EXIT_USAGE


def test_moment_batch_csv(capsys, tmp_path):
    batch = tmp_path / "jobs.csv"
    batch.write_text("p,D,k,kind\n5,5,12,moment\n7,-7,10,moment\n7,,12,moretwist\n")
    out = tmp_path / "out.csv"
    rc, _, _ = run(capsys, "moment", "--batch", str(batch), "--format", "csv", "--out", str(out))
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert rc == EXIT_PASS
    # header plus one row per job
    assert len(lines) == 1 + 3
    assert "refused" in lines[0]


def test_export_basis_elliptic(capsys):
    rc, out, _ = run(capsys, "export-basis", "--kind", "elliptic", "--k", "12", "--n", "5")
    (row,) = json.loads(out)["rows"]
    assert rc == EXIT_PASS
    assert len(row["coeffs"]) == 6


# ---------------------------------------------------------------- determinism


def test_determinism_same_config(capsys):
    argv = ("bergman", "--k", "12", "--mode", "spectral", "--points", POINT)
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    assert a == b


def test_thread_count_independence(capsys):
    argv = ("bergman", "--k", "12", "--mode", "spectral", "--points", POINT)
    _, a, _ = run(capsys, *argv, "--threads", "1")
    _, b, _ = run(capsys, *argv, "--threads", "4")
    da, db = json.loads(a), json.loads(b)
    assert da["rows"] == db["rows"] and da["summary"] == db["summary"]
    assert da["config"]["threads"] == 1 and db["config"]["threads"] == 4


def _subprocess_rows(flag):
    env = {**os.environ, "JACOBISUP_NUMBA": flag}
    argv = [sys.executable, "-m", "jacobisup.cli", "bergman", "--k", "12", "--mode", "spectral", "--points", POINT]
    out = subprocess.run(argv, env=env, capture_output=True, text=True, check=True, timeout=900)
    return json.loads(out.stdout)["rows"]


def test_backends_agree():
    a = _subprocess_rows("1")
    b = _subprocess_rows("0")
    for ra, rb in zip(a, b):
        assert ra["spectral_log"] == pytest.approx(rb["spectral_log"], abs=1e-10)
