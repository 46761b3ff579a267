from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from pcrlab import cli, experiments, rmt
from pcrlab.linalg import chi1_upper_quantile


def write_config(tmp_path, **over):
    cfg = {"variant": "out", "model": "spiked", "n": 40, "p": 30, "reps": 5, "tau0_grid": [0.0, 0.5]}
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pcrlab", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.startswith("pcrlab ")


def test_simulate_writes_csv_and_manifest(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "res" / "run.csv"
    assert cli.main(["simulate", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 8
    man = json.loads((tmp_path / "res" / "run.manifest.json").read_text())
    assert man["outputs"]["run.csv"] == experiments.git_blob_sha1(out.read_bytes())
    assert man["configs"]["run"]["reps"] == 5
    assert not list((tmp_path / "res").glob(".*tmp"))


def test_simulate_seed_override_and_threads(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    a, b, c = (tmp_path / f"{x}.csv" for x in "abc")
    assert cli.main(["simulate", str(cfg), "--out", str(a)]) == 0
    monkeypatch.setenv("PCRLAB_THREADS", "2")
    assert cli.main(["simulate", str(cfg), "--out", str(b)]) == 0
    assert cli.main(["simulate", str(cfg), "--out", str(c), "--seed", "5", "--threads", "1"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()
    assert set(row["seed"] for row in csv.DictReader(c.open())) == {"5"}


@pytest.mark.parametrize(
    "content, needle",
    [
        ('{"variant": "out", "model": "spiked", "n": 40', "line 1"),
        ('{"variant": "out", "model": "spiked", "n": 40, "p": 30, "colour": 1}', "config field <root>"),
        ('{"variant": "out", "model": "spiked", "n": 40, "p": "x"}', "config field p"),
        ('{"variant": "out", "model": "spiked", "n": 40, "p": 30, "k": 30}', "k=30"),
        ("[1, 2]", "JSON object"),
    ],
)
def test_simulate_config_errors(tmp_path, capsys, content, needle):
    path = tmp_path / "bad.json"
    path.write_text(content)
    assert cli.main(["simulate", str(path), "--out", str(tmp_path / "x.csv")]) == 2
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PCRLAB_THREADS", "many")
    assert cli.main(["simulate", str(write_config(tmp_path)), "--out", str(tmp_path / "x.csv")]) == 2


def test_io_errors(tmp_path):
    assert cli.main(["simulate", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x.csv")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["simulate", str(write_config(tmp_path)), "--out", str(blocker / "x.csv")]) == 3


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["reproduce", "fig9", "--out", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_reproduce_fig2_smoke(tmp_path):
    out = tmp_path / "fig2"
    assert cli.main(["reproduce", "fig2", "--scale", "desk", "--reps", "2", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fig2_in_spiked_gamma0.5.csv", "fig2_in_spiked_gamma2.csv", "manifest.json"]
    for name in names[:2]:
        rows = list(csv.DictReader((out / name).open()))
        assert len(rows) == 42
        assert {r["variant"] for r in rows} == {"in"}
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) == set(names[:2])
    assert man["master_seed"] == experiments.DEFAULT_SEED


def test_reproduce_bad_reps(tmp_path):
    assert cli.main(["reproduce", "fig2", "--reps", "0", "--out", str(tmp_path)]) == 2


def test_limits_flags(capsys):
    assert cli.main(["limits", "--gamma", "2", "--strength", "4", "--theta-proj", "1"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["c0"] == pytest.approx(2 * 5 / 16)
    assert d["psi_at_spikes"] == [pytest.approx(5 * 1.5)]
    assert d["alternate_closed_form"]["c0_theta_e1"] == pytest.approx(5 / 16)


def test_limits_query_file(tmp_path):
    q = tmp_path / "q.json"
    q.write_text(json.dumps({"gamma": 0.5, "spikes": [6.0], "bulk": [[0.5, 0.5], [1.5, 0.5]]}))
    out = tmp_path / "lim.json"
    assert cli.main(["limits", str(q), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    law = rmt.SpectralLaw(((0.5, 0.5), (1.5, 0.5)), 0.5)
    assert d["xi"][0][0] == pytest.approx(rmt.xi(1, 6.0, law))
    assert d["c0"] is None
    assert "alternate_closed_form" not in d


@pytest.mark.parametrize(
    "argv",
    [
        ["limits", "--gamma", "2", "--strength", "0.5"],  # below the threshold
        ["limits", "--strength", "4"],  # no gamma
        ["limits", "--gamma", "2", "--bulk", "1-1"],
        ["limits", "--gamma", "2", "--strength", "4", "--theta-proj", "2"],
    ],
)
def test_limits_errors(argv):
    assert cli.main(argv) == 2


def test_power_table(capsys):
    assert cli.main(["power", "--scenario", "both_random", "--gamma", "2", "--h", "0,1,2"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "h,t,upsilon"
    vals = [float(l.split(",")[2]) for l in lines[1:]]
    law = rmt.kappa2_limit_law("both_random", gamma=2.0, m1=1.0, m2=3.0, h=1.0)
    assert vals[1] == pytest.approx(rmt.asymptotic_power(chi1_upper_quantile(0.05), law), rel=1e-5)
    assert vals == sorted(vals)


def test_power_theta_fixed_from_strength(capsys):
    assert cli.main(["power", "--scenario", "beta_random_theta_fixed", "--gamma", "2", "--strength", "4",
                     "--h", "0"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["power", "--scenario", "beta_random_theta_fixed", "--gamma", "2", "--c0", "0.625",
                     "--c4", str(rmt.phi_classical(2, 4.0, 2.0) / 2), "--h", "0"]) == 0
    assert capsys.readouterr().out == first


def test_power_missing_c1(capsys):
    assert cli.main(["power", "--scenario", "beta_fixed_theta_random", "--gamma", "2"]) == 2
    assert "open question" in capsys.readouterr().err
    assert cli.main(["power", "--scenario", "beta_fixed_theta_random", "--gamma", "2", "--c1", "0.5"]) == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["power", "--scenario", "both_random", "--gamma", "-1"],
        ["power", "--scenario", "both_random", "--gamma", "1", "--alpha", "2"],
        ["power", "--scenario", "beta_random_theta_fixed", "--gamma", "1"],
    ],
)
def test_power_errors(argv):
    assert cli.main(argv) == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8
    assert "all checks passed" in out


def test_selftest_detects_nondeterminism(monkeypatch, capsys):
    from pcrlab import selftest

    fresh = np.random.SeedSequence()  # OS entropy: each call differs

    def leaky(seed, *key):
        return np.random.default_rng(fresh.spawn(1)[0])

    monkeypatch.setattr(experiments, "_rng", leaky)
    buf = io.StringIO()
    ok = selftest.run_selftest(buf, [c for c in selftest.CHECKS if c[0] == "determinism"])
    assert not ok
    assert "FAIL determinism" in buf.getvalue()
    assert cli.main(["selftest"]) == 1


def test_selftest_reports_crash():
    from pcrlab import selftest

    def boom():
        raise RuntimeError("broken")

    buf = io.StringIO()
    assert not selftest.run_selftest(buf, [("boom", boom)])
    assert "FAIL boom: raised RuntimeError: broken" in buf.getvalue()
