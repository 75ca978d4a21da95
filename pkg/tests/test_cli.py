import csv
import json
import subprocess
import sys

import pytest

from timo import __version__
from timo.cli import main
from timo.sampler import read_manifest, read_tensor

TABLE6 = ["M-M-M-M", "S-M-M-M", "D-M-M-M", "D-D-M-M", "D-D-D-M", "D-D-D-D"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_paramcount_pass(capsys):
    code, out, _ = run(capsys, "paramcount", "--variant", "base")
    assert code == 0 and "90,148,736" in out and "PASS" in out


def test_paramcount_json_header(capsys):
    code, out, _ = run(capsys, "paramcount", "--variant", "huge", "--json", "--seed", "4")
    doc = json.loads(out[: out.rindex("}") + 1])
    h = doc["header"]
    assert code == 0 and h["version"] == __version__ and h["seed"] == 4 and h["dtype"] == "float64"
    assert doc["total"] == 671_899_392


def test_flops_table6_order(capsys):
    code, out, _ = run(capsys, "flops", "--variant", "base", "--T", "3", "--size", "256", "--attn", *TABLE6)
    assert code == 0 and "PASS" in out


def test_flops_wrong_order_fails(capsys):
    code, out, _ = run(capsys, "flops", "--attn", "D-D-D-D", "M-M-M-M")
    assert code == 1 and "FAIL" in out


def test_flops_json_file(tmp_path, capsys):
    path = tmp_path / "f.json"
    code, _, _ = run(capsys, "flops", "--attn", "D-D-M-M", "--out-json", str(path), "--T", "2", "--size", "128")
    doc = json.loads(path.read_text())
    assert code == 0 and doc["header"]["geometry"] == {"T": 2, "H": 128, "W": 128, "C": 3}
    rep = doc["reports"][0]
    assert rep["total_flops"] == sum(rep["components"].values())


def test_scaling_csv(tmp_path, capsys):
    path = tmp_path / "s.csv"
    code, out, _ = run(capsys, "scaling", "--np", "8", "--dim", "32", "--heads", "2", "--T-list", "2,4,8",
                       "--report", str(path))
    rows = list(csv.DictReader(open(path)))
    assert code == 0 and len(rows) == 9 and set(rows[0]) == {"T", "kind", "score_flops", "spatial_flops",
                                                              "temporal_flops"}


def test_equiv(capsys):
    code, out, _ = run(capsys, "equiv", "--T", "3", "--np", "4", "--dim", "16", "--heads", "2", "--seed", "7",
                       "--trials", "50")
    assert code == 0 and "PASS" in out


def test_equiv_bad_heads(capsys):
    code, _, err = run(capsys, "equiv", "--dim", "10", "--heads", "4")
    assert code == 2 and "divisible" in err


@pytest.mark.parametrize("target", ["stga", "dstga", "block", "encoder"])
def test_gradcheck(capsys, target):
    code, out, _ = run(capsys, "gradcheck", "--target", target, "--seed", "1")
    assert code == 0 and "PASS" in out


def test_pretrain_toy_short_run_reports(tmp_path, capsys):
    path = tmp_path / "r.csv"
    code, out, _ = run(capsys, "pretrain-toy", "--steps", "2", "--report", str(path))
    rows = list(csv.DictReader(open(path)))
    # two steps cannot halve the loss, so the check reports failure
    assert code == 1 and "FAIL" in out and len(rows) == 2


def test_manifest_and_synth(tmp_path, capsys):
    cities = tmp_path / "c.csv"
    cities.write_text("name,lat,lon\nWuhan,30.59,114.31\nParis,48.86,2.35\n", encoding="utf-8")
    out_m = tmp_path / "m.json"
    assert run(capsys, "manifest", "--cities", str(cities), "--n", "7", "--out", str(out_m))[0] == 0
    assert len(read_manifest(out_m).records) == 7
    out_t = tmp_path / "t.bin"
    assert run(capsys, "synth", "--T", "2", "--size", "32", "--channels", "4", "--out", str(out_t))[0] == 0
    assert read_tensor(out_t).shape == (2, 4, 32, 32)


def test_manifest_missing_cities(tmp_path, capsys):
    code, _, err = run(capsys, "manifest", "--cities", str(tmp_path / "nope.csv"))
    assert code == 2 and err


def test_usage_errors(capsys):
    assert run(capsys, "flops", "--bogus")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "gradcheck", "--target", "nope")[0] == 2
    assert run(capsys, "equiv", "--T", "0")[0] == 2
    assert run(capsys, "paramcount", "--attn", "Q-M-M-M")[0] == 2


def test_env_seed(monkeypatch, capsys):
    monkeypatch.setenv("TIMO_SEED", "17")
    code, out, _ = run(capsys, "equiv", "--trials", "1", "--json")
    assert code == 0 and json.loads(out[: out.rindex("}") + 1])["header"]["seed"] == 17
    monkeypatch.setenv("TIMO_SEED", "abc")
    assert run(capsys, "equiv")[0] == 2


def test_acceptance_subset(capsys):
    code, out, _ = run(capsys, "acceptance", "--criterion", "1", "5")
    assert code == 0 and out.count("[PASS]") == 2


def test_reports_are_reproducible(capsys):
    a = run(capsys, "equiv", "--trials", "3", "--seed", "2", "--json")[1]
    b = run(capsys, "equiv", "--trials", "3", "--seed", "2", "--json")[1]
    assert a == b


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "timo", "paramcount", "--variant", "large"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "PASS" in r.stdout
