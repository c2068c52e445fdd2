from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from syk_battery.cli import build_parser, main, resolve_config
from syk_battery.errors import ConfigError
from syk_battery.presets import PRESETS, preset
from syk_battery.report import build_report
from syk_battery.results_io import read_csv


def run(argv, capsys):
    rc = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


def read_bytes(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


# ---------------------------------------------------------------- configuration


def test_presets_resolve():
    for name, p in PRESETS.items():
        assert p["command"] in ("charge", "otoc", "sweep", "commutators")
        args = build_parser().parse_args([p["command"], "--preset", name])
        cfg, out, pname = resolve_config(args)
        assert pname == name and cfg.N_list
    with pytest.raises(ConfigError):
        preset("fig99")


def test_config_file_then_flags(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("N_list: [5, 6]\nrealizations: 7\nbase_seed: 3\nout: somewhere\n")
    args = build_parser().parse_args(["charge", "--config", str(f), "--seed", "9"])
    cfg, out, _ = resolve_config(args)
    assert cfg.N_list == [5, 6] and cfg.realizations == 7 and cfg.base_seed == 9
    assert out.name == "somewhere"
    f.write_text("N_list: [5]\nbogus: 1\n")
    with pytest.raises(ConfigError):
        resolve_config(build_parser().parse_args(["charge", "--config", str(f)]))


def test_json_config_accepted(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"N_list": [4], "variants": ["raw"]}))
    cfg, _, _ = resolve_config(build_parser().parse_args(["sweep", "--config", str(f), "--variant", "both"]))
    assert list(cfg.variants) == ["raw", "regularized"]


def test_invalid_size_is_json_error(tmp_path, capsys):
    rc, _, err = run(["charge", "--n", 3, "--out", tmp_path / "x"], capsys)
    assert rc != 0 and json.loads(err)["error"] == "ConfigError"


# ---------------------------------------------------------------- commands


def test_minimal_charge_run(tmp_path, capsys):
    out = tmp_path / "c"
    rc, stdout, _ = run(["charge", "--n", 4, "--realizations", 2, "--seed", 0, "--out", out], capsys)
    assert rc == 0 and "charge_N4_regularized.csv" in stdout
    _, cols, d = read_csv(out / "charge_N4_regularized.csv")
    assert d.shape[0] == 321 and cols[0] == "t"
    lines = (out / "charge_N4_regularized.csv").read_text().splitlines()
    assert lines[0].startswith("# syk-battery=0.1.0 kind=charge config_hash=")
    assert lines[1].startswith("t,energy,energy_se,normalized_energy")


@pytest.mark.parametrize("cmd", [["charge"], ["otoc"], ["commutators", "--k-max", 3]])
def test_rerun_is_byte_identical(tmp_path, capsys, cmd):
    base = cmd + ["--n", 4, 5, "--realizations", 3, "--seed", 11]
    assert run(base + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert run(base + ["--out", tmp_path / "b"], capsys)[0] == 0
    assert run(base + ["--workers", 2, "--out", tmp_path / "c"], capsys)[0] == 0
    a, b, c = (read_bytes(tmp_path / x) for x in "abc")
    assert a == b
    # worker count is execution-only: same hash, same data; only the manifest records it
    ma, mc = json.loads(a.pop("manifest.json")), json.loads(c.pop("manifest.json"))
    assert a == c
    assert ma["config"].pop("workers") == 1 and mc["config"].pop("workers") == 2
    assert ma == mc


def test_commutator_zero_order_is_one(tmp_path, capsys):
    out = tmp_path / "k"
    assert run(["commutators", "--n", 4, 5, "--realizations", 2, "--k-max", 3, "--out", out], capsys)[0] == 0
    _, cols, d = read_csv(out / "commutators.csv")
    k0 = d[d[:, cols.index("k")] == 0]
    np.testing.assert_array_equal(k0[:, cols.index("mean_norm")], 1.0)
    assert np.all(d[:, cols.index("overflow_count")] == 0)


def test_debug_zero_charger(tmp_path, capsys):
    out = tmp_path / "z"
    assert run(["otoc", "--n", 4, 5, "--debug-zero-charger", "--out", out], capsys)[0] == 0
    for N in (4, 5):
        _, cols, d = read_csv(out / f"otoc_N{N}_zero.csv")
        np.testing.assert_allclose(d[:, cols.index("F")], 0.0, atol=1e-12)


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("syk-battery")
    cmd = [exe] if exe else [sys.executable, "-m", "syk_battery.cli"]
    r = subprocess.run(cmd + ["report", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode != 0
    assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "MissingResults"


# ---------------------------------------------------------------- report


def test_report_empty_dir(tmp_path, capsys):
    rc, _, err = run(["report", tmp_path], capsys)
    assert rc != 0 and json.loads(err) == {"error": "MissingResults", "message": f"no manifest.json under {tmp_path}"}


@pytest.fixture(scope="module")
def both_frames(tmp_path_factory):
    out = tmp_path_factory.mktemp("both")
    assert main(["sweep", "--n", "4", "5", "--realizations", "2", "--variant", "both", "--out", str(out)]) == 0
    return out


def test_report_lists_checks_and_cross_check(both_frames, capsys):
    rc, _, _ = run(["report", both_frames], capsys)
    assert rc == 0
    text = (both_frames / "summary.md").read_text()
    assert "### Invariant checks" in text
    for check in ("power sandwich", "speed limits", "variance sum rule", "populations sum to one"):
        assert check in text
    assert "| FAIL |" not in text.split("### Frame conversion cross-check")[0]
    assert "### Frame conversion cross-check" in text


def test_report_refuses_mismatched_hash(both_frames, tmp_path, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(both_frames, bad)
    p = bad / "sweep_raw.csv"
    lines = p.read_text().splitlines()
    lines[0] = lines[0].replace("config_hash=", "config_hash=0000")
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigError):
        build_report(bad)
    rc, _, err = run(["report", bad], capsys)
    assert rc != 0 and json.loads(err)["error"] == "ConfigError"
