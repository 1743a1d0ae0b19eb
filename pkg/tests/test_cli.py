import io
import json
import subprocess
import sys

import numpy as np
import pytest

from rfo2.cli import main
from rfo2.io import field_from_bytes, file_sha256, region_from_bytes


def run(argv):
    buf = io.StringIO()
    code = main(argv, out=buf)
    return code, buf.getvalue()


def test_scales_output():
    code, text = run(["scales", "--epsilon", "0.3"])
    assert code == 0
    assert text == "ell=2 L=8 clamped=true\n"


@pytest.mark.parametrize("argv", [
    ["scales", "--epsilon", "2"],
    ["scales", "--epsilon", "abc"],
    ["scales", "--side", "3"],
    ["bogus"],
    [],
    ["sample", "--bc", "periodic"],
    ["sample", "--init", "hot"],
    ["classify", "--profile", "other", "--side", "16"],
])
def test_usage_and_config_errors_exit_2(argv):
    assert run(argv)[0] == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epsilon = 0.3\nell = 4\n")
    code, text = run(["scales", "--config", str(cfg), "--ell", "2", "--L", "16"])
    assert code == 0 and text.startswith("ell=2 L=16")
    cfg.write_text("epsilon = 0.3\nbeta = 2\n")
    assert run(["scales", "--config", str(cfg)])[0] == 2
    cfg.write_text("epsilonn = 0.3\n")
    assert run(["scales", "--config", str(cfg)])[0] == 2
    assert run(["scales", "--config", str(tmp_path / "missing.cfg")])[0] == 2


def test_fields_writes_readable_dumps(tmp_path):
    out = tmp_path / "f"
    code, text = run(["fields", "--side", "8", "--seed", "3", "--out", str(out)])
    assert code == 0
    assert json.loads(text)["sites"] == 64
    reg = region_from_bytes((out / "region.rfo1").read_bytes())
    assert len(reg) == 64
    man = json.loads((out / "manifest.json").read_text())
    for e in man["files"]:
        assert e["sha256"] == file_sha256(str(out / e["file"]))
    assert man["seed"] == 3 and man["command"] == "fields"


def test_sample_is_byte_identical_across_runs(tmp_path):
    args = ["sample", "--side", "8", "--sweeps", "20", "--burn-in", "10", "--chains", "2",
            "--init", "ordered"]
    assert run(args + ["--out", str(tmp_path / "a")])[0] == 0
    assert run(args + ["--out", str(tmp_path / "b")])[0] == 0
    for name in ("observables.csv", "sample.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "observables.csv").read_bytes().split(b"\r\n")
    assert rows[0] == b"seed,sample,m_cos,m_sin,energy"
    assert len(rows) == 1 + 2 * 20 + 1


def test_classify_contours_and_surgery(tmp_path):
    code, text = run(["classify", "--side", "32", "--ell", "2", "--L", "8",
                      "--out", str(tmp_path / "c")])
    assert code == 0 and json.loads(text)["boxes"] == 16
    code, text = run(["contours", "--ell", "2", "--L", "8"])
    assert code == 0 and json.loads(text)["contours"] == 1
    code, text = run(["surgery", "--ell", "2", "--L", "8", "--k", "1"])
    res = json.loads(text)
    assert code == 0 and res["delta"] > 0 and res["bookkeeping_error"] < 1e-8


def test_verify_suites():
    code, text = run(["verify", "--l", "8", "--d", "2", "--samples", "1000"])
    assert code == 0 and json.loads(text)["samples"] == 1000
    assert run(["verify", "--l", "8", "--d", "2", "--samples", "10"])[0] == 2
    assert run(["verify", "--suite", "other"])[0] == 2
    code, text = run(["verify", "--suite", "dirty", "--side", "32", "--ell", "2", "--L", "8",
                      "--samples", "1000", "--K", "2"])
    assert code == 0 and 0.0 <= json.loads(text)["density"] <= 1.0


def test_resource_limit_exits_3():
    # the full-size 3-D fixture does not fit in the default memory budget
    assert run(["surgery", "--d", "3", "--ell", "8", "--L", "32"])[0] == 3


def test_module_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "rfo2", "scales", "--epsilon", "0.3"],
                       capture_output=True, text=True)
    assert p.returncode == 0 and p.stdout.startswith("ell=2")
    p = subprocess.run([sys.executable, "-m", "rfo2", "scales", "--nope"], capture_output=True)
    assert p.returncode == 2


def test_field_dump_decodes_against_its_region(tmp_path):
    out = tmp_path / "f"
    assert run(["fields", "--side", "6", "--lam", "0.1", "--out", str(out)])[0] == 0
    reg = region_from_bytes((out / "region.rfo1").read_bytes())
    g, meta = field_from_bytes((out / "green.rfof").read_bytes(), reg)
    assert meta["lam"] == 0.1 and meta["bc"] == "dirichlet"
    assert np.abs(g.values).max() == pytest.approx(json.loads((out / "fields.json").read_text())["g_sup"])
