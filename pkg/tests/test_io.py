import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfo2.config import ConfigError, coerce, parse_config, render_config
from rfo2.energy import SpinConfig
from rfo2.fields import NEUMANN, ScalarField
from rfo2.geometry import Region
from rfo2.io import (
    FormatError,
    RunDir,
    csv_text,
    field_from_bytes,
    field_to_bytes,
    read_field,
    region_from_bytes,
    region_from_json,
    region_hash,
    region_to_bytes,
    region_to_json,
    spins_from_bytes,
    spins_to_bytes,
    write_field,
)

sites = st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20), st.integers(-3, 3)),
                 max_size=60)


@settings(max_examples=50)
@given(sites)
def test_region_round_trips(pts):
    R = Region(pts, d=3) if pts else Region(np.zeros((0, 3), dtype=np.int64), d=3)
    assert region_from_bytes(region_to_bytes(R)) == R
    assert region_from_json(region_to_json(R)) == R


def test_region_run_encoding_is_compact():
    R = Region.box((0, 0), 10)
    # one run per row of the box
    assert len(region_to_bytes(R)) == 16 + 10 * 3 * 8
    assert region_hash(R) == region_hash(Region(R.coords[::-1]))


def test_region_bytes_rejects_bad_input():
    data = region_to_bytes(Region.box((0, 0), 3))
    with pytest.raises(FormatError):
        region_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        region_from_bytes(data[:-3])
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(FormatError):
        region_from_bytes(bytes(bad))


def test_field_round_trip_and_hash_check(tmp_path):
    R = Region.box((0, 0), 5)
    f = ScalarField(R, np.random.default_rng(0).standard_normal(len(R)))
    data = field_to_bytes(f, lam=0.25, bc=NEUMANN, epsilon=0.3, seed=11)
    back, meta = field_from_bytes(data, R)
    assert np.array_equal(back.values, f.values)
    assert meta["bc"] == NEUMANN and meta["seed"] == 11 and meta["lam"] == 0.25
    with pytest.raises(FormatError):
        field_from_bytes(data, Region.box((1, 0), 5))
    with pytest.raises(FormatError):
        field_from_bytes(data[:-8], R)
    paths = write_field(str(tmp_path / "g.bin"), f, lam=0.25, seed=11)
    again, _ = read_field(paths[0])
    assert np.array_equal(again.values, f.values)
    side = json.loads(open(paths[2]).read())
    assert side["region_sha256"] == region_hash(R)


def test_spin_round_trip():
    R = Region.box((0, 0, 0), 3)
    s = SpinConfig(R, np.linspace(-3, 3, len(R)))
    back = spins_from_bytes(spins_to_bytes(s), R)
    assert np.array_equal(back.theta, s.theta)
    with pytest.raises(FormatError):
        spins_from_bytes(spins_to_bytes(s), Region.box((0, 0, 0), 2))
    with pytest.raises(FormatError):
        spins_from_bytes(b"RFOF" + spins_to_bytes(s)[4:], R)


def test_csv_uses_crlf():
    text = csv_text(["a", "b"], [(1, "x,y"), (2, "z")])
    assert text.count("\r\n") == 3
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[1] == ["1", "x,y"]


def test_run_dir_manifest_is_deterministic(tmp_path):
    mans = []
    for sub in ("a", "b"):
        run = RunDir(str(tmp_path / sub), config_text="seed = 1\n", seed=1, command="scales")
        run.write_json("out.json", {"x": np.int64(3), "y": np.arange(2), "z": {2, 1}})
        run.write_csv("t.csv", ["k"], [(1,), (2,)])
        mans.append(run.finish())
    assert mans[0] == mans[1]
    assert [e["file"] for e in mans[0]["files"]] == ["out.json", "t.csv"]
    assert json.loads((tmp_path / "a" / "out.json").read_text()) == {"x": 3, "y": [0, 1], "z": [1, 2]}


def test_config_parsing():
    cfg = parse_config("# comment\nd = 3\n\nepsilon = 0.5  # trailing\nell = none\n"
                       "dump_stages = yes\n")
    assert cfg == {"d": 3, "epsilon": 0.5, "ell": None, "dump_stages": True}
    for bad in ("nonsense = 1\n", "d = two\n", "d 3\n", "d = 1\nd = 2\n", " = 4\n",
                "dump_stages = maybe\n"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    assert coerce("side", "16") == 16
    assert render_config({"side": 8, "d": 2}) == "d = 2\nside = 8\n"
    assert parse_config(render_config(cfg)) == cfg
