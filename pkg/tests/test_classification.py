import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfo2.classification import (
    ClassifierParams,
    DisorderClassifier,
    Psi,
    avg_potential_event,
    box_reports_csv,
    pairing,
    phase_fields,
    psi,
    psi0,
    psi1,
    region_taxonomy,
)
from rfo2.energy import SpinConfig
from rfo2.fields import DIRICHLET, NEUMANN, gradient_energy, sample_alpha, solve_green
from rfo2.geometry import LatticeBox, Region, internal_edges


def test_box_statistics_match_direct_solves():
    real = sample_alpha(Region.box((0, 0), 8), 1, 0.3)
    p = ClassifierParams.calibrated(0.3, 2, 8)
    clf = DisorderClassifier(real, p)
    box = LatticeBox((3, -2), 8)
    R = box.region()
    st_ = clf.stats(8, box.corner)
    for li, lam in enumerate(p.stat_lams(8)):
        gd = solve_green(real, R, lam, DIRICHLET, tol=1e-13)
        assert st_["gsup"][li, 0] == pytest.approx(np.abs(gd.values).max(), rel=1e-9)
        assert st_["g2"][li, 0] == pytest.approx(gd.values @ gd.values, rel=1e-9)
        assert st_["grad2"][li, 0] == pytest.approx(gradient_energy(gd), rel=1e-9)
        if lam > 0:
            gn = solve_green(real, R, lam, NEUMANN, tol=1e-13)
        else:
            gn = solve_green(real, R, 0.0, NEUMANN, tol=1e-13)
        i, j = internal_edges(R)
        assert st_["g2"][li, 1] == pytest.approx(gn.values @ gn.values, rel=1e-8)
        assert st_["grad2"][li, 1] == pytest.approx(np.sum((gn.values[i] - gn.values[j]) ** 2),
                                                     rel=1e-8)
    a = real.alpha_at(R.coords)
    assert st_["alpha_sup"] == pytest.approx(np.abs(a).max())
    assert st_["alpha_mean"] == pytest.approx(a.mean())


def test_windowed_potential_matches_reference():
    real = sample_alpha(Region.box((0, 0), 16), 5, 0.3)
    p = ClassifierParams.calibrated(0.3, 2, 16)
    clf = DisorderClassifier(real, p)
    box = LatticeBox((0, 0), 16)
    r = p.r1_window(16)
    for li, lam in enumerate(p.stat_lams(16)):
        _, margin, _ = avg_potential_event(real, box, r, p.A, lam)
        assert clf.stats(16, (0, 0))["r1min"][li, 0] == pytest.approx(margin, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_phase_fields_match_site_scan(seed):
    R = Region.box((0, 0), 16)
    rng = np.random.default_rng(seed)
    th = np.zeros(len(R))
    c = R.coords
    th[(c[:, 0] >= 6) & (c[:, 1] >= 6)] = math.pi
    th += 0.15 * rng.standard_normal(len(R))
    sigma = SpinConfig(R, th)
    p = ClassifierParams.calibrated(0.3, 2, 8, scan_factor=2)
    pf = phase_fields(sigma, R, p, outside=0.0)
    for z in rng.integers(0, 16, size=(12, 2)):
        z = tuple(int(v) for v in z)
        assert pf.psi0_at([z])[0] == psi0(sigma, z, p, outside=0.0)
        assert pf.psi1_at([z])[0] == psi1(sigma, z, p, outside=0.0)
        assert pf.psi_at([z])[0] == psi(sigma, z, p, outside=0.0)
        assert pf.Psi_at([z])[0] == Psi(sigma, z, p, outside=0.0)


def test_Psi_on_aligned_configurations():
    R = Region.box((0, 0), 16)
    p = ClassifierParams.calibrated(0.3, 2, 8)
    up = phase_fields(SpinConfig.constant(R, 0.0), R, p)
    assert set(up.Psi.values()) == {1}
    down = phase_fields(SpinConfig.constant(R, math.pi), R, p, outside=math.pi)
    assert set(down.Psi.values()) == {-1}
    # e2-aligned spins sit in neither band
    side = phase_fields(SpinConfig.constant(R, math.pi / 2), R, p, outside=math.pi / 2)
    assert set(side.Psi.values()) == {0}


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_niceness_monotone_in_A(seed):
    real = sample_alpha(Region.box((0, 0), 32), seed, 0.3)
    corners = np.array([(x, y) for x in range(0, 32, 8) for y in range(0, 32, 8)])
    p = ClassifierParams.calibrated(0.3, 2, 8)
    loose = ClassifierParams.calibrated(0.3, 2, 8, A=p.A / 2)
    n1 = DisorderClassifier(real, p).nice(8, corners)
    n2 = DisorderClassifier(real, loose).nice(8, corners)
    assert np.all(~n1 | n2)


def test_impossible_thresholds_fail_every_box():
    real = sample_alpha(Region.box((0, 0), 16), 2, 0.3)
    p = ClassifierParams.calibrated(0.3, 2, 8, A=4.0, B=3.0)
    clf = DisorderClassifier(real, p)
    corners = [(0, 0), (8, 0), (0, 8), (8, 8)]
    assert not clf.nice(8, corners).any()
    rep = clf.box_report(LatticeBox((0, 0), 8))
    assert not rep.flags["r3"]


def test_box_reports_csv_columns():
    real = sample_alpha(Region.box((0, 0), 16), 2, 0.3)
    clf = DisorderClassifier(real, ClassifierParams.calibrated(0.3, 2, 8))
    reps = [clf.box_report(LatticeBox(c, 8)) for c in [(0, 0), (8, 8)]]
    text = box_reports_csv(reps)
    assert text.endswith("\r\n")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 2
    assert {"r1_margin", "mean_ok", "nice", "good"} <= set(rows[0])
    assert rows[0]["nice"] == str(int(reps[0].nice))


def test_thresholds_and_rr5_scaling():
    p = ClassifierParams.calibrated(0.3, 2, 8)
    assert p.threshold("rr5", 8, d=2) == pytest.approx(1.5 * 25 * 8 ** -1.0)
    assert p.threshold("rr5", 8, d=3) == pytest.approx(1.5 * 125 * 8 ** -1.5)
    q = ClassifierParams(0.3, 2, 8)
    assert q.threshold("rr2") == pytest.approx(abs(math.log(0.3)) ** 2)
    with pytest.raises(KeyError):
        q.threshold("nonsense")
    with pytest.raises(ValueError):
        ClassifierParams(0.3, 2, 8, xi=1.5)
    assert pairing([1, 2], [3, 4]) == 11


def test_region_taxonomy_report():
    real = sample_alpha(Region.box((-16, -16), 48), 7, 0.3)
    p = ClassifierParams.calibrated(0.3, 2, 8)
    Y = Region.box((0, 0), 16)
    rep = region_taxonomy(real, Y, p)
    assert set(rep.regular) == {1, 2, 8}
    assert rep.clean == (rep.good and all(rep.regular.values()))
    obj = json.loads(rep.to_json())
    assert obj["sites"] == 256
    with pytest.raises(ValueError):
        region_taxonomy(real, Region.box((0, 0), 5), p)
