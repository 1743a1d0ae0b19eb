import math

import numpy as np
import pytest

from rfo2.classification import DisorderClassifier, phase_fields
from rfo2.contours import extract_contours
from rfo2.energy import SpinConfig, wrap_angle
from rfo2.fields import DisorderRealization, sample_alpha
from rfo2.geometry import LatticeBox, Region
from rfo2.surgery import (
    ResourceLimit,
    box_ground_energy,
    bulk_ground_state,
    energy_gain,
    flipped_block_fixture,
    mod4_interpolate,
    run_surgery,
    surgery_ensemble,
    surgery_footprint,
    total_energy,
)


@pytest.fixture(scope="module")
def trace2d():
    fx = flipped_block_fixture(2, 2, 8, 0.3, 4, k=2)
    pf = phase_fields(fx.sigma, fx.LamN, fx.params)
    cs = [c for c in extract_contours(fx.sigma, fx.LamN, fx.params, phase=pf)
          if not c.touches_boundary]
    assert len(cs) == 1
    clf = DisorderClassifier(fx.real, fx.params)
    return fx, cs[0], clf, run_surgery(fx.sigma, cs[0], fx.LamN, fx.real, clf, 2, phase=pf)


def test_stage_bookkeeping(trace2d):
    fx, G, clf, tr = trace2d
    assert tr.bookkeeping_error() < 1e-9
    assert tr.energies["mod1"] >= tr.energies["input"] - 1e-9
    assert tr.energies["final"] == pytest.approx(total_energy(tr.final, fx.LamN, fx.real))
    assert tr.sign == 1
    assert tr.info["mod3_residual_plus"] <= 1e-10


def test_stages_act_where_they_should(trace2d):
    fx, G, clf, tr = trace2d
    m = tr.collar.masks
    # mod2 only touches the dirty part, mod4 only the components of N
    s2 = tr.supports["mod1->mod2"]
    assert s2.issubset(tr.collar.region("Dcal"))
    s4 = tr.supports["mod3->mod4"]
    assert s4.issubset(tr.collar.region("N"))
    assert np.all(~m["Mband"] | m["M"])


def test_surgery_removes_the_contour(trace2d):
    fx, G, clf, tr = trace2d
    left = [c for c in extract_contours(tr.final, fx.LamN, fx.params) if not c.touches_boundary]
    assert left == []
    delta, rep = energy_gain(fx.sigma, tr.final, fx.LamN, fx.real, 2, 0.25)
    assert delta == pytest.approx(tr.energies["final"] - tr.energies["input"])
    assert delta > 0
    assert rep["A1"]["count"] > 0


def test_energy_gain_of_identity_is_zero():
    fx = flipped_block_fixture(2, 2, 8, 0.3, 1, k=1)
    delta, rep = energy_gain(fx.sigma, fx.sigma, fx.LamN, fx.real, 2, 0.25)
    assert delta == 0.0
    assert all(rep[k]["count"] == 0 for k in ("A1", "A2", "A3"))


def test_interpolation_modes_pin_the_middle_band(trace2d):
    fx, G, clf, tr = trace2d
    s4 = mod4_interpolate(tr.stages["mod3"], tr.collar, fx.LamN, 2, mode="interior")
    M = tr.collar.region("M")
    assert np.allclose(s4.at(M.coords), 0.0)
    with pytest.raises(ValueError):
        mod4_interpolate(tr.stages["mod3"], tr.collar, fx.LamN, 2, mode="bogus")


def test_bulk_state_is_e1_on_bad_blocks(trace2d):
    fx, G, clf, tr = trace2d
    b = bulk_ground_state(fx.real, G, fx.LamN, clf, 2)
    assert len(b.good) == len(b.corners)
    assert b.region.issubset(fx.LamN)
    for c in b.corners[~b.good]:
        pts = LatticeBox(tuple(c), 1).region() & b.region
        assert np.all(b.config.at(pts.coords) == 0)


def test_box_ground_energy_no_disorder():
    R = Region.box((0, 0), 4)
    real = DisorderRealization.from_values(R, np.zeros(16), 0.3)
    val, cfg, info = box_ground_energy(real, LatticeBox((0, 0), 4))
    assert val == pytest.approx(0.0, abs=1e-12)
    assert info["converged"]


def test_box_ground_energy_beats_aligned_state():
    R = Region.box((0, 0), 6)
    real = sample_alpha(R, 3, 0.5)
    val, cfg, _ = box_ground_energy(real, LatticeBox((0, 0), 6))
    from rfo2.energy import BoundaryCondition, hamiltonian

    e1 = hamiltonian(SpinConfig.constant(R, 0.0), R, BoundaryCondition.free(), real)
    assert val >= e1
    assert val == pytest.approx(hamiltonian(cfg, R, BoundaryCondition.free(), real))


def test_reduced_scale_positivity_2d():
    res = surgery_ensemble(2, 2, 8, 0.3, seeds=range(8), ks=(1, 2, 3))
    med = []
    for k in (1, 2, 3):
        d = np.array([r["delta"] for r in res[k]])
        assert np.all(d > 0)
        assert all(r["bookkeeping"] < 1e-8 for r in res[k])
        med.append(np.median(d))
    assert med[0] < med[1] < med[2]


def test_reduced_scale_positivity_3d_single_run():
    res = surgery_ensemble(3, 2, 8, 0.3, seeds=[0], ks=(1,))
    r = res[1][0]
    assert r["contours"] == 1
    assert r["delta"] > 0
    assert r["mod1_monotone"]


def test_resource_limits():
    fp = surgery_footprint(3, 8, 32, k=1)
    assert fp["domain_side"] == 13 * 32
    assert fp["bytes"] > 10 * 2**30
    with pytest.raises(ResourceLimit):
        surgery_ensemble(3, 8, 32, 0.3, seeds=[0], max_bytes=2**30)
    with pytest.raises(ResourceLimit):
        surgery_ensemble(2, 2, 8, 0.3, seeds=range(100), ks=(1, 2, 3), max_seconds=1e-3)
    with pytest.raises(ResourceLimit):
        flipped_block_fixture(3, 8, 32, 0.3, 0, max_bytes=2**20)


def test_fixture_geometry():
    fx = flipped_block_fixture(2, 2, 8, 0.3, 0, k=2, noise=0.0)
    c = fx.LamN.coords
    inside = np.all((c >= 0) & (c < 16), axis=1)
    assert np.allclose(np.abs(fx.sigma.theta[inside]), math.pi)
    assert np.allclose(fx.sigma.theta[~inside], 0.0)
    assert len(fx.LamN) == (14 * 8) ** 2
    noisy = flipped_block_fixture(2, 2, 8, 0.3, 0, k=2)
    again = flipped_block_fixture(2, 2, 8, 0.3, 0, k=2)
    assert np.array_equal(noisy.sigma.theta, again.sigma.theta)
    assert np.abs(wrap_angle(noisy.sigma.theta - fx.sigma.theta)).max() < 0.5
