import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from rfo2.classification import DisorderClassifier, phase_fields
from rfo2.contours import (
    CollarParams,
    Contour,
    collar_decomposition,
    compatible,
    contour_geometry,
    extract_contours,
    grow_until,
    recover_collar_labels,
)
from rfo2.energy import SpinConfig
from rfo2.geometry import enlarge
from rfo2.surgery import flipped_block_fixture


@pytest.fixture(scope="module")
def fixture2d():
    fx = flipped_block_fixture(2, 2, 8, 0.3, 3, k=1)
    pf = phase_fields(fx.sigma, fx.LamN, fx.params)
    cs = extract_contours(fx.sigma, fx.LamN, fx.params, phase=pf)
    return fx, pf, cs


def test_aligned_configuration_has_no_contours(fixture2d):
    fx = fixture2d[0]
    sigma = SpinConfig.constant(fx.LamN, 0.0)
    assert extract_contours(sigma, fx.LamN, fx.params) == []


def test_flipped_block_gives_one_interior_contour(fixture2d):
    fx, pf, cs = fixture2d
    assert len(cs) == 1
    G = cs[0]
    assert not G.touches_boundary
    # the flipped block itself lies in the spine
    flipped = fx.LamN.coords[np.all((fx.LamN.coords >= 0) & (fx.LamN.coords < 8), axis=1)]
    assert G.spine.contains_coords(flipped).all()
    assert set(np.unique(G.labels)) <= {-1, 0, 1}


def test_contour_json_round_trip(fixture2d):
    G = fixture2d[2][0]
    back = Contour.from_json(G.to_json())
    assert back.spine == G.spine
    assert np.array_equal(back.labels, G.labels)
    assert back.touches_boundary == G.touches_boundary


def test_geometry_counts(fixture2d):
    G = fixture2d[2][0]
    geo = contour_geometry(G, ell=2)
    assert geo.delta == enlarge(G.spine, 8, 8)
    assert geo.NL * 64 == len(geo.delta)
    assert geo.Nl * 4 == len(geo.delta)
    parts = G.spine | geo.delta_ext
    for r in geo.delta_in:
        parts = parts | r
    assert parts == geo.delta
    assert G.spine.issubset(geo.hull)


def test_collar_labels_and_containments(fixture2d):
    fx, pf, cs = fixture2d
    G = cs[0]
    labels = recover_collar_labels(G)
    # everything around a single flipped block is in the + phase
    assert set(labels.values()) == {1}
    clf = DisorderClassifier(fx.real, fx.params)
    col = collar_decomposition(G, fx.sigma, fx.LamN, clf, 2, phase=pf)
    assert all(col.check_containments().values())
    m = col.masks
    assert not np.any(m["C"] & m["spine"])
    assert np.all(~m["f_plus"] | m["Cplus"])
    assert np.all(~m["F_plus"] | m["f_plus"])


def test_compatibility_relation(fixture2d):
    G = fixture2d[2][0]
    assert not compatible(G, G)
    far = Contour(G.spine.translate((200, 0)), G.labels, G.L)
    assert compatible(G, far) and compatible(far, G)
    near = Contour(G.spine.translate((8, 0)), G.labels, G.L)
    assert not compatible(G, near)


def test_collar_params_defaults():
    cp = CollarParams(32, 8)
    assert cp.middle == 8
    assert cp.n_threshold <= cp.middle - 8 / 2 + 1
    assert cp.dirty_halo == 160 and cp.f_threshold == 4


@settings(max_examples=60)
@given(st.integers(0, 10**6), st.floats(0.2, 0.7))
def test_grow_until_is_minimal_closed_superset(seed, p):
    rng = np.random.default_rng(seed)
    viol = rng.random((12, 12)) < p
    seedm = np.zeros((12, 12), dtype=bool)
    seedm[5:7, 5:7] = True
    out, esc = grow_until(seedm, viol)
    assert not esc
    # oracle: seed plus violating sites joined to it through violating sites
    lab, _ = ndimage.label(viol | seedm)
    keep = np.isin(lab, np.unique(lab[seedm]))
    want = seedm | (keep & viol)
    assert np.array_equal(out, want)
    ob = ndimage.binary_dilation(out) & ~out
    assert not np.any(ob & viol)


def test_grow_until_reports_escape():
    viol = np.ones((6, 6), dtype=bool)
    seedm = np.zeros((6, 6), dtype=bool)
    seedm[2, 2] = True
    limit = np.zeros((6, 6), dtype=bool)
    limit[1:4, 1:4] = True
    out, esc = grow_until(seedm, viol, limit_mask=limit)
    assert esc
    assert np.array_equal(out, limit)
