"""Contours of a spin configuration and the regions derived from them.

A contour is a closed-connected component of the L-measurable set where the
block phase Psi vanishes, together with the small-scale phase labels psi on
it.  Around each contour we build the collar (the L-thickening minus the
spine) and the nested sets used by the surgery stages.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .classification import phase_fields
from .geometry import (
    Region,
    _structure,
    block_corners,
    blocks_union,
    chebyshev_distance,
    connected_components,
    enlarge,
    int_ext_decompose,
)

__all__ = [
    "Contour",
    "ContourGeometry",
    "CollarDecomposition",
    "CollarParams",
    "extract_contours",
    "recover_collar_labels",
    "compatible",
    "contour_geometry",
    "collar_decomposition",
    "grow_until",
    "star_clean",
]


@dataclass
class Contour:
    """Spine (L-measurable, closed connected) with psi labels on it."""

    spine: Region
    labels: np.ndarray  # aligned with spine.coords
    L: int
    touches_boundary: bool = False

    def __post_init__(self):
        if len(self.spine) == 0:
            raise ValueError("contour spine must be non-empty")
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (len(self.spine),):
            raise ValueError("labels must be defined exactly on the spine")

    def label_at(self, coords):
        idx = self.spine.index_of(np.asarray(coords, dtype=np.int64).reshape(-1, self.spine.d))
        if np.any(idx < 0):
            raise KeyError("site not on the spine")
        return self.labels[idx]

    def block_corners(self):
        return block_corners(self.spine, self.L)

    def to_json(self, geometry=None):
        out = {
            "L": self.L,
            "d": self.spine.d,
            "spine_blocks": self.block_corners().tolist(),
            "labels": self.labels.tolist(),
            "touches_boundary": self.touches_boundary,
        }
        if geometry is not None:
            out["geometry"] = geometry.summary()
        return json.dumps(out)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        spine = blocks_union(obj["spine_blocks"], obj["L"], obj["d"])
        return cls(spine, np.array(obj["labels"]), obj["L"], obj["touches_boundary"])


def extract_contours(sigma, Lam, params, outside=0.0, phase=None):
    """Contours of ``sigma`` inside the L-measurable region ``Lam``.

    ``outside`` is the angle completing ``sigma`` where it is undefined
    (the boundary condition).  Contours whose L-thickening leaves ``Lam``
    are returned with ``touches_boundary`` set.
    """
    pf = phase if phase is not None else phase_fields(sigma, Lam, params, outside=outside)
    zero = pf.Psi_region(0) & Lam
    out = []
    for comp in connected_components(zero, "closed"):
        labels = pf.psi_at(comp.coords)
        touches = not enlarge(comp, params.L, params.L).issubset(Lam)
        out.append(Contour(comp, labels, params.L, touches))
    return out


def _block_index(corners, L):
    return {tuple(int(v) for v in c): k for k, c in enumerate(np.floor_divide(corners, L))}


def recover_collar_labels(contour):
    """Psi on the L-blocks of delta(contour) minus the spine, from the labels alone.

    A collar block has Psi = +-1 and therefore every spine block within
    block distance one carries psi = +-1 uniformly.  Returns a dict mapping
    collar block corners to +1, -1, or 0 where the labels do not determine
    the value (impossible for concrete contours).
    """
    L = contour.L
    d = contour.spine.d
    sp_corners = contour.block_corners()
    uniform = {}
    offs = np.array(list(np.ndindex(*(L,) * d)), dtype=np.int64)
    for c in sp_corners:
        lab = contour.label_at(c + offs)
        key = tuple(int(v) for v in c)
        if np.all(lab == 1):
            uniform[key] = 1
        elif np.all(lab == -1):
            uniform[key] = -1
        else:
            uniform[key] = 0
    delta = enlarge(contour.spine, L, L)
    collar = block_corners(delta - contour.spine, L)
    nbr = np.array(list(np.ndindex(*(3,) * d)), dtype=np.int64) - 1
    out = {}
    for c in collar:
        vals = set()
        for o in nbr:
            k = tuple(int(v) for v in c + o * L)
            if k in uniform:
                vals.add(uniform[k])
        vals.discard(0)
        out[tuple(int(v) for v in c)] = vals.pop() if len(vals) == 1 else 0
    return out


def compatible(g1, g2):
    """Spines avoid each other's thickening and recovered collar labels agree.

    The label condition compares the Psi values each contour forces on the
    overlap of the two collars; the relation is symmetric.
    """
    if g1.L != g2.L:
        raise ValueError("contours at different scales")
    d1 = enlarge(g1.spine, g1.L, g1.L)
    d2 = enlarge(g2.spine, g2.L, g2.L)
    if not d1.isdisjoint(g2.spine) or not d2.isdisjoint(g1.spine):
        return False
    r1 = recover_collar_labels(g1)
    r2 = recover_collar_labels(g2)
    for k in set(r1) & set(r2):
        if r1[k] != r2[k]:
            return False
    return True


@dataclass
class ContourGeometry:
    delta: Region
    delta_ext: Region
    delta_in: list
    hull: Region
    interiors: list
    NL: int
    Nl: int

    def summary(self):
        return {
            "delta_sites": len(self.delta),
            "delta_ext_sites": len(self.delta_ext),
            "delta_in_sites": [len(r) for r in self.delta_in],
            "hull_sites": len(self.hull),
            "N_L": self.NL,
            "N_ell": self.Nl,
        }


def contour_geometry(contour, Lam=None, ell=None):
    """delta, its exterior and interior parts, the closed hull and block counts."""
    L = contour.L
    d = contour.spine.d
    delta = enlarge(contour.spine, L, L)
    ie = int_ext_decompose(contour.spine, margin=L + 2)
    delta_ext = delta & ie.exterior
    delta_in = [delta & comp for comp in ie.interiors]
    hull = delta
    for comp in ie.interiors:
        hull = hull | comp
    n = len(delta)
    if n % L**d:
        raise AssertionError("delta is not L-measurable")
    Nl = None
    if ell:
        if n % ell**d:
            raise AssertionError("delta is not l-measurable")
        Nl = n // ell**d
    return ContourGeometry(delta, delta_ext, delta_in, hull, ie.interiors, n // L**d, Nl)


# ----------------------------------------------------------------------------
# collar sets


@dataclass
class CollarParams:
    """Distances used by the collar sets, in lattice units.

    ``None`` selects the default: the middle-band distance is
    ``max(L/2 - 100, L/4)``; the interpolation set threshold is
    ``min(4L/5, middle - l/2 + 1)`` so that M lies inside it.
    """

    L: int
    ell: int
    middle: float = None
    n_threshold: float = None
    dirty_halo: float = None  # 5L
    f_threshold: float = None  # L/8
    band: float = math.pi / 6

    def __post_init__(self):
        L, ell = self.L, self.ell
        if self.middle is None:
            self.middle = max(L / 2 - 100, L / 4)
        if self.n_threshold is None:
            self.n_threshold = min(4 * L / 5, self.middle - ell / 2 + 1)
        if self.dirty_halo is None:
            self.dirty_halo = 5 * L
        if self.f_threshold is None:
            self.f_threshold = L / 8


class _Frame:
    def __init__(self, region, margin):
        self.origin, self.shape = region.frame(margin=margin)
        self.d = region.d

    def mask(self, region):
        return region.mask(self.origin, self.shape)

    def region(self, mask):
        return Region.from_mask(mask, self.origin)

    def outer(self, mask):
        return ndimage.binary_dilation(mask, structure=_structure(self.d, "graph")) & ~mask

    def dist(self, target):
        return chebyshev_distance(target)


@dataclass
class CollarDecomposition:
    """Named subsets of the collar, as boolean masks on a common frame."""

    frame_origin: np.ndarray
    frame_shape: tuple
    masks: dict
    components: list  # list of boolean masks (components of the N set)
    params: CollarParams
    bad_blocks: np.ndarray
    notes: dict = field(default_factory=dict)

    def region(self, name):
        return Region.from_mask(self.masks[name], self.frame_origin)

    def component_regions(self):
        return [Region.from_mask(m, self.frame_origin) for m in self.components]

    def check_containments(self):
        """Definitional containments; returns a dict of booleans."""
        m = self.masks
        sub = lambda a, b: bool(np.all(~m[a] | m[b]))  # noqa: E731
        return {
            "Mband_in_M": sub("Mband", "M"),
            "M_in_N": sub("M", "N"),
            "N_in_C": sub("N", "C"),
            "Dcal_in_C": sub("Dcal", "C"),
            "Cpm_partition": bool(np.all(m["Cplus"] ^ m["Cminus"] == m["C"])),
            "scrC_plus": bool(np.all(m["scrC_plus"] == (m["Cplus"] & ~m["Dfrak_plus_12"]))),
            "scrC_minus": bool(np.all(m["scrC_minus"] == (m["Cminus"] & ~m["Dfrak_minus_12"]))),
            "D_blocks_in_C": sub("D", "C"),
        }


def grow_until(seed_mask, violates, limit_mask=None, max_iter=100000):
    """Smallest superset of ``seed_mask`` whose outer boundary has no violations.

    ``violates`` is a boolean array; sites of the outer boundary where it is
    True are added until none remain (or the growth would leave
    ``limit_mask``, which stops it and is reported).
    """
    d = seed_mask.ndim
    st = _structure(d, "graph")
    m = seed_mask.copy()
    escaped = False
    for _ in range(max_iter):
        ob = ndimage.binary_dilation(m, structure=st) & ~m
        add = ob & violates
        if limit_mask is not None:
            if np.any(add & ~limit_mask):
                escaped = True
            add &= limit_mask
        if not add.any():
            return m, escaped
        m |= add
    raise RuntimeError("growth did not terminate")


def collar_decomposition(contour, sigma, LamN, classifier, ell, collar_params=None,
                         phase=None, g_field=None, check_concrete=True, margin=None):
    """Every named collar set for a contour of ``sigma`` in the domain ``LamN``.

    ``classifier`` supplies the L-block goodness; ``g_field`` (array on the
    returned frame, optional) is the Green field used in the change of
    variables when growing the optimisation region.  The frame extends
    ``margin`` (default L + 4) sites beyond delta so that sets grown from
    the collar fit inside it.
    """
    L = contour.L
    d = contour.spine.d
    cp = collar_params or CollarParams(L, ell)
    geo = contour_geometry(contour)
    fr = _Frame(geo.delta, margin=L + 4 if margin is None else margin)
    lamN = fr.mask(LamN)
    sp = fr.mask(contour.spine)
    delta = fr.mask(geo.delta)
    C = delta & ~sp & lamN
    # Psi sign on the collar
    labels = recover_collar_labels(contour)
    if check_concrete and phase is not None:
        _assert_concrete(contour, phase)
    Cplus = np.zeros_like(C)
    Cminus = np.zeros_like(C)
    for corner, v in labels.items():
        rel = np.asarray(corner) - fr.origin
        sl = tuple(slice(max(0, a), max(0, a + L)) for a in rel)
        if v == 1:
            Cplus[sl] = True
        elif v == -1:
            Cminus[sl] = True
    Cplus &= C
    Cminus &= C
    bC = fr.outer(C) & lamN
    distC = fr.dist(bC)
    Mband = C & (distC >= cp.middle)
    half = max(1, ell // 2)
    Mreg = fr.region(Mband)
    M = fr.mask(blocks_union(block_corners(Mreg, half), half, d)) & lamN if len(Mreg) else np.zeros_like(C)
    # bad L-blocks inside the collar
    Creg = fr.region(C)
    corners = block_corners(Creg, L)
    full = []
    for c in corners:
        rel = c - fr.origin
        sl = tuple(slice(a, a + L) for a in rel)
        if np.all(C[sl]):
            full.append(c)
    full = np.array(full, dtype=np.int64).reshape(-1, d)
    good = classifier.good(L, full) if len(full) else np.zeros(0, dtype=bool)
    bad = full[~good]
    D = np.zeros_like(C)
    for c in bad:
        rel = c - fr.origin
        D[tuple(slice(a, a + L) for a in rel)] = True
    Dcal = (fr.dist(D) <= cp.dirty_halo) & C if D.any() else np.zeros_like(C)
    masks = {"C": C, "Cplus": Cplus, "Cminus": Cminus, "Mband": Mband, "M": M,
             "D": D, "Dcal": Dcal, "spine": sp, "delta": delta, "LamN": lamN}
    for sgn, Cs in (("plus", Cplus), ("minus", Cminus)):
        Ds = Dcal & Cs
        dD = fr.dist(fr.outer(Ds))
        for k in (16, 12):
            masks[f"Dfrak_{sgn}_{k}"] = Ds & (dD >= L / k)
        masks[f"Dcal_{sgn}"] = Ds
        masks[f"M{sgn}"] = M & Cs
        masks[f"scrC_{sgn}"] = Cs & ~masks[f"Dfrak_{sgn}_12"]
        dF = fr.dist(fr.outer(Cs) & lamN)
        masks[f"F_{sgn}"] = Cs & (dF >= cp.f_threshold)
    notes = {}
    theta = _theta_on_frame(sigma, fr)
    for sgn in ("plus", "minus"):
        phi = theta if sgn == "plus" else theta - math.pi
        if g_field is not None:
            sc = masks[f"scrC_{sgn}"]
            phi = np.where(sc, phi - np.cos(theta) * g_field, phi)
        phi = (phi + math.pi) % (2 * math.pi) - math.pi
        viol = ~(np.abs(phi) <= cp.band)  # NaN (undefined) counts as a violation
        f, esc = grow_until(masks[f"F_{sgn}"], viol, limit_mask=masks[f"{'Cplus' if sgn == 'plus' else 'Cminus'}"])
        masks[f"f_{sgn}"] = f
        masks[f"g_{sgn}"] = f & masks[f"scrC_{sgn}"]
        notes[f"f_{sgn}_escaped"] = esc
    N = C & (distC >= cp.n_threshold)
    masks["N"] = N
    lab, n = ndimage.label(N, structure=_structure(d, "graph"))
    comps = [lab == i for i in range(1, n + 1)]
    comps.sort(key=lambda m: tuple(np.argwhere(m)[0]))
    return CollarDecomposition(fr.origin, fr.shape, masks, comps, cp, bad, notes)


def _theta_on_frame(sigma, fr):
    th = np.full(fr.shape, np.nan)
    rel = sigma.region.coords - fr.origin
    ok = np.all((rel >= 0) & (rel < np.asarray(fr.shape)), axis=1)
    th[tuple(rel[ok].T)] = sigma.theta[ok]
    return th


def _assert_concrete(contour, phase):
    ps = phase.psi_at(contour.spine.coords)
    if not np.array_equal(ps, contour.labels):
        raise ValueError("contour labels do not match the configuration")
    if np.any(phase.Psi_at(contour.spine.coords) != 0):
        raise ValueError("spine is not in the zero set of Psi")


def star_clean(contour, real, dirty, params, classifier=None):
    """delta(contour) is clean and its closed hull is not strictly inside ``dirty``."""
    from .classification import DisorderClassifier, region_taxonomy

    geo = contour_geometry(contour)
    clf = classifier or DisorderClassifier(real, params)
    rep = region_taxonomy(real, geo.delta, params, classifier=clf)
    strictly_inside = geo.hull.issubset(dirty) and len(geo.hull) < len(dirty)
    return bool(rep.clean and not strictly_inside)
