"""Lattice sites, boxes, regions and the coarse-graining toolkit.

Regions are finite subsets of Z^d (d = 1, 2, 3) stored as sorted arrays of
packed integer keys, so set algebra and membership tests vectorise.  Most
heavy operations (distances, components, dilations) go through a dense
boolean *frame*: an axis-aligned array covering the region's bounding box
plus a margin.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
from scipy import ndimage

__all__ = [
    "Region",
    "LatticeBox",
    "Scales",
    "derive_scales",
    "enumerate_blocks",
    "boundary",
    "connected_components",
    "enlarge",
    "int_ext_decompose",
    "closed_hull",
    "chebyshev_distance",
    "neighbor_offsets",
    "block_corners",
    "blocks_union",
    "neighbor_table",
    "internal_edges",
    "crossing_edges",
]

_OFF = 1 << 20
_BASE = 1 << 21
_MAXC = _OFF - 1


def neighbor_offsets(d, mode="graph"):
    """Offsets of the nearest-neighbour stencil.

    ``graph`` gives the 2d l1-neighbours, ``closed`` the 3^d - 1
    l-infinity neighbours (closed unit cubes sharing at least a corner).
    """
    if mode == "graph":
        eye = np.eye(d, dtype=np.int64)
        return np.concatenate([eye, -eye])
    if mode == "closed":
        offs = [o for o in product((-1, 0, 1), repeat=d) if any(o)]
        return np.array(offs, dtype=np.int64)
    raise ValueError(f"unknown adjacency mode {mode!r}")


def _structure(d, mode):
    if mode == "graph":
        return ndimage.generate_binary_structure(d, 1)
    if mode == "closed":
        return ndimage.generate_binary_structure(d, d)
    raise ValueError(f"unknown adjacency mode {mode!r}")


def _encode(coords):
    coords = np.asarray(coords, dtype=np.int64)
    if coords.size and (np.abs(coords).max() > _MAXC):
        raise ValueError("site coordinates exceed the supported range")
    key = np.zeros(coords.shape[0], dtype=np.int64)
    for i in range(coords.shape[1]):
        key = key * _BASE + (coords[:, i] + _OFF)
    return key


def _decode(keys, d):
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], d), dtype=np.int64)
    k = keys.copy()
    for i in range(d - 1, -1, -1):
        out[:, i] = k % _BASE - _OFF
        k //= _BASE
    return out


class Region:
    """Finite set of lattice sites in Z^d.

    Sites are kept in lexicographic order; ``coords[i]`` is the i-th site and
    every field defined on the region stores its values in that order.
    """

    __slots__ = ("d", "keys", "__dict__")

    def __init__(self, sites=(), d=None):
        arr = np.asarray(sites, dtype=np.int64)
        if arr.size == 0:
            if d is None:
                raise ValueError("empty region needs an explicit dimension")
            arr = arr.reshape(0, d)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1) if d == 1 else arr.reshape(1, -1)
        if d is not None and arr.shape[1] != d:
            raise ValueError(f"sites have dimension {arr.shape[1]}, expected {d}")
        if not 1 <= arr.shape[1] <= 3:
            raise ValueError("dimension must be 1, 2 or 3")
        self.d = int(arr.shape[1])
        self.keys = np.unique(_encode(arr))

    @classmethod
    def _from_keys(cls, keys, d):
        obj = cls.__new__(cls)
        obj.d = d
        obj.keys = keys
        return obj

    @classmethod
    def empty(cls, d):
        return cls._from_keys(np.zeros(0, dtype=np.int64), d)

    @classmethod
    def from_mask(cls, mask, origin):
        origin = np.asarray(origin, dtype=np.int64)
        idx = np.argwhere(mask)
        return cls(idx + origin, d=mask.ndim)

    @classmethod
    def box(cls, corner, side):
        return LatticeBox(tuple(corner), side).region()

    @cached_property
    def coords(self):
        return _decode(self.keys, self.d)

    @cached_property
    def _siteset(self):
        return frozenset(map(tuple, self.coords.tolist()))

    def __len__(self):
        return int(self.keys.shape[0])

    def __bool__(self):
        return len(self) > 0

    def __iter__(self):
        return iter(map(tuple, self.coords.tolist()))

    def __contains__(self, site):
        return tuple(int(v) for v in site) in self._siteset

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return self.d == other.d and np.array_equal(self.keys, other.keys)

    def __hash__(self):
        return hash((self.d, self.keys.tobytes()))

    def __repr__(self):
        return f"Region(d={self.d}, n={len(self)})"

    def _check(self, other):
        if other.d != self.d:
            raise ValueError("regions of different dimension")

    def __or__(self, other):
        self._check(other)
        return Region._from_keys(np.union1d(self.keys, other.keys), self.d)

    def __and__(self, other):
        self._check(other)
        return Region._from_keys(
            np.intersect1d(self.keys, other.keys, assume_unique=True), self.d
        )

    def __sub__(self, other):
        self._check(other)
        return Region._from_keys(
            np.setdiff1d(self.keys, other.keys, assume_unique=True), self.d
        )

    def __xor__(self, other):
        return (self - other) | (other - self)

    def issubset(self, other):
        return len(self - other) == 0

    def isdisjoint(self, other):
        return len(self & other) == 0

    def translate(self, shift):
        shift = np.asarray(shift, dtype=np.int64)
        return Region(self.coords + shift, d=self.d)

    def contains_coords(self, coords):
        """Vectorised membership test for an (n, d) coordinate array."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        if len(self) == 0:
            return np.zeros(coords.shape[0], dtype=bool)
        inrange = np.all(np.abs(coords) <= _MAXC, axis=1)
        out = np.zeros(coords.shape[0], dtype=bool)
        if inrange.any():
            keys = _encode(coords[inrange])
            pos = np.searchsorted(self.keys, keys)
            pos = np.minimum(pos, len(self.keys) - 1)
            out[inrange] = self.keys[pos] == keys
        return out

    def index_of(self, coords):
        """Positions of sites in ``coords`` (``-1`` for non-members)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        if len(self) == 0:
            return np.full(coords.shape[0], -1, dtype=np.int64)
        keys = _encode(coords)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def bbox(self):
        """Inclusive (lo, hi) corner coordinates of the bounding box."""
        if len(self) == 0:
            raise ValueError("empty region has no bounding box")
        c = self.coords
        return c.min(axis=0), c.max(axis=0)

    def frame(self, margin=0):
        """Dense frame ``(origin, shape)`` covering the region plus margin."""
        lo, hi = self.bbox()
        origin = lo - margin
        shape = tuple(int(s) for s in (hi - lo + 1 + 2 * margin))
        return origin, shape

    def mask(self, origin, shape):
        """Boolean array over the frame; sites outside the frame are dropped."""
        m = np.zeros(shape, dtype=bool)
        if len(self) == 0:
            return m
        rel = self.coords - np.asarray(origin, dtype=np.int64)
        ok = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
        rel = rel[ok]
        m[tuple(rel.T)] = True
        return m

    def scatter(self, values, origin, shape, fill=0.0):
        """Place per-site values into a dense frame array."""
        arr = np.full(shape, fill, dtype=np.result_type(values, type(fill)))
        rel = self.coords - np.asarray(origin, dtype=np.int64)
        arr[tuple(rel.T)] = values
        return arr

    def gather(self, arr, origin):
        """Read per-site values out of a dense frame array."""
        rel = self.coords - np.asarray(origin, dtype=np.int64)
        return arr[tuple(rel.T)]

    def least_site(self):
        return tuple(int(v) for v in self.coords[0])


@dataclass(frozen=True)
class LatticeBox:
    """Box of side ``side``.

    ``style='Q'`` is corner anchored, ``{corner + v : v in {0..side-1}^d}``;
    ``style='B'`` is centred, ``{corner + v : v in {-side/2..side/2-1}^d}``.
    """

    corner: tuple
    side: int
    style: str = "Q"

    def __post_init__(self):
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))
        if self.side < 1:
            raise ValueError("box side must be positive")
        if self.style not in ("Q", "B"):
            raise ValueError("box style must be 'Q' or 'B'")
        if self.style == "B" and self.side % 2:
            raise ValueError("centre-anchored boxes need an even side")

    @property
    def d(self):
        return len(self.corner)

    @property
    def lo(self):
        c = np.asarray(self.corner, dtype=np.int64)
        return c if self.style == "Q" else c - self.side // 2

    @property
    def hi(self):
        return self.lo + self.side - 1

    @property
    def shape(self):
        return (self.side,) * self.d

    def region(self):
        grids = np.meshgrid(
            *[np.arange(l, l + self.side) for l in self.lo], indexing="ij"
        )
        return Region(np.stack([g.ravel() for g in grids], axis=1), d=self.d)

    def intersects(self, region):
        if len(region) == 0:
            return False
        c = region.coords
        return bool(np.any(np.all((c >= self.lo) & (c <= self.hi), axis=1)))

    def contains_region(self, region):
        c = region.coords
        return bool(np.all((c >= self.lo) & (c <= self.hi)))

    def __len__(self):
        return self.side**self.d


@dataclass(frozen=True)
class Scales:
    epsilon: float
    ell: int
    L: int
    clamped: bool = False
    raw_ell: float = field(default=float("nan"), compare=False)
    raw_L: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        for v in (self.ell, self.L):
            if v < 1 or (v & (v - 1)):
                raise ValueError("scales must be powers of two")
        if self.ell > self.L:
            raise ValueError("small scale exceeds large scale")


def derive_scales(epsilon, ell=None, L=None):
    """Scales l and L from the field strength (natural logarithm).

    ``l = 2^floor(log2(1/(eps |ln eps|^4)))`` and
    ``L = 2^ceil(log2(|ln eps|^4 / eps))``; anything below 2 is clamped to 2
    and flagged.  Explicit ``ell``/``L`` override the formulas.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    lg = abs(math.log(epsilon))
    raw_ell = 1.0 / (epsilon * lg**4)
    raw_L = lg**4 / epsilon
    ell_f = 2.0 ** math.floor(math.log2(raw_ell))
    L_f = 2.0 ** math.ceil(math.log2(raw_L))
    clamped = False
    if ell_f < 2:
        ell_f, clamped = 2.0, True
    if L_f < 2:
        L_f, clamped = 2.0, True
    ell_v = int(ell) if ell is not None else int(ell_f)
    L_v = int(L) if L is not None else int(L_f)
    if ell_v > L_v:
        # only reachable for eps > 1/e, where the two formulas cross
        ell_v = L_v
        clamped = True
    return Scales(epsilon, ell_v, L_v, clamped, raw_ell, raw_L)


def block_corners(region, scale, offset=0):
    """Corners (in ``scale*Z^d + offset``) of blocks meeting the region."""
    if len(region) == 0:
        return np.zeros((0, region.d), dtype=np.int64)
    off = np.broadcast_to(np.asarray(offset, dtype=np.int64), (region.d,))
    idx = np.floor_divide(region.coords - off, scale)
    idx = np.unique(idx, axis=0)
    return idx * scale + off


def _shift_set(scale, d, step=None, reach=None):
    if step is None:
        if scale % 16:
            raise ValueError(
                f"shifted blocks need a scale divisible by 16 (got {scale})"
            )
        step = scale // 16
    if reach is None:
        reach = 2 * scale
    k = reach // step
    rng = np.arange(-k, k + 1, dtype=np.int64) * step
    return np.array(list(product(rng, repeat=d)), dtype=np.int64)


def enumerate_blocks(region, scale, family="standard", eta=None, step=None):
    """Blocks of a coarse-graining family meeting ``region``.

    Families: ``standard`` (corners in scale*Z^d), ``shifted`` (standard
    blocks translated by ``eta``; if ``eta`` is None, every shift in
    (scale/16)*{-32..32}^d applied to every standard block meeting the
    region) and ``staggered`` (corners in scale*Z^d + scale/2).
    Returned in lexicographic corner order, each block once.
    """
    if scale < 1:
        raise ValueError("scale must be positive")
    d = region.d
    if family == "standard":
        corners = block_corners(region, scale)
    elif family == "staggered":
        if scale % 2:
            raise ValueError("staggered blocks need an even scale")
        corners = block_corners(region, scale, offset=scale // 2)
    elif family == "shifted":
        if eta is not None:
            eta = np.asarray(eta, dtype=np.int64)
            if step is None and scale % 16:
                raise ValueError(
                    f"shifted blocks need a scale divisible by 16 (got {scale})"
                )
            corners = block_corners(region, scale, offset=eta % scale)
        else:
            base = block_corners(region, scale)
            shifts = _shift_set(scale, d, step)
            cand = (base[:, None, :] + shifts[None, :, :]).reshape(-1, d)
            cand = np.unique(cand, axis=0)
            corners = cand[_boxes_meeting(cand, scale, region)]
    else:
        raise ValueError(f"unknown block family {family!r}")
    corners = corners[np.lexsort(corners.T[::-1])] if len(corners) else corners
    return [LatticeBox(tuple(c), scale) for c in corners]


def _boxes_meeting(corners, side, region):
    """Mask of corner-anchored boxes that contain at least one region site."""
    if len(corners) == 0:
        return np.zeros(0, dtype=bool)
    origin, shape = region.frame(margin=side)
    m = region.mask(origin, shape).astype(np.int64)
    # box sum of the mask, indexed by corner
    cs = _window_sum(m, (side,) * region.d)
    rel = corners - origin
    ok = np.all((rel >= 0) & (rel < np.asarray(cs.shape)), axis=1)
    out = np.zeros(len(corners), dtype=bool)
    out[ok] = cs[tuple(rel[ok].T)] > 0
    return out


def _window_sum(arr, sizes):
    """Sum over windows anchored at their low corner; output has arr's shape.

    Entry ``p`` holds ``arr[p : p + sizes]`` summed; windows running past the
    array edge are truncated (callers pad frames so this never matters).
    """
    out = np.asarray(arr, dtype=np.float64 if arr.dtype.kind == "f" else np.int64)
    for ax, s in enumerate(sizes):
        c = np.cumsum(out, axis=ax)
        n = out.shape[ax]
        pad_shape = list(out.shape)
        pad_shape[ax] = 1
        c = np.concatenate([np.zeros(pad_shape, dtype=c.dtype), c], axis=ax)
        hi = np.minimum(np.arange(n) + s, n)
        out = np.take(c, hi, axis=ax) - np.take(c, np.arange(n), axis=ax)
    return out


def boundary(region, side="inner"):
    """Inner or outer l1 boundary of a finite region."""
    d = region.d
    if len(region) == 0:
        return Region.empty(d)
    origin, shape = region.frame(margin=1)
    m = region.mask(origin, shape)
    grown = ndimage.binary_dilation(m, structure=_structure(d, "graph"))
    if side == "outer":
        return Region.from_mask(grown & ~m, origin)
    if side == "inner":
        comp = ~m
        touched = ndimage.binary_dilation(comp, structure=_structure(d, "graph"))
        return Region.from_mask(m & touched, origin)
    raise ValueError("side must be 'inner' or 'outer'")


def _label(mask, mode):
    return ndimage.label(mask, structure=_structure(mask.ndim, mode))


def connected_components(region, mode="graph"):
    """Maximal connected components, ordered by their least site.

    ``graph`` uses l1 adjacency; ``closed`` joins sites whose closed unit
    cubes touch (l-infinity adjacency).
    """
    if len(region) == 0:
        return []
    origin, shape = region.frame(margin=1)
    labels, n = _label(region.mask(origin, shape), mode)
    lab = region.gather(labels, origin)
    order = np.argsort(lab, kind="stable")
    lab_sorted = lab[order]
    cuts = np.flatnonzero(np.diff(lab_sorted)) + 1
    groups = np.split(order, cuts)
    comps = [Region._from_keys(region.keys[np.sort(g)], region.d) for g in groups]
    comps.sort(key=lambda r: r.keys[0])
    return comps


def chebyshev_distance(target_mask, sampling=None):
    """l-infinity distance (in lattice units) from every cell to the mask.

    Returns ``inf`` everywhere when the mask is empty.
    """
    if not target_mask.any():
        return np.full(target_mask.shape, np.inf)
    dist = ndimage.distance_transform_cdt(~target_mask, metric="chessboard")
    return dist.astype(np.float64)


def _dilate_cube(mask, radius):
    if radius <= 0:
        return mask.copy()
    size = 2 * radius + 1
    return ndimage.maximum_filter(mask.astype(np.uint8), size=size, mode="constant") > 0


def blocks_union(corners, side, d):
    """Region formed by a list of corner-anchored boxes."""
    corners = np.asarray(corners, dtype=np.int64).reshape(-1, d)
    if len(corners) == 0:
        return Region.empty(d)
    offs = np.array(list(product(range(side), repeat=d)), dtype=np.int64)
    pts = (corners[:, None, :] + offs[None, :, :]).reshape(-1, d)
    return Region(pts, d=d)


def enlarge(region, scale, threshold=None):
    """Union of standard ``scale``-blocks within l-inf distance < threshold.

    The distance is between the closed cube of the block and the closed
    hull of the region (union of closed unit cubes); for integer thresholds
    this is the set of blocks meeting the region dilated by ``threshold``.
    """
    d = region.d
    if len(region) == 0:
        return Region.empty(d)
    if threshold is None:
        threshold = scale
    t = int(math.ceil(threshold))
    origin, shape = region.frame(margin=t)
    grown = _dilate_cube(region.mask(origin, shape), t)
    cand = Region.from_mask(grown, origin)
    return blocks_union(block_corners(cand, scale), scale, d)


@dataclass
class IntExt:
    """Complement of a finite region split into exterior and interiors."""

    exterior: Region  # exterior component clipped to the frame
    interiors: list
    frame_origin: np.ndarray
    frame_shape: tuple


def int_ext_decompose(region, margin=2):
    """Exterior and interior (finite) components of a region's complement.

    The complement is computed inside a frame ``margin`` sites beyond the
    bounding box; the component touching the frame edge is the exterior.
    Complement components are graph connected, which is the dual of the
    closed (corner-touching) connectivity of the region itself.
    """
    d = region.d
    if len(region) == 0:
        raise ValueError("empty region")
    margin = max(int(margin), 2)
    origin, shape = region.frame(margin=margin)
    m = region.mask(origin, shape)
    labels, n = _label(~m, "graph")
    edge_labels = set()
    for ax in range(d):
        edge_labels.update(np.unique(np.take(labels, 0, axis=ax)).tolist())
        edge_labels.update(np.unique(np.take(labels, -1, axis=ax)).tolist())
    edge_labels.discard(0)
    ext_mask = np.isin(labels, list(edge_labels))
    interiors = []
    for lab in range(1, n + 1):
        if lab in edge_labels:
            continue
        interiors.append(Region.from_mask(labels == lab, origin))
    interiors.sort(key=lambda r: r.keys[0])
    return IntExt(Region.from_mask(ext_mask, origin), interiors, origin, shape)


def closed_hull(region, scales=None, L=None):
    """``enlarge(region, L, L)`` together with all interior components."""
    if L is None:
        if scales is None:
            raise ValueError("closed_hull needs the large scale L")
        L = scales.L
    out = enlarge(region, L, L)
    for comp in int_ext_decompose(region).interiors:
        out = out | comp
    return out


def neighbor_table(region):
    """Index of each site's 2d graph neighbours inside the region.

    Column ``k < d`` holds the neighbour at ``x + e_k``, column ``d + k`` the
    one at ``x - e_k``; ``-1`` marks neighbours outside the region.
    """
    d = region.d
    c = region.coords
    offs = neighbor_offsets(d, "graph")
    out = np.empty((len(region), 2 * d), dtype=np.int64)
    for j, o in enumerate(offs):
        out[:, j] = region.index_of(c + o)
    return out


def internal_edges(region):
    """Unordered nearest-neighbour pairs with both ends in the region.

    Returns two index arrays ``(i, j)`` with ``coords[j] = coords[i] + e_k``.
    """
    nb = neighbor_table(region)
    d = region.d
    ii, jj = [], []
    for k in range(d):
        ok = nb[:, k] >= 0
        ii.append(np.flatnonzero(ok))
        jj.append(nb[ok, k])
    return np.concatenate(ii), np.concatenate(jj)


def crossing_edges(region):
    """Edges from the inner boundary to the outer boundary.

    Returns ``(i, y)``: index of the inside endpoint and the coordinates of
    the outside endpoint, one row per crossing edge.
    """
    nb = neighbor_table(region)
    offs = neighbor_offsets(region.d, "graph")
    rows, cols = np.nonzero(nb < 0)
    return rows, region.coords[rows] + offs[cols]
