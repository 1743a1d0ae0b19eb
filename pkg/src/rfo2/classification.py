"""Phase variables on spin configurations and the disorder taxonomy.

Configuration side: the small-scale indicators psi0 (low Dirichlet energy in
every nearby l-box), psi1 (block averages aligned with +e1 or -e1), their
product psi, and the block-constant large-scale variable Psi.

Disorder side: nice / good boxes (per-box conditions on the Green fields
and on alpha), and good / regular / clean regions built from them.

Asymptotic thresholds are parameters whose defaults are the closed-form
expressions; ``ClassifierParams.calibrated`` supplies desk-scale values.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field, asdict
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, ndimage

from .fields import DIRICHLET, NEUMANN
from .geometry import LatticeBox, Region, _decode, _encode, block_corners, blocks_union, enlarge

__all__ = [
    "ClassifierParams",
    "BoxReport",
    "RegionReport",
    "PhaseFields",
    "DisorderClassifier",
    "phase_fields",
    "psi0",
    "psi1",
    "psi",
    "Psi",
    "box_nice",
    "region_taxonomy",
    "avg_potential_event",
    "pairing",
    "box_reports_csv",
]

NICE_LEGS = ("r1", "r2", "r3grad", "r3", "r4", "mean")
REG_LEGS = ("rr1", "rr2", "rr4", "rr5")


@dataclass
class ClassifierParams:
    """Scales, cutoffs and every threshold of the classification.

    Thresholds left as ``None`` in ``overrides`` take their closed-form
    default; see :meth:`threshold` for the names.
    """

    epsilon: float
    ell: int
    L: int
    xi: float = 0.25
    A: float = 0.05
    B: float = 3.0
    profile: str = "asymptotic"
    energy_factor: float = 1.0
    scan_factor: int = 5
    Psi_reach: int = 2
    log_power: float = 30.0
    r2_exponent: float = 0.5
    eta_divisor: int = 16
    eta_reach: int = 2
    eta_step: object = None  # int, "block" (step = scale) or None (scale / eta_divisor)
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.A > self.B:
            # impossible thresholds are legal (every box fails r3); flag only
            self.overrides.setdefault("_inconsistent_AB", True)

    @property
    def lg(self):
        return abs(math.log(self.epsilon))

    @property
    def dim_energy_threshold(self):
        """psi0 threshold per site: ``eps^2 |ln eps|`` times ``energy_factor``."""
        return self.energy_factor * self.epsilon**2 * self.lg

    def step_for(self, L0):
        """Shift step at scale L0: explicit ``eta_step`` ("block" = L0) or L0/divisor."""
        if self.eta_step == "block":
            return L0
        if self.eta_step is not None:
            return int(self.eta_step)
        if L0 % self.eta_divisor:
            raise ValueError(
                f"shifted family needs a scale divisible by {self.eta_divisor} (got {L0})"
            )
        return L0 // self.eta_divisor

    def shifts(self, L0, d):
        step = self.step_for(L0)
        k = (self.eta_reach * L0) // step
        rng = np.arange(-k, k + 1, dtype=np.int64) * step
        return np.array(list(product(rng, repeat=d)), dtype=np.int64)

    def r1_window(self, L0):
        if "r1_window" in self.overrides:
            return int(self.overrides["r1_window"])
        lnl = math.log(L0)
        try:
            r = math.ceil(lnl**90)
        except OverflowError:
            r = math.inf
        return int(max(1, min(r, L0 // 4)))

    def nice_lams(self, L0):
        """Masses for niceness: {0, 1/(2 L0)} plus regularity masses below 1/L0."""
        extra = [l for l in self.reg_lams(L0) if l < 1.0 / L0]
        return sorted(set([0.0, 0.5 / L0] + extra))

    def stat_lams(self, L0):
        """Every mass whose box statistics are needed (niceness and regularity)."""
        return sorted(set(self.nice_lams(L0)) | set(self.reg_lams(L0)))

    def reg_lams(self, L0):
        if "reg_lams" in self.overrides:
            return list(self.overrides["reg_lams"])
        return [0.0, L0**-2.0 * math.log(L0) ** 8]

    def threshold(self, name, L0=None, lam=None, d=3):
        """Closed-form default (or override) for a named threshold.

        ``d`` only matters for ``rr5`` under the ``rr5_factor`` override,
        which scales the bound with the number of shifts and the typical
        size ``L0^(-d/2)`` of a block average of alpha.
        """
        if name == "rr5" and "rr5_factor" in self.overrides:
            ns = len(self.shifts(L0, d))
            return float(self.overrides["rr5_factor"]) * ns * L0 ** (-d / 2)
        ov = self.overrides.get(name)
        if ov is not None:
            return float(ov)
        eps, lg = self.epsilon, self.lg
        big = self.overrides.get("log_factor", lg**self.log_power)
        if name == "r2":
            return eps * L0**self.r2_exponent * big
        if name == "r3grad":
            return eps * big
        if name in ("r4", "mean"):
            return big
        if name == "dense":
            return lg**-55
        if name == "rr1_cut":
            return eps**2 * lg
        if name == "rr1":
            return eps**2.25
        if name == "rr2_cut":
            inv = L0 if lam == 0 else min(lam**-0.5, L0)
            return eps**2 * inv * lg
        if name == "rr2":
            return lg**2
        if name == "rr4_cut":
            return lg**50
        if name == "rr4":
            return lg**-75
        if name == "rr5":
            return L0**-1.5 * math.log(L0) ** 50
        raise KeyError(name)

    @classmethod
    def calibrated(cls, epsilon, ell, L, **kw):
        """Desk-scale profile: shift step equal to the block side (the 5^d
        standard neighbours), threshold magnitudes set from the typical
        Gaussian sizes at side 8-32 instead of powers of |ln eps|."""
        ov = {
            "log_factor": 6.0,
            "r4": 5.5,
            "mean": 4.5,
            "dense": 0.2,
            "rr1": 4.0 * epsilon**2,
            "rr2": 4.0,
            "rr4_cut": 5.5,
            "rr4": 0.5,
            "rr5_factor": 1.5,
        }
        ov.update(kw.pop("overrides", {}))
        base = dict(A=0.05, B=3.0, eta_step="block", profile="calibrated",
                    overrides=ov)
        base.update(kw)
        return cls(epsilon, ell, L, **base)

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# phase variables


@dataclass
class PhaseFields:
    """psi0, psi1, psi on a dense frame and Psi on L-blocks.

    ``origin`` is the absolute coordinate of frame index 0; site arrays are
    valid (not NaN-flagged) inside ``valid``.  ``Psi`` maps an L-block
    corner tuple to its value.
    """

    origin: np.ndarray
    psi0: np.ndarray
    psi1: np.ndarray
    valid: np.ndarray
    Psi: dict
    L: int
    boundary_affected: set = field(default_factory=set)

    @property
    def psi(self):
        return self.psi0 * self.psi1

    def _idx(self, coords):
        rel = np.asarray(coords, dtype=np.int64).reshape(-1, len(self.origin)) - self.origin
        if np.any(rel < 0) or np.any(rel >= np.asarray(self.psi0.shape)):
            raise ValueError("site outside the computed frame")
        return tuple(rel.T)

    def psi0_at(self, coords):
        return self.psi0[self._idx(coords)]

    def psi1_at(self, coords):
        return self.psi1[self._idx(coords)]

    def psi_at(self, coords):
        return self.psi[self._idx(coords)]

    def Psi_at(self, coords):
        c = np.asarray(coords, dtype=np.int64).reshape(-1, len(self.origin))
        corners = np.floor_divide(c, self.L) * self.L
        return np.array([self.Psi[tuple(k)] for k in corners.tolist()], dtype=np.int8)

    def Psi_region(self, value):
        corners = [k for k, v in self.Psi.items() if v == value]
        return blocks_union(corners, self.L, len(self.origin))


def _theta_frame(sigma, origin, shape, outside):
    th = np.full(shape, np.nan if outside is None else float(outside))
    rel = sigma.region.coords - origin
    ok = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
    th[tuple(rel[ok].T)] = sigma.theta[ok]
    return th


def _corner_sums(arr, sizes):
    """Sums over windows ``arr[r : r + sizes]`` for every fully contained corner."""
    c = arr
    for ax, s in enumerate(sizes):
        c = np.cumsum(c, axis=ax)
        pad = [(0, 0)] * c.ndim
        pad[ax] = (1, 0)
        c = np.pad(c, pad)
        n = c.shape[ax] - 1
        c = np.take(c, np.arange(s, n + 1), axis=ax) - np.take(c, np.arange(0, n + 1 - s), axis=ax)
    return c


def _box_energy_and_mean(th, ell):
    """Dirichlet energy and mean cos of every l-box fully inside the frame."""
    d = th.ndim
    energy = None
    for k in range(d):
        sl_a = [slice(None)] * d
        sl_b = [slice(None)] * d
        sl_a[k] = slice(0, -1)
        sl_b[k] = slice(1, None)
        e = 4.0 * np.sin(0.5 * (th[tuple(sl_b)] - th[tuple(sl_a)])) ** 2
        sizes = [ell] * d
        sizes[k] = ell - 1
        s = _corner_sums(np.nan_to_num(e, nan=0.0), sizes)
        # trim so every direction yields the same corner grid
        trim = [slice(0, th.shape[a] - ell + 1) for a in range(d)]
        s = s[tuple(trim)]
        energy = s if energy is None else energy + s
    c = np.cos(th)
    mean = _corner_sums(np.nan_to_num(c, nan=0.0), [ell] * d) / ell**d
    inside = _corner_sums((~np.isnan(th)).astype(np.int64), [ell] * d) == ell**d
    return energy, mean, inside


def phase_fields(sigma, region, params, outside=0.0, stride=1):
    """Compute psi0, psi1 and Psi for every site of the L-blocks meeting ``region``.

    The configuration is completed by the constant angle ``outside`` where
    it is undefined (``None``: boxes leaving the configuration's domain are
    skipped and the affected blocks recorded).  ``stride`` subsamples the
    scanned box corners (1 = exhaustive).
    """
    d = region.d
    ell, L = params.ell, params.L
    reach = params.scan_factor * ell
    corners = block_corners(region, L)
    lo = corners.min(axis=0) - params.Psi_reach * L
    hi = corners.max(axis=0) + (params.Psi_reach + 1) * L  # exclusive
    # site frame (where psi is evaluated) and the larger theta frame
    s_origin = lo
    s_shape = tuple(int(v) for v in hi - lo)
    t_origin = s_origin - reach
    t_shape = tuple(int(v) + 2 * reach + ell for v in s_shape)
    th = _theta_frame(sigma, t_origin, t_shape, outside)
    energy, mean, inside = _box_energy_and_mean(th, ell)
    thr = params.dim_energy_threshold * ell**d
    bad0 = (energy > thr) & inside
    notplus = (mean < 1 - params.xi) & inside
    notminus = (mean > -1 + params.xi) & inside
    if reach % stride:
        raise ValueError("stride must divide the scan reach")
    size = 2 * reach + 1

    def any_in_window(mask):
        if stride == 1:
            m = ndimage.maximum_filter(mask.astype(np.uint8), size=size, mode="constant",
                                       origin=0)
        else:
            fp = np.zeros((size,) * d, dtype=bool)
            fp[tuple(slice(0, None, stride) for _ in range(d))] = True
            m = ndimage.maximum_filter(mask.astype(np.uint8), footprint=fp, mode="constant")
        return m.astype(bool)

    # corner index c (corner grid starts at t_origin) is within reach of site
    # index s (site grid at s_origin = t_origin + reach) iff |c - (s + reach)| <= reach
    sl = tuple(slice(reach, reach + n) for n in s_shape)
    b0 = any_in_window(bad0)[sl]
    np_ = any_in_window(notplus)[sl]
    nm_ = any_in_window(notminus)[sl]
    p0 = (~b0).astype(np.int8)
    p1 = np.zeros(s_shape, dtype=np.int8)
    p1[~np_] = 1
    p1[~nm_ & np_] = -1
    valid = np.ones(s_shape, dtype=bool)
    affected = set()
    if outside is None:
        full = any_in_window(~inside)[sl]
        valid = ~full
    # Psi on blocks
    nb = tuple(n // L for n in s_shape)
    ps = (p0 * p1).reshape(sum(((k, L) for k in nb), ()))
    red_axes = tuple(range(1, 2 * d, 2))
    allplus = np.all(ps == 1, axis=red_axes)
    allminus = np.all(ps == -1, axis=red_axes)
    R = params.Psi_reach
    bsize = 2 * R + 1
    plus = ndimage.minimum_filter(allplus.astype(np.uint8), size=bsize, mode="constant", cval=0)
    minus = ndimage.minimum_filter(allminus.astype(np.uint8), size=bsize, mode="constant", cval=0)
    Psi = {}
    bvalid = None
    if outside is None:
        vb = np.all(valid.reshape(sum(((k, L) for k in nb), ())), axis=red_axes)
        bvalid = ndimage.minimum_filter(vb.astype(np.uint8), size=bsize, mode="constant", cval=0)
    for c in corners:
        bi = tuple(int(v) for v in (c - lo) // L)
        val = 1 if plus[bi] else (-1 if minus[bi] else 0)
        Psi[tuple(int(v) for v in c)] = val
        if bvalid is not None and not bvalid[bi]:
            affected.add(tuple(int(v) for v in c))
    return PhaseFields(s_origin, p0, p1, valid, Psi, L, affected)


def _single_site_scan(sigma, z, params, outside, stride, what):
    """Direct loop over every scanned l-box around ``z`` (reference path)."""
    z = np.asarray(z, dtype=np.int64)
    d = len(z)
    ell = params.ell
    reach = params.scan_factor * ell
    offs = np.arange(-reach, reach + 1, stride)
    thr = params.dim_energy_threshold * ell**d
    plus = minus = True
    good = True
    skipped = 0
    box_offs = np.array(list(product(range(ell), repeat=d)), dtype=np.int64)
    eyes = np.eye(d, dtype=np.int64)
    for o in product(offs, repeat=d):
        r = z + np.array(o)
        pts = r + box_offs
        idx = sigma.region.index_of(pts)
        if np.any(idx < 0):
            if outside is None:
                skipped += 1
                continue
            th = np.where(idx >= 0, sigma.theta[np.maximum(idx, 0)], outside)
        else:
            th = sigma.theta[idx]
        if what in ("psi0", "psi"):
            e = 0.0
            lookup = {tuple(p): t for p, t in zip(pts.tolist(), th)}
            for p, t in zip(pts.tolist(), th):
                for ek in eyes:
                    q = tuple(np.add(p, ek))
                    if q in lookup:
                        e += 4 * math.sin(0.5 * (lookup[q] - t)) ** 2
            if e > thr:
                good = False
        mc = float(np.cos(th).mean())
        if mc < 1 - params.xi:
            plus = False
        if mc > -1 + params.xi:
            minus = False
    p1 = 1 if plus else (-1 if minus else 0)
    return int(good), p1, skipped


def psi0(sigma, z, params, outside=None, stride=1):
    """1 iff every l-box with corner within l-inf distance 5l of z has low energy."""
    return _single_site_scan(sigma, z, params, outside, stride, "psi0")[0]


def psi1(sigma, z, params, outside=None, stride=1):
    """+1 / -1 if every scanned box average lies in the +e1 / -e1 band, else 0."""
    return _single_site_scan(sigma, z, params, outside, stride, "psi1")[1]


def psi(sigma, z, params, outside=None, stride=1):
    g, p1, _ = _single_site_scan(sigma, z, params, outside, stride, "psi")
    return g * p1


def Psi(sigma, z, params, outside=0.0):
    """Block-constant phase at site ``z``: unanimity of psi over the blocks
    within block distance 2 of the block containing ``z``."""
    z = np.asarray(z, dtype=np.int64).reshape(1, -1)
    corner = np.floor_divide(z, params.L) * params.L
    reg = LatticeBox(tuple(corner[0]), params.L).region()
    pf = phase_fields(sigma, reg, params, outside=outside)
    return int(pf.Psi_at(z)[0])


# ----------------------------------------------------------------------------
# disorder: batched box statistics


def _mode_eigs(n, d, bc, lam):
    if bc == DIRICHLET:
        k = np.pi * np.arange(1, n + 1) / (n + 1)
    else:
        k = np.pi * np.arange(n) / n
    mu1 = 2.0 - 2.0 * np.cos(k)
    mu = np.zeros((n,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        mu = mu + mu1.reshape(shape)
    return mu + lam


def _window_sum_axes(arr, r, axes):
    """Sum over the l-inf window of radius r around each entry (zero outside)."""
    out = arr
    for ax in axes:
        c = np.cumsum(out, axis=ax)
        n = out.shape[ax]
        pad = [(0, 0)] * out.ndim
        pad[ax] = (1, 0)
        c = np.pad(c, pad)
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return out


_STAT_NAMES = ("gsup", "gradsup", "grad2", "g2", "r1min")


def _batch_stats(W, eps, lams, A, r, L0):
    """Statistics of the Green fields of a batch of boxes.

    ``W`` has shape (nb, n, ..., n) and holds alpha on each box.  Returns a
    dict of arrays with shape (nb, nlam, 2) for bc in (Dirichlet, Neumann)
    plus alpha statistics.
    """
    nb = W.shape[0]
    d = W.ndim - 1
    n = W.shape[1]
    axes = tuple(range(1, d + 1))
    nl = len(lams)
    out = {k: np.zeros((nb, nl, 2)) for k in _STAT_NAMES}
    out["alpha_sup"] = np.abs(W).reshape(nb, -1).max(axis=1)
    out["alpha_mean"] = W.reshape(nb, -1).mean(axis=1)
    src_d = eps * W
    src_n = eps * (W - W.reshape(nb, -1).mean(axis=1).reshape((nb,) + (1,) * d))
    cd = fft.dstn(src_d, type=1, axes=axes, norm="ortho")
    cn = fft.dctn(src_n, type=2, axes=axes, norm="ortho")
    elig = None
    m_lo = L0 / 16.0
    idx = np.arange(n)
    dist1 = np.minimum(idx + 1, n - idx)
    dgrid = np.full((n,) * d, np.inf)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        dgrid = np.minimum(dgrid, dist1.reshape(shape))
    elig = dgrid >= m_lo
    for li, lam in enumerate(lams):
        for bi, (bc, coef) in enumerate(((DIRICHLET, cd), (NEUMANN, cn))):
            mu = _mode_eigs(n, d, bc, lam)
            with np.errstate(divide="ignore", invalid="ignore"):
                gk = np.where(mu > 0, coef / np.where(mu > 0, mu, 1.0), 0.0)
            if bc == DIRICHLET:
                g = fft.idstn(gk, type=1, axes=axes, norm="ortho")
                P = np.pad(g, [(0, 0)] + [(1, 1)] * d)
            else:
                g = fft.idctn(gk, type=2, axes=axes, norm="ortho")
                P = None
            out["gsup"][:, li, bi] = np.abs(g).reshape(nb, -1).max(axis=1)
            out["g2"][:, li, bi] = (g * g).reshape(nb, -1).sum(axis=1)
            gsup = np.zeros(nb)
            g2 = np.zeros(nb)
            src = P if P is not None else g
            m = np.zeros_like(src) if P is not None else None
            for ax in axes:
                diff = np.diff(src, axis=ax)
                a2 = diff * diff
                gsup = np.maximum(gsup, np.abs(diff).reshape(nb, -1).max(axis=1, initial=0.0))
                g2 += a2.reshape(nb, -1).sum(axis=1)
                if m is not None:
                    padlo = [(0, 0)] * (d + 1)
                    padhi = [(0, 0)] * (d + 1)
                    padlo[ax] = (1, 0)
                    padhi[ax] = (0, 1)
                    m += np.pad(a2, padlo) + np.pad(a2, padhi)
            out["gradsup"][:, li, bi] = gsup
            out["grad2"][:, li, bi] = g2
            if m is not None:
                ws = _window_sum_axes(m, r, axes) / float(r) ** d
                inner = ws[(slice(None),) + tuple(slice(1, n + 1) for _ in range(d))]
                vals = inner[:, elig] if elig.any() else np.full((nb, 1), np.inf)
                out["r1min"][:, li, bi] = vals.min(axis=1) - A * eps**2
            else:
                out["r1min"][:, li, bi] = np.inf
    return out


@dataclass
class BoxReport:
    box: LatticeBox
    margins: dict
    flags: dict
    nice: bool
    good: bool = None

    def row(self):
        r = {"corner": " ".join(map(str, self.box.corner)), "side": self.box.side}
        for k in NICE_LEGS:
            r[f"{k}_margin"] = self.margins[k]
            r[f"{k}_ok"] = int(self.flags[k])
        r["nice"] = int(self.nice)
        r["good"] = "" if self.good is None else int(self.good)
        return r


def box_reports_csv(reports):
    """RFC-4180 CSV text, one row per box, one column per condition margin."""
    buf = io.StringIO()
    rows = [r.row() for r in reports]
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\r\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _unique_rows(coords):
    """Distinct rows of an integer coordinate array and the inverse map."""
    keys, inv = np.unique(_encode(coords), return_inverse=True)
    return _decode(keys, coords.shape[1]), inv.reshape(-1)


class DisorderClassifier:
    """Memoised box statistics and the niceness / goodness / regularity logic.

    Boxes are identified by (side, corner); statistics are computed in
    batches by exact sine/cosine transforms and cached, so shifted families
    of neighbouring blocks share work.
    """

    def __init__(self, real, params, chunk_sites=2_000_000):
        self.real = real
        self.params = params
        self.d = real.region.d
        self._cache = {}
        self.chunk_sites = chunk_sites

    def _lams(self, L0):
        return self.params.stat_lams(L0)

    def _legs_batch(self, side, st):
        """Margins of the six niceness legs for a batch; shape (nb, 6)."""
        p = self.params
        eps = self.real.epsilon
        n = side**self.d
        all_l = self._lams(side)
        li = [all_l.index(l) for l in p.nice_lams(side)]
        g2 = st["grad2"][:, li] / n
        m = np.column_stack([
            st["r1min"][:, li, 0].min(axis=1),
            p.threshold("r2", side) - st["gsup"][:, li].max(axis=(1, 2)),
            p.threshold("r3grad", side) - st["gradsup"][:, li].max(axis=(1, 2)),
            np.minimum((g2 - p.A * eps**2).min(axis=(1, 2)),
                       (p.B * eps**2 - g2).min(axis=(1, 2))),
            p.threshold("r4", side) - st["alpha_sup"],
            p.threshold("mean", side) - np.abs(st["alpha_mean"]) * math.sqrt(n),
        ])
        if p.overrides.get("_inconsistent_AB"):
            m[:, 3] = np.minimum(m[:, 3], (p.B - p.A) * eps**2)
        return m

    def _ensure(self, side, corners):
        cache = self._cache.setdefault(side, {})
        corners = np.asarray(corners, dtype=np.int64).reshape(-1, self.d)
        todo = [c for c in map(tuple, corners.tolist()) if c not in cache]
        if not todo:
            return
        todo = _unique_rows(np.array(todo, dtype=np.int64))[0]
        p = self.params
        lams = self._lams(side)
        r = p.r1_window(side)
        per = max(1, self.chunk_sites // (side + 2) ** self.d)
        # process in spatially sorted chunks so each alpha frame stays small
        order = np.lexsort(todo.T[::-1])
        todo = todo[order]
        for s in range(0, len(todo), per):
            chunk = todo[s:s + per]
            lo = chunk.min(axis=0)
            hi = chunk.max(axis=0) + side
            shape = tuple(int(v) for v in hi - lo)
            grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
            coords = np.stack([g.ravel() for g in grids], axis=1)
            af = self.real.alpha_at(coords).reshape(shape)
            win = sliding_window_view(af, (side,) * self.d)
            rel = chunk - lo
            W = win[tuple(rel.T)]
            st = _batch_stats(np.ascontiguousarray(W), self.real.epsilon, lams, p.A, r, side)
            st["legs"] = self._legs_batch(side, st)
            for k, c in enumerate(map(tuple, chunk.tolist())):
                cache[c] = {name: st[name][k] for name in st}

    def stats(self, side, corner):
        self._ensure(side, [corner])
        return self._cache[side][tuple(int(v) for v in corner)]

    def _legs(self, side, st):
        margins = {k: float(v) for k, v in zip(NICE_LEGS, st["legs"])}
        return margins, {k: v >= 0 for k, v in margins.items()}

    def box_report(self, box):
        st = self.stats(box.side, box.corner)
        margins, flags = self._legs(box.side, st)
        return BoxReport(box, margins, flags, all(flags.values()))

    def nice(self, side, corners):
        corners = np.asarray(corners, dtype=np.int64).reshape(-1, self.d)
        self._ensure(side, corners)
        cache = self._cache[side]
        legs = np.array([cache[c]["legs"] for c in map(tuple, corners.tolist())])
        return np.all(legs >= 0, axis=1) if len(legs) else np.zeros(0, dtype=bool)

    def _shifts(self, side):
        return self.params.shifts(side, self.d)

    def good(self, side, corners):
        """Xi for standard blocks: every shifted copy is nice."""
        corners = np.asarray(corners, dtype=np.int64).reshape(-1, self.d)
        sh = self._shifts(side)
        allc = (corners[:, None, :] + sh[None, :, :]).reshape(-1, self.d)
        uniq, inv = _unique_rows(allc)
        ok = self.nice(side, uniq)[inv.reshape(-1)].reshape(len(corners), len(sh))
        return ok.all(axis=1)

    def xi_shifted(self, side, corners):
        """Xi for arbitrary boxes: good if it meets a good standard block."""
        corners = np.asarray(corners, dtype=np.int64).reshape(-1, self.d)
        out = np.zeros(len(corners), dtype=bool)
        offs = np.array(list(product((0, 1), repeat=self.d)), dtype=np.int64)
        for k, c in enumerate(corners):
            base = np.floor_divide(c, side) * side
            cand = base + offs * side
            # standard blocks meeting [c, c+side)
            cand = cand[np.all(cand < c + side, axis=1)]
            out[k] = bool(self.good(side, cand).any())
        return out

    def block_functions(self, side, corners):
        """F_lam, F^grad_lam (max over shifts and both bc), R and the alpha-mean sum."""
        corners = np.asarray(corners, dtype=np.int64).reshape(-1, self.d)
        sh = self._shifts(side)
        lams = self._lams(side)
        reg = self.params.reg_lams(side)
        li = [lams.index(l) for l in reg]
        n = side**self.d
        allc = (corners[:, None, :] + sh[None, :, :]).reshape(-1, self.d)
        self._ensure(side, allc)
        cache = self._cache[side]
        uniq, inv = _unique_rows(allc)
        inv = inv.reshape(len(corners), len(sh))
        ents = [cache[c] for c in map(tuple, uniq.tolist())]
        g2 = np.array([e["g2"][li].max(axis=1) for e in ents]).reshape(len(uniq), len(reg)) / n
        gr = np.array([e["grad2"][li].max(axis=1) for e in ents]).reshape(len(uniq), len(reg)) / n
        asup = np.array([float(e["alpha_sup"]) for e in ents])
        amean = np.abs(np.array([float(e["alpha_mean"]) for e in ents]))
        F = g2[inv].max(axis=1)
        Fg = gr[inv].max(axis=1)
        Rv = asup[inv].max(axis=1)
        S = amean[inv].sum(axis=1)
        return {"F": F, "Fgrad": Fg, "R": Rv, "S": S, "lams": reg}

    def regular(self, blocks_region, side):
        """Regularity legs of an ``side``-measurable region; margins >= 0 pass."""
        corners = block_corners(blocks_region, side)
        if len(blocks_region) != len(corners) * side**self.d:
            raise ValueError("region is not measurable at this scale")
        p = self.params
        bf = self.block_functions(side, corners)
        NY = len(corners)
        margins = {}
        worst1 = worst2 = np.inf
        for j, lam in enumerate(bf["lams"]):
            Fg = bf["Fgrad"][:, j]
            v1 = pairing(Fg, (Fg >= p.threshold("rr1_cut", side)).astype(float))
            worst1 = min(worst1, p.threshold("rr1", side) * NY - v1)
            F = bf["F"][:, j]
            v2 = pairing(F, (F >= p.threshold("rr2_cut", side, lam)).astype(float))
            worst2 = min(worst2, p.threshold("rr2", side) * NY - v2)
        margins["rr1"] = worst1
        margins["rr2"] = worst2
        R = bf["R"]
        v4 = pairing(R**2, (R > p.threshold("rr4_cut", side)).astype(float))
        margins["rr4"] = p.threshold("rr4", side) * NY - v4
        margins["rr5"] = p.threshold("rr5", side, d=self.d) * NY - float(bf["S"].sum())
        return margins

    def region_good(self, Y):
        """Density of non-good L-blocks in Y against the allowed fraction."""
        L = self.params.L
        corners = block_corners(Y, L)
        if len(Y) != len(corners) * L**self.d:
            raise ValueError("region is not L-measurable")
        xi = self.good(L, corners)
        bad = float((~xi).sum())
        return self.params.threshold("dense") * len(corners) - bad


def pairing(F, G):
    """``[F; G]_Y = sum_Q F(Q) G(Q)`` over the blocks of Y (arrays aligned by block)."""
    return float(np.dot(np.asarray(F, dtype=float), np.asarray(G, dtype=float)))


def box_nice(real, box, L0=None, params=None, classifier=None):
    """Niceness report for a single box (any corner)."""
    clf = classifier or DisorderClassifier(real, params)
    return clf.box_report(box)


@dataclass
class RegionReport:
    region: Region
    good: bool
    regular: dict
    clean: bool
    margins: dict

    def to_json(self):
        return json.dumps({
            "sites": len(self.region),
            "good": self.good,
            "regular": self.regular,
            "clean": self.clean,
            "margins": self.margins,
        }, indent=2, default=float)


def region_taxonomy(real, Y, params, classifier=None, scales=None):
    """Good / regular / clean classification of an L-measurable region Y.

    Regularity is evaluated on ``enlarge(Y, L, L)`` at the scales
    ``{l/2, l, L}`` (or ``scales``).
    """
    clf = classifier or DisorderClassifier(real, params)
    L = params.L
    if len(Y) != len(block_corners(Y, L)) * L**Y.d:
        raise ValueError("region is not L-measurable")
    good_margin = clf.region_good(Y)
    dY = enlarge(Y, L, L)
    if scales is None:
        scales = sorted({max(1, params.ell // 2), params.ell, L})
    regular = {}
    margins = {"good": good_margin}
    for s in scales:
        m = clf.regular(dY, s)
        regular[s] = all(v >= 0 for v in m.values())
        margins.update({f"{k}@{s}": v for k, v in m.items()})
    good = good_margin >= 0
    return RegionReport(Y, good, regular, good and all(regular.values()), margins)


def avg_potential_event(real, box, r, A, lam, eps=None):
    """Windowed average of the potential m against ``A eps^2``.

    ``m`` is computed from the Dirichlet field on the box; averages
    ``r^-d sum_{|y-x|_inf <= r} m_y`` are checked at sites at l-inf
    distance at least side/16 from the outer boundary.  Returns
    ``(ok, margin, worst_site)``.
    """
    from .fields import local_potential, solve_green
    from .geometry import boundary

    eps = real.epsilon if eps is None else eps
    Q = box.region()
    g = solve_green(real, Q, lam, DIRICHLET, tol=1e-12)
    ext = Q | boundary(Q, "outer")
    m = local_potential(g, ext, extend="zero")
    origin, shape = ext.frame(margin=0)
    arr = ext.scatter(m.values, origin, shape)
    ws = _window_sum_axes(arr, r, tuple(range(Q.d))) / float(r) ** Q.d
    c = Q.coords
    lo, hi = box.lo, box.hi
    dist = np.minimum(c - lo + 1, hi - c + 1).min(axis=1)
    elig = dist >= box.side / 16.0
    vals = ws[tuple((c - origin).T)] - A * eps**2
    if not elig.any():
        return True, math.inf, None
    k = int(np.argmin(np.where(elig, vals, np.inf)))
    return bool(vals[k] >= 0), float(vals[k]), tuple(int(v) for v in c[k])
