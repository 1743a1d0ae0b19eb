"""Contour removal: bulk ground states, the four collar modifications and gluing.

Given a configuration with a contour, the pipeline builds a configuration
without it and measures the change of ``-H`` on the whole domain.  Every
stage records the sites it touched and its energy change so the
bookkeeping can be re-checked by direct evaluation.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, ndimage, optimize

from .classification import _box_energy_and_mean
from .contours import (
    _structure,
    collar_decomposition,
    contour_geometry,
    grow_until,
    recover_collar_labels,
)
from .energy import (
    BoundaryCondition,
    SpinConfig,
    change_of_variables,
    edge_sets,
    hamiltonian,
    wrap_angle,
)
from .fields import DIRICHLET, ScalarField, local_potential, solve_green
from .geometry import (
    LatticeBox,
    Region,
    block_corners,
    boundary,
    chebyshev_distance,
    connected_components,
    enlarge,
)
from .variational import BAND, maximize_K

__all__ = [
    "SurgeryAbort",
    "SurgeryTrace",
    "box_ground_energy",
    "bulk_ground_state",
    "mod1_reflect",
    "mod2_damp",
    "mod3_optimize",
    "mod4_interpolate",
    "glue",
    "energy_gain",
    "run_surgery",
    "contour_sign",
    "FlippedBlock",
    "flipped_block_fixture",
    "surgery_footprint",
    "ResourceLimit",
    "surgery_ensemble",
]


class SurgeryAbort(RuntimeError):
    """The collar is too dirty (or too large) for a stage to proceed."""


def _e1_bc():
    return BoundaryCondition.constant(0.0)


def total_energy(sigma, LamN, real):
    """``-H_{LamN}(sigma | e1)``."""
    return hamiltonian(sigma, LamN, _e1_bc(), real)


# ----------------------------------------------------------------------------
# box ground states


def _neg_H_and_grad(region, bc, real):
    es = edge_sets(region, bc)
    a = real.epsilon * real.alpha_at(region.coords)
    ci, cy = es.ci[es.cmask], es.cy[es.cmask]
    ty = bc.angles_at(cy) if len(ci) else np.zeros(0)
    i, j = es.i, es.j
    n = len(region)

    def f(th):
        dij = th[i] - th[j]
        val = -float(np.sum(1 - np.cos(dij)))
        g = np.zeros(n)
        s = np.sin(dij)
        np.add.at(g, i, -s)
        np.add.at(g, j, s)
        if len(ci):
            dc = th[ci] - ty
            val -= float(np.sum(1 - np.cos(dc)))
            np.add.at(g, ci, -np.sin(dc))
        val += float(a @ np.sin(th))
        g += a * np.cos(th)
        return val, g

    return f


def box_ground_energy(real, box, bc="free", domain=None, starts=None, seed=0,
                      tol=1e-10, maxiter=20000):
    """Best value of ``-H_Q(sigma | bc)`` over multi-start gradient ascent.

    ``bc`` is ``"free"`` or ``"ext"`` (e1 on outer-boundary sites outside
    ``domain``).  Default starts: the constant e1 state, the Neumann Green
    profile and one random configuration; extra starts (angle arrays) may
    be appended via ``starts``.  Returns ``(value, config, info)``.
    """
    Q = box.region() if isinstance(box, LatticeBox) else box
    if bc == "free":
        bco = BoundaryCondition.free()
    elif bc == "ext":
        if domain is None:
            raise ValueError("ext boundary needs the domain")
        bco = BoundaryCondition.ext(domain)
    else:
        bco = bc
    f = _neg_H_and_grad(Q, bco, real)
    n = len(Q)
    rng = np.random.default_rng(seed)
    init = [("e1", np.zeros(n))]
    if n > 1:
        gN = solve_green(real, Q, 0.0, "neumann", tol=1e-12).values
        init.append(("gN", gN))
    init.append(("random", rng.uniform(-np.pi, np.pi, n)))
    for k, s in enumerate(starts or []):
        init.append((f"extra{k}", np.asarray(s, dtype=np.float64)))
    best = None
    info = {"starts": {}}
    for name, th0 in init:
        res = optimize.minimize(lambda t: tuple(-v for v in f(t)), th0, jac=True,
                                method="L-BFGS-B",
                                options={"maxiter": maxiter, "gtol": tol, "ftol": 1e-15})
        val = -float(res.fun)
        info["starts"][name] = {"value": val, "converged": bool(res.success)}
        if best is None or val > best[0]:
            best = (val, res.x, bool(res.success), name)
    info["converged"] = best[2]
    info["best_start"] = best[3]
    return best[0], SpinConfig(Q, wrap_angle(best[1])), info


# ----------------------------------------------------------------------------
# bulk state


def _neumann_fields(real, corners, side):
    """Neumann Green fields (lam = 0) on a batch of boxes via cosine transforms."""
    d = corners.shape[1]
    offs = np.array(list(np.ndindex(*(side,) * d)), dtype=np.int64)
    pts = (corners[:, None, :] + offs[None]).reshape(-1, d)
    W = real.alpha_at(pts).reshape((len(corners),) + (side,) * d)
    axes = tuple(range(1, d + 1))
    src = real.epsilon * (W - W.reshape(len(W), -1).mean(axis=1).reshape((-1,) + (1,) * d))
    k = np.pi * np.arange(side) / side
    mu1 = 2 - 2 * np.cos(k)
    mu = np.zeros((side,) * d)
    for ax in range(d):
        sh = [1] * d
        sh[ax] = side
        mu = mu + mu1.reshape(sh)
    c = fft.dctn(src, type=2, axes=axes, norm="ortho")
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(mu > 0, c / np.where(mu > 0, mu, 1.0), 0.0)
    return fft.idctn(c, type=2, axes=axes, norm="ortho").reshape(len(corners), -1)


def _box_ramp(side, d, ell):
    """``dist(x, outer boundary of the box) / sqrt(ell)`` capped at one, box order."""
    idx = np.arange(side)
    dist1 = np.minimum(idx + 1, side - idx)
    grids = np.meshgrid(*([dist1] * d), indexing="ij")
    dist = np.minimum.reduce([g.ravel() for g in grids])
    return np.minimum(dist / math.sqrt(ell), 1.0)


@dataclass
class BulkState:
    config: SpinConfig
    region: Region
    corners: np.ndarray
    good: np.ndarray
    boundary_angle: float


def bulk_ground_state(real, contour, LamN, classifier, ell):
    """Approximate ground state on ``enlarge(spine, L/2, L/2)`` within LamN.

    Each l/2-block is set to e1 if it is not good, else to the Neumann Green
    profile multiplied by the ramp ``dist(x, outer boundary)/sqrt(l)``.
    """
    L = contour.L
    half = max(1, ell // 2)
    dbar = enlarge(contour.spine, max(1, L // 2), max(1, L // 2)) & LamN
    corners = block_corners(dbar, half)
    good = classifier.good(half, corners) if len(corners) else np.zeros(0, dtype=bool)
    d = dbar.d
    offs = np.array(list(np.ndindex(*(half,) * d)), dtype=np.int64)
    theta = np.zeros(len(dbar))
    ramp = _box_ramp(half, d, ell)
    bmax = 0.0
    if good.any():
        gc = corners[good]
        gN = _neumann_fields(real, gc, half)
        vals = gN * ramp[None, :]
        pts = (gc[:, None, :] + offs[None]).reshape(-1, d)
        idx = dbar.index_of(pts)
        ok = idx >= 0
        theta[idx[ok]] = vals.reshape(-1)[ok]
        edge = ramp < 1.0 / math.sqrt(ell) + 1e-12
        bmax = float(np.abs(vals[:, edge]).max())
    return BulkState(SpinConfig(dbar, theta), dbar, corners, good, bmax)


# ----------------------------------------------------------------------------
# modifications


def _indices(LamN, mask, origin):
    coords = np.argwhere(mask) + origin
    idx = LamN.index_of(coords)
    return idx[idx >= 0]


def _theta_frame(sigma, origin, shape):
    th = np.zeros(shape)
    rel = sigma.region.coords - origin
    ok = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
    th[tuple(rel[ok].T)] = sigma.theta[ok]
    return th


def mod1_reflect(sigma, collar, LamN):
    """Reflect wrong-sign spins on the minimal sign-consistent supersets of the collar halves.

    Returns ``(sigma1, info)``; ``info`` holds the grown sets and whether the
    growth stayed within distance L of the collar.
    """
    m = collar.masks
    o, sh = collar.frame_origin, collar.frame_shape
    th = _theta_frame(sigma, o, sh)
    lam = m["LamN"]
    c = np.cos(th)
    out = sigma.theta.copy()
    info = {"escaped": False, "envelope_ok": True}
    L = collar.params.L
    for sgn, key, s in (("plus", "Cplus", 1.0), ("minus", "Cminus", -1.0)):
        seed = m[key]
        if not seed.any():
            info[f"A_{sgn}"] = seed
            continue
        # outside LamN spins are e1, which is sign-consistent only for the + set
        viol = ~(np.sign(c) * s > 0) & lam
        A, esc = grow_until(seed, viol, limit_mask=lam)
        if s < 0:
            ob = ndimage.binary_dilation(A, structure=_structure(A.ndim, "graph")) & ~A
            esc = esc or bool(np.any(ob & ~lam))
        env = chebyshev_distance(seed) <= L
        info["escaped"] |= esc
        info["envelope_ok"] &= bool(np.all(~A | env))
        info[f"A_{sgn}"] = A
        flip = A & (np.sign(c) * s < 0)
        idx = _indices(LamN, flip, o)
        out[idx] = wrap_angle(np.pi - sigma.theta[idx])
    return SpinConfig(LamN, out), info


def mod2_damp(sigma1, collar, LamN):
    """Scale angles to 0 (resp. pi) deep inside the dirty part of the collar."""
    m = collar.masks
    o = collar.frame_origin
    L = collar.params.L
    out = sigma1.theta.copy()
    for sgn, base in (("plus", 0.0), ("minus", math.pi)):
        Dcal = m[f"Dcal_{sgn}"]
        if not Dcal.any():
            continue
        core = m[f"Dfrak_{sgn}_16"]
        tau = np.minimum(16 * chebyshev_distance(core) / L, 1.0)
        idx = _indices(LamN, Dcal, o)
        rel = LamN.coords[idx] - o
        t = tau[tuple(rel.T)]
        dev = wrap_angle(out[idx] - base)
        out[idx] = wrap_angle(t * dev + base)
    return SpinConfig(LamN, out)


def _collar_lambda(L):
    return L**-2.0 * math.log(L) ** 8


def mod3_optimize(sigma2, collar, LamN, real, lam=None, tol=1e-10):
    """Replace the configuration on the optimisation set by the maximiser of K.

    On each collar half the angles are shifted by the massive Dirichlet
    Green field (change of variables), the optimisation set is grown until
    its boundary angles lie in the convex band, K is maximised there with
    those boundary angles, and the change of variables is inverted.
    """
    m = collar.masks
    o, sh = collar.frame_origin, collar.frame_shape
    L = collar.params.L
    lam = _collar_lambda(L) if lam is None else lam
    out = sigma2.theta.copy()
    info = {"lambda": lam}
    for sgn, key in (("plus", "Cplus"), ("minus", "Cminus")):
        scr = m[f"scrC_{sgn}"]
        if not scr.any():
            info[f"g_{sgn}"] = np.zeros(sh, dtype=bool)
            continue
        reg = Region.from_mask(scr, o)
        g = solve_green(real, reg, lam, DIRICHLET, tol=1e-12)
        gsup = g.sup() if hasattr(g, "sup") else float(np.abs(g.values).max())
        info[f"gsup_{sgn}"] = float(gsup)
        if gsup >= math.pi / 12:
            raise SurgeryAbort(f"Green field too large on the {sgn} collar: {gsup:.3g}")
        gfr = np.zeros(sh)
        gfr[tuple((reg.coords - o).T)] = g.values
        th = _theta_frame(SpinConfig(LamN, out), o, sh)
        if sgn == "minus":
            th = np.pi - th
        th = wrap_angle(th)
        phi = wrap_angle(np.where(scr, th - np.cos(th) * gfr, th))
        viol = ~(np.abs(phi) <= collar.params.band)
        f, esc = grow_until(m[f"F_{sgn}"], viol, limit_mask=m[key])
        gmask = f & scr
        info[f"f_{sgn}"] = f
        info[f"g_{sgn}"] = gmask
        info[f"f_{sgn}_escaped"] = esc
        if not gmask.any():
            continue
        G = Region.from_mask(gmask, o)
        pot = local_potential(g, within=G, extend="zero")
        ob = boundary(G, "outer")
        tau = ScalarField(ob, phi[tuple((ob.coords - o).T)])
        if np.abs(tau.values).max(initial=0.0) > BAND + 1e-12:
            raise SurgeryAbort("optimisation set boundary leaves the convex band")
        phi0 = np.clip(phi[tuple((G.coords - o).T)], -BAND, BAND)
        res = maximize_K(G, pot, tau=tau, tol=tol, phi0=phi0)
        gG = g.at(G.coords)
        th_new = change_of_variables(res.phi.theta, gG, "inverse", tol=1e-14)
        if sgn == "minus":
            th_new = np.pi - th_new
        idx = LamN.index_of(G.coords)
        out[idx] = wrap_angle(th_new)
        info[f"residual_{sgn}"] = res.residual
        info[f"Phi_{sgn}"] = (G, res.phi.theta, gG)
    return SpinConfig(LamN, out), info


def mod4_interpolate(sigma3, collar, LamN, ell, mode="boundary"):
    """Ramp angles towards 0 (resp. pi) around the middle band M.

    ``mode="boundary"``: ``tau = dist(x, outer boundary of M_i)/sqrt(l)``
    capped at one on each component of the interpolation set, so the spin
    is exactly +-e1 on that boundary.  ``mode="interior"``: ``tau = 0`` on
    M_i and ``dist(x, M_i)/sqrt(l)`` outside it.
    """
    m = collar.masks
    o = collar.frame_origin
    out = sigma3.theta.copy()
    st = _structure(m["M"].ndim, "graph")
    rs = math.sqrt(ell)
    for comp in collar.components:
        Mi = comp & m["M"]
        if not Mi.any():
            continue
        if mode == "boundary":
            ob = ndimage.binary_dilation(Mi, structure=st) & ~Mi
            tau = np.minimum(chebyshev_distance(ob) / rs, 1.0)
        elif mode == "interior":
            tau = np.minimum(chebyshev_distance(Mi) / rs, 1.0)
        else:
            raise ValueError("mode must be 'boundary' or 'interior'")
        base = 0.0 if np.any(comp & m["Cplus"]) else math.pi
        idx = _indices(LamN, comp, o)
        rel = LamN.coords[idx] - o
        t = tau[tuple(rel.T)]
        dev = wrap_angle(out[idx] - base)
        out[idx] = wrap_angle(t * dev + base)
    return SpinConfig(LamN, out)


def contour_sign(contour, geometry=None):
    """+1 / -1 from the recovered Psi on the exterior part of the collar."""
    geo = geometry or contour_geometry(contour)
    labels = recover_collar_labels(contour)
    L = contour.L
    ext_blocks = {tuple(int(v) for v in c) for c in block_corners(geo.delta_ext - contour.spine, L)}
    vals = {labels[k] for k in ext_blocks if k in labels}
    if len(vals) != 1 or 0 in vals:
        raise ValueError("exterior collar labels are not constant")
    return vals.pop()


def glue(sigma_c, contour, bulk, sign, LamN, geometry=None):
    """Insert the bulk state and fix the orientation of interior components.

    Outside ``bulk.region``: interior components whose collar label is
    ``-sign`` are reflected across the e2 axis, the rest is kept.  On the
    bulk region the bulk state is inserted (reflected for ``sign = -1``).
    Returns ``(S, info)``.
    """
    geo = geometry or contour_geometry(contour)
    s = contour_sign(contour, geo)
    if s != sign:
        raise ValueError("sign does not match the exterior labels")
    labels = recover_collar_labels(contour)
    L = contour.L
    out = sigma_c.theta.copy()
    rest = LamN - bulk.region
    reflected = []
    for comp in connected_components(rest, "graph"):
        # label from the collar blocks of delta minus spine it meets
        touch = comp & (geo.delta - contour.spine)
        if len(touch) == 0:
            continue
        keys = {tuple(int(v) for v in c) for c in block_corners(touch, L)}
        vals = {labels.get(k, 0) for k in keys}
        if not (comp & geo.delta_ext):
            if vals == {-sign}:
                idx = LamN.index_of(comp.coords)
                out[idx] = wrap_angle(np.pi - out[idx])
                reflected.append(comp)
    idx = LamN.index_of(bulk.region.coords)
    bt = bulk.config.theta
    out[idx] = bt if sign == 1 else wrap_angle(np.pi - bt)
    return SpinConfig(LamN, out), {"reflected": reflected}


# ----------------------------------------------------------------------------
# energy comparison


def energy_gain(sigma, S, LamN, real, ell, xi, region=None):
    """``-H(S | e1) + H(sigma | e1)`` with the bad-box attribution of ``sigma``.

    Attribution families, all among l-boxes meeting ``region`` (default the
    sites where S differs from sigma): A1 standard boxes with Dirichlet
    energy at least ``eps^2 |ln eps| l^d / 16``, A2 the same on the grid
    staggered by l/2, A3 standard boxes with ``|sigma(Q).e1| <= 1 - xi/16``.
    """
    delta = total_energy(S, LamN, real) - total_energy(sigma, LamN, real)
    d = LamN.d
    if region is None:
        diff = np.flatnonzero(np.abs(wrap_angle(S.theta - sigma.theta)) > 0)
        region = Region(LamN.coords[diff], d=d) if len(diff) else Region.empty(d)
    eps = real.epsilon
    thr = eps**2 * abs(math.log(eps)) * ell**d / 16
    report = {"delta": delta, "threshold_energy": thr}
    if len(region) == 0:
        for k in ("A1", "A2", "A3"):
            report[k] = {"count": 0, "energy": 0.0}
        return delta, report
    origin, shape = region.frame(margin=2 * ell)
    th = np.full(shape, 0.0)
    rel = LamN.coords - origin
    ok = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
    th[tuple(rel[ok].T)] = sigma.theta[ok]
    E, mean_cos, _ = _box_energy_and_mean(th, ell)
    _, _, inside = _box_energy_and_mean(
        np.where(LamN.mask(origin, shape), 0.0, np.nan), ell)
    # magnetisation along e1 per box
    for name, off in (("A1", 0), ("A2", ell // 2), ("A3", 0)):
        corners = block_corners(region, ell, offset=off)
        rc = corners - origin
        valid = np.all((rc >= 0) & (rc < np.asarray(E.shape)), axis=1)
        rc = rc[valid]
        Ev = E[tuple(rc.T)]
        ins = inside[tuple(rc.T)]
        if name == "A3":
            sel = (np.abs(mean_cos[tuple(rc.T)]) <= 1 - xi / 16) & ins
        else:
            sel = (Ev >= thr) & ins
        report[name] = {"count": int(sel.sum()), "energy": float(Ev[sel].sum())}
    return delta, report


@dataclass
class SurgeryTrace:
    sigma: SpinConfig
    stages: dict
    energies: dict
    deltas: dict
    modified: dict
    supports: dict
    final: SpinConfig
    sign: int
    bulk: BulkState
    info: dict = field(default_factory=dict)

    def bookkeeping_error(self):
        total = self.energies["final"] - self.energies["input"]
        return abs(sum(self.deltas.values()) - total)

    def summary(self):
        return {
            "sign": self.sign,
            "energies": self.energies,
            "deltas": self.deltas,
            "modified": self.modified,
            "bookkeeping_error": self.bookkeeping_error(),
            "info": {k: v for k, v in self.info.items() if isinstance(v, (int, float, bool, str))},
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, default=float)


def run_surgery(sigma, contour, LamN, real, classifier, ell, xi=0.25, collar_params=None,
                phase=None, mod4_mode="boundary", tol=1e-10):
    """Apply the four modifications and the gluing to remove ``contour``."""
    if contour.touches_boundary:
        raise ValueError("contour touches the domain boundary; surgery refused")
    geo = contour_geometry(contour, ell=ell)
    sign = contour_sign(contour, geo)
    collar = collar_decomposition(contour, sigma, LamN, classifier, ell,
                                  collar_params=collar_params, phase=phase)
    s1, i1 = mod1_reflect(sigma, collar, LamN)
    s2 = mod2_damp(s1, collar, LamN)
    s3, i3 = mod3_optimize(s2, collar, LamN, real, tol=tol)
    s4 = mod4_interpolate(s3, collar, LamN, ell, mode=mod4_mode)
    bulk = bulk_ground_state(real, contour, LamN, classifier, ell)
    S, ig = glue(s4, contour, bulk, sign, LamN, geo)
    stages = {"input": sigma, "mod1": s1, "mod2": s2, "mod3": s3, "mod4": s4, "final": S}
    names = list(stages)
    energies = {k: total_energy(v, LamN, real) for k, v in stages.items()}
    deltas = {f"{a}->{b}": energies[b] - energies[a] for a, b in zip(names, names[1:])}
    modified = {}
    supports = {}
    for a, b in zip(names, names[1:]):
        diff = np.abs(wrap_angle(stages[b].theta - stages[a].theta)) > 1e-15
        modified[f"{a}->{b}"] = int(diff.sum())
        supports[f"{a}->{b}"] = Region(LamN.coords[diff], d=LamN.d) if diff.any() else Region.empty(LamN.d)
    info = {"mod1_escaped": i1["escaped"], "mod1_envelope_ok": i1["envelope_ok"],
            "lambda": i3["lambda"], "bulk_boundary_angle": bulk.boundary_angle,
            "N_L": geo.NL}
    for k, v in i3.items():
        if k.startswith("gsup") or k.startswith("residual"):
            info[f"mod3_{k}"] = v
    trace = SurgeryTrace(sigma, stages, energies, deltas, modified, supports, S, sign, bulk, info)
    trace.collar = collar
    trace.geometry = geo
    trace.mod1_info = i1
    trace.mod3_info = i3
    trace.glue_info = ig
    return trace


# ----------------------------------------------------------------------------
# flipped-block fixtures


class ResourceLimit(RuntimeError):
    """A requested run does not fit the memory or time budget."""


@dataclass
class FlippedBlock:
    sigma: SpinConfig
    LamN: Region
    real: object
    params: object
    k: int


def fixture_side(L, k):
    """Side of the domain for a flipped cube of ``k`` L-blocks.

    The contour spine reaches about four L-blocks beyond the flipped cube
    and delta one more; one extra L-block on each side keeps the contour
    away from the boundary.
    """
    return (k + 12) * L


# wall time per domain site of one run, measured at d=3, l=2, L=8 (58 s for 104^3)
SECONDS_PER_SITE = 5.2e-5


def surgery_footprint(d, ell, L, k=1, masks=40, bytes_per_site=8):
    """Rough memory (bytes), site count and wall time of one surgery run.

    The collar frame covers delta plus ``L + 4`` on each side; about
    ``masks`` boolean masks and a handful of float arrays live on it, and
    the domain holds several float arrays of its own.
    """
    n = fixture_side(L, k)
    frame = (k + 10) * L + 2 * (L + 4)
    sites = n**d
    fsites = frame**d
    mem = fsites * (masks + 6 * bytes_per_site) + sites * 12 * bytes_per_site
    return {"domain_side": n, "domain_sites": sites, "frame_sites": fsites, "bytes": int(mem),
            "seconds": sites * SECONDS_PER_SITE}


def _physical_memory():
    """Physical memory, lowered to the cgroup limit when one is set."""
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        mem = None
    for path in ("/sys/fs/cgroup/memory.max", "/sys/fs/cgroup/memory/memory.limit_in_bytes"):
        try:
            with open(path) as f:
                lim = int(f.read().strip())
        except (OSError, ValueError):
            continue
        mem = lim if mem is None else min(mem, lim)
    return mem


def surgery_ensemble(d, ell, L, epsilon, seeds, ks=(1,), xi=0.25, noise=0.05,
                     max_bytes=None, max_seconds=None, params=None):
    """Energy gain of the full pipeline on flipped-block fixtures.

    Before any work, the footprint of the largest fixture is compared with
    ``max_bytes`` (default: physical memory) and the projected total time
    with ``max_seconds``; either excess raises :class:`ResourceLimit`.

    Returns a dict ``k -> list of per-seed records`` (delta, spine volume,
    bookkeeping error, bad collar blocks).
    """
    from .classification import DisorderClassifier, phase_fields
    from .contours import extract_contours

    if max_bytes is None:
        max_bytes = _physical_memory()
    fp = surgery_footprint(d, ell, L, max(ks))
    if max_bytes is not None and fp["bytes"] > max_bytes:
        raise ResourceLimit(
            f"one run at d={d}, l={ell}, L={L} needs about {fp['bytes'] / 2**30:.1f} GiB "
            f"({fp['domain_sites']} domain sites, {fp['frame_sites']} collar-frame sites); "
            f"{max_bytes / 2**30:.1f} GiB available"
        )
    total = sum(surgery_footprint(d, ell, L, k)["seconds"] for k in ks) * len(seeds)
    if max_seconds is not None and total > max_seconds:
        raise ResourceLimit(f"projected wall time {total:.0f} s exceeds the budget {max_seconds:.0f} s")
    out = {}
    for k in ks:
        recs = []
        for seed in seeds:
            fx = flipped_block_fixture(d, ell, L, epsilon, seed, k=k, noise=noise, params=params)
            p = fx.params
            pf = phase_fields(fx.sigma, fx.LamN, p)
            cs = [c for c in extract_contours(fx.sigma, fx.LamN, p, phase=pf)
                  if not c.touches_boundary]
            if len(cs) != 1:
                recs.append({"seed": seed, "delta": float("nan"), "contours": len(cs)})
                continue
            clf = DisorderClassifier(fx.real, p)
            tr = run_surgery(fx.sigma, cs[0], fx.LamN, fx.real, clf, ell, xi, phase=pf)
            recs.append({
                "seed": seed,
                "delta": tr.energies["final"] - tr.energies["input"],
                "spine": len(cs[0].spine),
                "bookkeeping": tr.bookkeeping_error(),
                "bad_collar_blocks": len(tr.collar.bad_blocks),
                "mod1_monotone": tr.energies["mod1"] >= tr.energies["input"],
                "contours": 1,
            })
        out[k] = recs
    return out


def flipped_block_fixture(d, ell, L, epsilon, seed, k=1, noise=0.05, params=None,
                          max_bytes=None):
    """Configuration aligned with e1 except for a flipped cube of k L-blocks.

    The disorder is sampled with ``seed``; ``noise`` adds small Gaussian
    angle perturbations from an independent stream.
    """
    from .classification import ClassifierParams
    from .fields import sample_alpha

    if max_bytes is not None:
        fp = surgery_footprint(d, ell, L, k)
        if fp["bytes"] > max_bytes:
            raise ResourceLimit(
                f"flipped-block run needs about {fp['bytes'] / 2**30:.1f} GiB "
                f"({fp['domain_sites']} domain sites), budget {max_bytes / 2**30:.1f} GiB"
            )
    n = fixture_side(L, k)
    lo = -6 * L  # six L-blocks of margin on every side of the cube
    LamN = Region.box((lo,) * d, n)
    c = LamN.coords
    th = np.zeros(len(LamN))
    th[np.all((c >= 0) & (c < k * L), axis=1)] = math.pi
    rng = np.random.Generator(np.random.Philox(key=[seed % 2**64, 0x464C]))
    th = wrap_angle(th + noise * rng.standard_normal(len(th)))
    real = sample_alpha(LamN, seed, epsilon)
    params = params or ClassifierParams.calibrated(epsilon, ell, L)
    return FlippedBlock(SpinConfig(LamN, th), LamN, real, params, k)
