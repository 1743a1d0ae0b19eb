"""Maximisation of the K functional, decay probes and point defects.

``K(phi | tau) = sum_{e cap R} [cos(grad_e phi) - 1] + 1/4 sum_x m_x cos^2 phi_x``
with ``phi = tau`` on the outer boundary.  In the band ``|phi| <= pi/6`` the
negative Hessian is a weighted Laplacian plus a positive diagonal, so the
maximiser is unique there; a pull-in flow first brings any start into the
band, then damped Newton steps converge quadratically.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize

from .energy import SpinConfig, _boundary_angles
from .fields import pcg
from .geometry import (
    LatticeBox,
    Region,
    connected_components,
    internal_edges,
)

__all__ = [
    "MaximizerResult",
    "DefectParams",
    "k_gradient",
    "maximize_K",
    "stationarity_residual",
    "decay_profile",
    "linear_decay_rate",
    "defect_detect",
    "min_defect_energy",
    "ball",
    "harmonic_extension",
]

BAND = np.pi / 6


@dataclass
class MaximizerResult:
    phi: SpinConfig
    iterations: int
    residual: float
    objective: float
    trace: list = field(default_factory=list)  # (iteration, objective, residual)
    converged: bool = True

    def max_principle_ok(self, tau_sup, atol=1e-8):
        return float(np.abs(self.phi.theta).max(initial=0.0)) <= tau_sup + atol


@dataclass(frozen=True)
class DefectParams:
    mu: float
    delta: float

    def __post_init__(self):
        if not 0 < self.delta < self.mu < 1:
            raise ValueError("defect parameters need 0 < delta < mu < 1")


def _mvals(m, n):
    if m is None:
        return np.zeros(n)
    v = m.values if hasattr(m, "values") else np.asarray(m, dtype=np.float64)
    return np.broadcast_to(v, (n,)).astype(np.float64)


class _KProblem:
    def __init__(self, region, m, tau):
        self.region = region
        self.n = len(region)
        self.m = _mvals(m, self.n)
        if np.any(self.m < 0):
            raise ValueError("potential must be non-negative")
        self.i, self.j = internal_edges(region)
        self.ci, self.ty = _boundary_angles(region, 0.0 if tau is None else tau)
        self.tau_sup = float(np.abs(self.ty).max()) if len(self.ty) else 0.0

    def value(self, phi):
        e = np.sum(np.cos(phi[self.i] - phi[self.j]) - 1.0)
        e += np.sum(np.cos(phi[self.ci] - self.ty) - 1.0)
        return float(e + 0.25 * self.m @ np.cos(phi) ** 2)

    def grad(self, phi):
        g = np.zeros(self.n)
        s = np.sin(phi[self.i] - phi[self.j])
        np.add.at(g, self.i, -s)
        np.add.at(g, self.j, s)
        np.add.at(g, self.ci, -np.sin(phi[self.ci] - self.ty))
        g -= 0.5 * self.m * np.sin(phi) * np.cos(phi)
        return g

    def neg_hessian(self, phi):
        c = np.cos(phi[self.i] - phi[self.j])
        diag = np.zeros(self.n)
        np.add.at(diag, self.i, c)
        np.add.at(diag, self.j, c)
        np.add.at(diag, self.ci, np.cos(phi[self.ci] - self.ty))
        diag += 0.5 * self.m * np.cos(2 * phi)
        rows = np.concatenate([np.arange(self.n), self.i, self.j])
        cols = np.concatenate([np.arange(self.n), self.j, self.i])
        vals = np.concatenate([diag, -c, -c])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))


def _pull_in(phi, tol=1e-12, step=0.1, max_steps=100000):
    """Explicit Euler for the flow that pulls angles back into ``|phi| <= pi/6``."""
    phi = phi.copy()
    steps = 0
    while steps < max_steps:
        x = np.where(phi > BAND, -(phi - BAND), np.where(phi < -BAND, -(phi + BAND), 0.0))
        if np.abs(x).max(initial=0.0) <= tol:
            break
        phi += step * x
        steps += 1
    return np.clip(phi, -BAND, BAND), steps


def k_gradient(phi, region, m, tau=None):
    """Analytic gradient of K, the left side of the stationarity equation."""
    th = phi.theta if isinstance(phi, SpinConfig) else np.asarray(phi)
    return _KProblem(region, m, tau).grad(th)


def stationarity_residual(phi, region, m, tau=None):
    """Sup norm of the stationarity defect ``grad K``."""
    g = k_gradient(phi, region, m, tau)
    return float(np.abs(g).max(initial=0.0))


def _linsolve(A, b):
    if A.shape[0] <= 40000:
        return spla.spsolve(A.tocsc(), b)
    x, _, _ = pcg(A, b, tol=1e-12)
    return x


def maximize_K(region, m, tau=0.0, tol=1e-10, phi0=None, max_iter=200,
               check_tau=True):
    """Unique maximiser of K on ``region`` with boundary angles ``tau``.

    Stage one runs the pull-in flow (Euler step 0.1) from ``phi0`` (default
    zero) until every angle lies in ``[-pi/6, pi/6]``; stage two runs damped
    Newton with backtracking so the objective never decreases.
    """
    prob = _KProblem(region, m, tau)
    if check_tau and prob.tau_sup > BAND + 1e-15:
        raise ValueError("boundary angles exceed pi/6; outside the convex regime")
    n = prob.n
    phi = np.zeros(n) if phi0 is None else np.array(
        phi0.theta if isinstance(phi0, SpinConfig) else phi0, dtype=np.float64)
    trace = []
    phi = np.clip(phi, -np.pi / 2, np.pi / 2)
    phi, flow_steps = _pull_in(phi)
    val = prob.value(phi)
    g = prob.grad(phi)
    res = float(np.abs(g).max(initial=0.0))
    trace.append((0, val, res))
    it = 0
    while res > tol and it < max_iter:
        it += 1
        H = prob.neg_hessian(phi)
        step = _linsolve(H, g)
        t = 1.0
        while True:
            cand = phi + t * step
            cval = prob.value(cand)
            if cval >= val - 1e-15 * (1 + abs(val)) or t < 1e-8:
                break
            t *= 0.5
        if cval < val - 1e-15 * (1 + abs(val)):
            # Newton direction failed; fall back to a small gradient step
            cand = phi + 0.1 * g
            cval = prob.value(cand)
        phi, val = cand, cval
        g = prob.grad(phi)
        res = float(np.abs(g).max(initial=0.0))
        trace.append((it, val, res))
    out = MaximizerResult(SpinConfig(region, phi), it, res, val, trace, res <= tol)
    if not out.converged:
        raise RuntimeError(f"K maximisation did not converge (residual {res:.3e})")
    return out


def harmonic_extension(region, tau):
    """Discrete harmonic function on ``region`` with boundary values ``tau``."""
    prob = _KProblem(region, None, tau)
    n = prob.n
    diag = np.zeros(n)
    np.add.at(diag, prob.i, 1.0)
    np.add.at(diag, prob.j, 1.0)
    np.add.at(diag, prob.ci, 1.0)
    rows = np.concatenate([np.arange(n), prob.i, prob.j])
    cols = np.concatenate([np.arange(n), prob.j, prob.i])
    vals = np.concatenate([diag, -np.ones(len(prob.i)), -np.ones(len(prob.i))])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    b = np.zeros(n)
    np.add.at(b, prob.ci, prob.ty)
    return _linsolve(A, b)


def decay_profile(result, region, anchors, fit_range=None, floor=1e-300):
    """Maximum ``|phi|`` on l-infinity distance shells from an anchor set.

    ``anchors`` is an (k, d) coordinate array (typically part of the outer
    boundary).  Returns a dict with ``distance``, ``profile``, the fraction
    of shell-to-shell steps that decrease (``monotone``) and the fitted
    exponential ``rate`` (minus the slope of log profile vs distance over
    ``fit_range``, a (lo, hi) distance window).
    """
    phi = result.phi.theta if hasattr(result, "phi") else np.asarray(result)
    anchors = np.asarray(anchors.coords if isinstance(anchors, Region) else anchors,
                         dtype=np.int64).reshape(-1, region.d)
    c = region.coords
    dist = np.full(len(c), np.iinfo(np.int64).max)
    for a in anchors:
        dist = np.minimum(dist, np.abs(c - a).max(axis=1))
    shells = np.unique(dist)
    prof = np.array([np.abs(phi[dist == s]).max() for s in shells])
    steps = np.diff(prof)
    monotone = float(np.mean(steps <= 0)) if len(steps) else 1.0
    sel = prof > floor
    if fit_range is not None:
        sel &= (shells >= fit_range[0]) & (shells <= fit_range[1])
    rate = float("nan")
    if sel.sum() >= 2:
        slope = np.polyfit(shells[sel].astype(float), np.log(prof[sel]), 1)[0]
        rate = -float(slope)
    return {"distance": shells, "profile": prof, "monotone": monotone, "rate": rate}


def linear_decay_rate(m, width=None, d=1):
    """Decay rate of the linearised stationarity equation ``Delta phi = m phi / 2``.

    On a line the decaying solution is ``r^x`` with ``r + 1/r = 2 + m/2``.
    On a strip of ``width`` sites per transverse direction (zero data on its
    sides) the slowest transverse mode adds ``(d - 1)(2 - 2 cos(pi/(width+1)))``.
    """
    shift = m / 2.0
    if width is not None and d > 1:
        shift += (d - 1) * (2 - 2 * np.cos(np.pi / (width + 1)))
    return float(np.arccosh(1 + shift / 2.0))


def defect_detect(sigma, box, params, dist_threshold=None, diam_threshold=None):
    """Search a box for a defect.

    A defect is present if the box average satisfies ``sigma(Q).e1 >= 1 -
    delta`` while a graph-connected set of sites with ``sigma.e1 <= 1 - mu``,
    all at l-infinity distance at least ``dist_threshold`` (default side/4)
    from the complement of the box, has diameter at least ``diam_threshold``
    (default side/4).

    Returns ``(found, witness)`` where the witness is the component of
    largest diameter (or None).
    """
    reg = box.region() if isinstance(box, LatticeBox) else box
    lo, hi = reg.bbox()
    side = int((hi - lo + 1).max())
    if dist_threshold is None:
        dist_threshold = side / 4
    if diam_threshold is None:
        diam_threshold = side / 4
    th = sigma.at(reg.coords)
    if np.cos(th).mean() < 1 - params.delta:
        return False, None
    c = reg.coords
    dcomp = np.minimum(c - lo + 1, hi - c + 1).min(axis=1)
    cand = (np.cos(th) <= 1 - params.mu) & (dcomp >= dist_threshold)
    if not cand.any():
        return False, None
    sub = Region._from_keys(reg.keys[cand], reg.d)
    best, best_diam = None, -1
    for comp in connected_components(sub, "graph"):
        cc = comp.coords
        diam = int((cc.max(axis=0) - cc.min(axis=0)).max())
        if diam > best_diam:
            best, best_diam = comp, diam
    return best_diam >= diam_threshold, best


def ball(l, d):
    """l2 ball ``{x : |x|_2 <= l}`` centred at the origin."""
    r = int(np.floor(l))
    ax = np.arange(-r, r + 1)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    return Region(pts[(pts**2).sum(axis=1) <= l * l], d=d)


def min_defect_energy(l, d, params, starts=4, seed=0, max_outer=30, tol=1e-8,
                      return_config=False):
    """Smallest Dirichlet energy found on an l2 ball carrying a point defect.

    Constraints: ``sigma(B).e1 >= 1 - delta`` and ``sigma_0.e1 <= 1 - mu``.
    The centre angle is pinned at ``arccos(1 - mu)`` (the energy is
    increasing in the centre tilt); the average constraint is enforced by an
    augmented Lagrangian with L-BFGS-B inner solves, from several smooth
    starting profiles.  The value is an upper bound on the true minimum.

    Returns ``(energy, flag_converged)`` (and the configuration when asked).
    """
    B = ball(l, d)
    n = len(B)
    i, j = internal_edges(B)
    c0 = int(B.index_of(np.zeros((1, d), dtype=np.int64))[0])
    free = np.ones(n, dtype=bool)
    free[c0] = False
    theta0 = float(np.arccos(1 - params.mu))
    target = 1 - params.delta
    r = np.sqrt((B.coords.astype(float) ** 2).sum(axis=1))
    rng = np.random.default_rng(seed)

    def full(x):
        th = np.empty(n)
        th[free] = x
        th[c0] = theta0
        return th

    def energy_grad(th):
        dth = th[i] - th[j]
        e = float(np.sum(4 * np.sin(0.5 * dth) ** 2))
        s = 2 * np.sin(dth)
        g = np.zeros(n)
        np.add.at(g, i, s)
        np.add.at(g, j, -s)
        return e, g

    best = (np.inf, None, False)
    scales = np.geomspace(0.5, max(l / 2, 1.0), starts)
    for s in scales:
        th = theta0 * np.exp(-r / s) + 1e-3 * rng.standard_normal(n)
        x = th[free]
        lam_m, rho = 0.0, 10.0 * n
        ok = False
        for _ in range(max_outer):
            def f(x):
                th = full(x)
                e, g = energy_grad(th)
                cbar = np.cos(th).mean()
                viol = target - cbar
                # augmented Lagrangian for the inequality cbar >= target
                z = max(0.0, lam_m / rho + viol)
                val = e + 0.5 * rho * z * z - 0.5 * lam_m**2 / rho
                g = g + rho * z * np.sin(th) / n  # d viol / d theta = sin/n
                return val, g[free]

            sol = optimize.minimize(f, x, jac=True, method="L-BFGS-B",
                                    options={"maxiter": 5000, "gtol": 1e-10})
            x = sol.x
            viol = target - np.cos(full(x)).mean()
            lam_m = max(0.0, lam_m + rho * viol)
            if viol <= tol:
                ok = True
                if abs(lam_m * viol) < 1e-12 or viol <= 0:
                    break
            else:
                rho *= 4
        th = full(x)
        e = energy_grad(th)[0]
        feasible = np.cos(th).mean() >= target - 1e-6
        if feasible and e < best[0]:
            best = (e, th, ok)
    if best[1] is None:
        return (np.nan, False, None) if return_config else (np.nan, False)
    if return_config:
        return best[0], best[2], SpinConfig(B, best[1])
    return best[0], best[2]
