"""Spin configurations, Hamiltonians and exact energy decompositions.

Everything returns ``-H`` (the quantity a ground state maximises).  All
edge sums go through :func:`edge_sets` so that internal and
boundary-crossing edges are enumerated in exactly one place.
"""

from dataclasses import dataclass, field

import numpy as np

from .fields import (
    DIRICHLET,
    NEUMANN,
    ScalarField,
    local_potential,
    solve_green,
)
from .geometry import (
    LatticeBox,
    Region,
    boundary,
    internal_edges,
    neighbor_offsets,
    neighbor_table,
)

__all__ = [
    "wrap_angle",
    "SpinConfig",
    "BoundaryCondition",
    "EnergyBreakdown",
    "edge_sets",
    "wrapped_gradient",
    "dirichlet_energy",
    "hamiltonian",
    "block_average",
    "decompose_free",
    "decompose_dirichlet",
    "change_of_variables",
    "k_functional",
    "blayer_check",
    "spinwave_value",
    "reflect",
]


def wrap_angle(theta):
    """Representative of ``theta`` in ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2 * np.pi)


def wrapped_gradient(theta_x, theta_y):
    """``theta_y - theta_x`` reduced to ``(-pi, pi]``."""
    return wrap_angle(np.asarray(theta_y) - np.asarray(theta_x))


def _pair_sq(tx, ty):
    # |sigma_x - sigma_y|^2 = 4 sin^2(dtheta/2), accurate for small differences
    return 4.0 * np.sin(0.5 * (np.asarray(ty) - np.asarray(tx))) ** 2


class SpinConfig:
    """One angle per site of ``region``, stored in ``(-pi, pi]``."""

    def __init__(self, region, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim == 0:
            theta = np.full(len(region), float(theta))
        if theta.shape != (len(region),):
            raise ValueError("angles must match the region size")
        if not np.all(np.isfinite(theta)):
            raise ValueError("angles must be finite")
        self.region = region
        self.theta = wrap_angle(theta)

    @classmethod
    def constant(cls, region, angle=0.0):
        return cls(region, np.full(len(region), float(angle)))

    @property
    def vectors(self):
        return np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)

    def at(self, coords, default=None):
        idx = self.region.index_of(coords)
        if np.any(idx < 0):
            if default is None:
                raise KeyError("configuration not defined at some requested sites")
            out = np.full(len(idx), float(default))
            out[idx >= 0] = self.theta[idx[idx >= 0]]
            return out
        return self.theta[idx]

    def restrict(self, sub):
        return SpinConfig(sub, self.at(sub.coords))

    def with_values(self, sub, theta):
        """Copy with the angles on ``sub`` (a subset) replaced."""
        idx = self.region.index_of(sub.coords)
        if np.any(idx < 0):
            raise ValueError("replacement sites outside the configuration")
        th = self.theta.copy()
        th[idx] = theta
        return SpinConfig(self.region, th)

    def copy(self):
        return SpinConfig(self.region, self.theta.copy())

    def differs(self, other, atol=0.0):
        """Sites where two configurations on the same region differ."""
        if other.region != self.region:
            raise ValueError("configurations live on different regions")
        diff = np.abs(wrapped_gradient(self.theta, other.theta)) > atol
        return Region._from_keys(self.region.keys[diff], self.region.d)

    def __repr__(self):
        return f"SpinConfig(n={len(self.region)})"


def reflect(theta):
    """Reflection across the e2 axis, ``theta -> pi - theta``."""
    return wrap_angle(np.pi - np.asarray(theta))


@dataclass
class BoundaryCondition:
    """Boundary data for a Hamiltonian on a region ``R``.

    ``fixed``: angles given by ``data`` (a SpinConfig covering the outer
    boundary, or a constant angle); ``free``: no boundary coupling; ``ext``:
    e1 on outer-boundary sites outside ``domain``, free towards sites of
    ``domain``.
    """

    kind: str = "free"
    data: object = None
    domain: Region = None

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def fixed(cls, data):
        return cls("fixed", data)

    @classmethod
    def constant(cls, angle=0.0):
        return cls("fixed", float(angle))

    @classmethod
    def ext(cls, domain):
        return cls("ext", 0.0, domain)

    def angles_at(self, coords):
        """Boundary angles at ``coords`` (fixed sites only)."""
        if isinstance(self.data, SpinConfig):
            idx = self.data.region.index_of(coords)
            if np.any(idx < 0):
                raise ValueError("fixed boundary data missing at some outer-boundary sites")
            return self.data.theta[idx]
        return np.full(len(coords), float(self.data))


@dataclass
class EnergyBreakdown:
    total: float
    parts: dict = field(default_factory=dict)
    residual: float = 0.0

    def check(self, rtol=1e-10):
        return abs(self.residual) <= rtol * (1.0 + abs(self.total))


@dataclass
class EdgeSets:
    """Internal edges ``(i, j)`` and crossing edges ``(ci, cy)``.

    ``ci`` indexes the inside endpoint, ``cy`` holds outside coordinates.
    ``cmask`` marks crossing edges that couple to boundary data (all of
    them for fixed bc, those leaving the domain for ext, none for free).
    """

    i: np.ndarray
    j: np.ndarray
    ci: np.ndarray
    cy: np.ndarray
    cmask: np.ndarray


def edge_sets(region, bc=None):
    i, j = internal_edges(region)
    nb = neighbor_table(region)
    offs = neighbor_offsets(region.d, "graph")
    ci, cols = np.nonzero(nb < 0)
    cy = region.coords[ci] + offs[cols]
    kind = "free" if bc is None else bc.kind
    if kind == "fixed":
        cmask = np.ones(len(ci), dtype=bool)
    elif kind == "ext":
        cmask = ~bc.domain.contains_coords(cy)
    elif kind == "free":
        cmask = np.zeros(len(ci), dtype=bool)
    else:
        raise ValueError(f"unknown boundary condition {kind!r}")
    return EdgeSets(i, j, ci, cy, cmask)


def _theta(sigma, region):
    if sigma.region == region:
        return sigma.theta
    return sigma.at(region.coords)


def dirichlet_energy(sigma, region=None):
    """Sum of ``|sigma_x - sigma_y|^2`` over nearest-neighbour pairs in region."""
    R = sigma.region if region is None else region
    th = _theta(sigma, R)
    i, j = internal_edges(R)
    return float(np.sum(_pair_sq(th[i], th[j])))


def _crossing_terms(sigma, R, bc, th=None):
    es = edge_sets(R, bc)
    if th is None:
        th = _theta(sigma, R)
    ci, cy = es.ci[es.cmask], es.cy[es.cmask]
    ty = bc.angles_at(cy) if len(ci) else np.zeros(0)
    return es, ci, cy, ty


def hamiltonian(sigma, region, bc, real):
    """``-H_R(sigma | bc)``.

    ``-1/2 E_R(sigma) - 1/2 sum_crossing |sigma_x - sigma_y|^2
    + eps sum_x alpha_x sin(theta_x)``; the crossing sum runs over edges
    coupled to boundary data.
    """
    if isinstance(bc, str):
        bc = BoundaryCondition(bc)
    th = _theta(sigma, region)
    es, ci, cy, ty = _crossing_terms(sigma, region, bc, th)
    val = -0.5 * float(np.sum(_pair_sq(th[es.i], th[es.j])))
    if len(ci):
        val -= 0.5 * float(np.sum(_pair_sq(th[ci], ty)))
    val += real.epsilon * float(real.alpha_at(region.coords) @ np.sin(th))
    return val


def block_average(f, box):
    """Arithmetic mean over a box: a scalar for fields, a 2-vector for spins."""
    reg = box.region() if isinstance(box, LatticeBox) else box
    if len(reg) == 0:
        raise ValueError("empty box")
    if isinstance(f, SpinConfig):
        th = f.at(reg.coords)
        return np.array([np.cos(th).mean(), np.sin(th).mean()])
    return float(f.at(reg.coords, outside=np.nan).mean())


def _sum_sq(a):
    return float(np.sum(np.square(a)))


def decompose_free(sigma, box, lam, real, g=None, tol=1e-13):
    """Exact completed-square split of the free-boundary Hamiltonian on a box.

    Parts: ``quadratic`` = 1/2 [E(g) - E(s1) - E(s2 - g)] with ``s_k =
    sigma . e_k`` and ``g`` the Neumann field; ``mass`` = lam sum g s2;
    ``mean_field`` = eps alpha(Q) sum s2 (the term bounded by
    eps |alpha(Q)| |Q|).
    """
    Q = box.region() if isinstance(box, LatticeBox) else box
    if g is None:
        g = solve_green(real, Q, lam, NEUMANN, tol=tol)
    th = _theta(sigma, Q)
    c, s = np.cos(th), np.sin(th)
    gv = g.at(Q.coords)
    i, j = internal_edges(Q)
    a = real.alpha_at(Q.coords)
    parts = {
        "quadratic": 0.5 * (
            _sum_sq(gv[i] - gv[j]) - _sum_sq(c[i] - c[j])
            - _sum_sq((s[i] - gv[i]) - (s[j] - gv[j]))
        ),
        "mass": float(lam * gv @ s),
        "mean_field": float(real.epsilon * a.mean() * s.sum()),
    }
    total = hamiltonian(sigma, Q, BoundaryCondition.free(), real)
    return EnergyBreakdown(total, parts, total - sum(parts.values()))


def decompose_dirichlet(sigma, region, sigma0, lam, real, g=None, tol=1e-13):
    """Exact completed-square split of the fixed-boundary Hamiltonian.

    Edge sums run over edges meeting ``region`` with ``g`` set to zero
    outside.  Parts: ``grad_e1``, ``grad_e2_shift`` (both carry the -1/2),
    ``green_energy`` (+1/2 sum (grad g)^2), ``mass`` and ``boundary``
    (``sum_crossing g_x sin theta_y``).
    """
    bc = sigma0 if isinstance(sigma0, BoundaryCondition) else BoundaryCondition.fixed(sigma0)
    if g is None:
        g = solve_green(real, region, lam, DIRICHLET, tol=tol)
    th = _theta(sigma, region)
    es = edge_sets(region, bc)
    ci, cy = es.ci, es.cy
    ty = bc.angles_at(cy)
    gv = g.at(region.coords)
    c, s = np.cos(th), np.sin(th)
    i, j = es.i, es.j
    de1 = np.concatenate([c[i] - c[j], c[ci] - np.cos(ty)])
    de2 = np.concatenate([s[i] - s[j], s[ci] - np.sin(ty)])
    dg = np.concatenate([gv[i] - gv[j], gv[ci]])
    parts = {
        "grad_e1": -0.5 * _sum_sq(de1),
        "grad_e2_shift": -0.5 * _sum_sq(de2 - dg),
        "green_energy": 0.5 * _sum_sq(dg),
        "mass": float(lam * gv @ s),
        "boundary": float(gv[ci] @ np.sin(ty)),
    }
    total = hamiltonian(sigma, region, bc, real)
    return EnergyBreakdown(total, parts, total - sum(parts.values()))


def change_of_variables(theta, g, direction="forward", tol=1e-12, maxiter=10000):
    """``phi = theta - cos(theta) g`` and its inverse.

    The inverse solves ``theta = phi + cos(theta) g`` by fixed-point
    iteration, a contraction with constant ``max|g| < 1``.
    """
    gv = g.values if hasattr(g, "values") else np.asarray(g, dtype=np.float64)
    if isinstance(theta, SpinConfig):
        region, th = theta.region, theta.theta
        if hasattr(g, "region") and g.region != region:
            gv = g.at(region.coords)
    else:
        region, th = None, np.asarray(theta, dtype=np.float64)
    gmax = float(np.abs(gv).max()) if gv.size else 0.0
    if gmax >= 1:
        raise ValueError("change of variables is singular for |g| >= 1")
    if direction == "forward":
        out = th - np.cos(th) * gv
    elif direction == "inverse":
        out = th + np.cos(th) * gv
        for _ in range(maxiter):
            new = th + np.cos(out) * gv
            err = float(np.abs(new - out).max()) if out.size else 0.0
            out = new
            if err <= tol * (1 - gmax) or err == 0:
                break
        else:
            raise RuntimeError("fixed-point inversion did not converge")
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    if region is None:
        return out
    return SpinConfig(region, out)


def _boundary_angles(region, tau):
    """Crossing-edge data: inside index, outside angle (tau may be scalar,
    SpinConfig or None for free boundary)."""
    nb = neighbor_table(region)
    offs = neighbor_offsets(region.d, "graph")
    ci, cols = np.nonzero(nb < 0)
    if tau is None:
        return ci[:0], np.zeros(0)
    cy = region.coords[ci] + offs[cols]
    if isinstance(tau, SpinConfig):
        return ci, tau.at(cy)
    if isinstance(tau, ScalarField):
        return ci, tau.at(cy)
    return ci, np.full(len(ci), float(tau))


def k_functional(phi, region, m, tau=None):
    """``sum_{e cap R} [cos(grad phi) - 1] + 1/4 sum_x m_x cos^2 phi_x``.

    ``tau`` supplies the angles on the outer boundary; ``None`` drops
    crossing edges (free boundary).
    """
    th = _theta(phi, region) if isinstance(phi, SpinConfig) else np.asarray(phi)
    mv = m.values if hasattr(m, "values") else np.broadcast_to(np.asarray(m, float), th.shape)
    i, j = internal_edges(region)
    ci, ty = _boundary_angles(region, tau)
    edge = float(np.sum(np.cos(th[i] - th[j]) - 1.0))
    edge += float(np.sum(np.cos(th[ci] - ty) - 1.0))
    return edge + 0.25 * float(mv @ np.cos(th) ** 2)


def blayer_check(sigma, region, lam, bc, real, g=None, tol=1e-13):
    """Evaluate the boundary-layer expansion of ``-H`` after the change of variables.

    Returns a dict with ``lhs`` (exact ``-H``), the main terms, ``residual =
    lhs - sum(main terms)`` and ``bound``: the error expression evaluated
    with unit constant.  ``bc`` is ``'free'`` (Neumann field, internal
    edges) or a fixed BoundaryCondition (Dirichlet field).
    """
    if isinstance(bc, str) and bc == "free":
        bc = BoundaryCondition.free()
    free = bc.kind == "free"
    if g is None:
        g = solve_green(real, region, lam, NEUMANN if free else DIRICHLET, tol=tol)
    th = _theta(sigma, region)
    gv = g.at(region.coords)
    if np.abs(gv).max() >= 1:
        raise ValueError("boundary-layer expansion needs |g| < 1")
    thp = th - np.cos(th) * gv
    lhs = hamiltonian(sigma, region, bc, real)
    i, j = internal_edges(region)
    m = local_potential(g, region, extend="none" if free else "zero").values
    parts = {
        "cos_edges": float(np.sum(np.cos(thp[i] - thp[j]) - 1.0)),
        "potential": 0.25 * float(m @ np.cos(thp) ** 2),
    }
    s = np.sin(th)
    # gradient norms over edges meeting R (plus boundary-boundary edges for fixed)
    grad_sig_sq = float(np.sum(_pair_sq(th[i], th[j])))
    dg_int = gv[i] - gv[j]
    if not free:
        es = edge_sets(region, bc)
        ci, cy = es.ci, es.cy
        ty = bc.angles_at(cy)
        parts["cos_edges"] += float(np.sum(np.cos(thp[ci] - ty) - 1.0))
        parts["boundary_field"] = float(gv[ci] @ np.sin(ty))
        parts["boundary_square"] = 0.25 * float(np.cos(ty) ** 2 @ gv[ci] ** 2)
        grad_sig_sq += float(np.sum(_pair_sq(th[ci], ty)))
        ob = boundary(region, "outer")
        bi, bj = internal_edges(ob)
        tob = bc.angles_at(ob.coords)
        grad_sig_sq += float(np.sum(_pair_sq(tob[bi], tob[bj])))
        dg = np.concatenate([dg_int, gv[ci]])
    else:
        dg = dg_int
    main = sum(parts.values())
    grad_g_sup = float(np.abs(dg).max()) if dg.size else 0.0
    bound = lam * float(np.linalg.norm(gv)) * float(np.linalg.norm(s))
    bound += (grad_g_sup + float(np.abs(gv).max())) * (grad_sig_sq + _sum_sq(dg))
    if free:
        bound += real.epsilon * abs(float(real.alpha_at(region.coords).mean())) * float(np.abs(s).sum())
    return {
        "lhs": lhs,
        "parts": parts,
        "residual": lhs - main,
        "bound": bound,
    }


def spinwave_value(real, box, psi, tol=1e-13):
    """Spin-wave prediction for a box tilted to angle ``psi``.

    Returns ``(quadratic, term_one)`` with ``quadratic = -(eps^2/2) cos^2 psi
    <a, (-Delta^N)^{-1} a>`` for the centred disorder ``a`` and ``term_one =
    eps |sum alpha|``.
    """
    Q = box.region() if isinstance(box, LatticeBox) else box
    a = real.alpha_at(Q.coords)
    ah = a - a.mean()
    g = solve_green(real, Q, 0.0, NEUMANN, tol=tol)
    # g = eps (-Delta^N)^{-1} a_hat, so eps^2 <a_hat, (-Delta)^{-1} a_hat> = eps <a_hat, g>
    form = real.epsilon * float(ah @ g.values)
    quad = -0.5 * np.cos(psi) ** 2 * form
    return quad, real.epsilon * abs(float(a.sum()))
