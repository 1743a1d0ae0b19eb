"""Quenched disorder and the lattice Green fields built from it.

Three independent routes to ``g = eps (-Delta + lam)^{-1} alpha`` are kept
side by side so that each can serve as an oracle for the others: a
preconditioned conjugate-gradient solve on a sparse operator, an exact
expansion in the sine/cosine eigenbasis of a box, and a Monte Carlo
random-walk (Feynman-Kac) estimator.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import fft, integrate

from .geometry import (
    LatticeBox,
    Region,
    boundary,
    internal_edges,
    neighbor_offsets,
    neighbor_table,
)
from .rng import STREAM_ALPHA, gaussian_at

__all__ = [
    "ScalarField",
    "GreenField",
    "PotentialField",
    "DisorderRealization",
    "SpectralConstants",
    "SolverError",
    "sample_alpha",
    "laplacian",
    "pcg",
    "solve_green",
    "eigen_solve_oracle",
    "fk_estimate",
    "local_potential",
    "spectral_sigmas",
    "harmonic_split",
    "locality_gap",
    "gradient_energy",
]

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


class SolverError(RuntimeError):
    """Iterative solve did not converge; carries the final residual."""

    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def _bc(bc):
    b = str(bc).lower()
    if b in ("d", "dirichlet"):
        return DIRICHLET
    if b in ("n", "neumann"):
        return NEUMANN
    raise ValueError(f"unknown boundary condition {bc!r}")


@dataclass
class ScalarField:
    region: Region
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.region),):
            raise ValueError("field values must match the region size")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def at(self, coords, outside=0.0):
        """Values at arbitrary coordinates, ``outside`` for non-members."""
        idx = self.region.index_of(coords)
        out = np.full(idx.shape, outside, dtype=np.float64)
        ok = idx >= 0
        out[ok] = self.values[idx[ok]]
        return out

    def restrict(self, sub):
        idx = self.region.index_of(sub.coords)
        if np.any(idx < 0):
            raise ValueError("restriction target is not a subset")
        return ScalarField(sub, self.values[idx])

    def mean(self):
        return float(self.values.mean())

    def sup(self):
        return float(np.abs(self.values).max()) if len(self.values) else 0.0


@dataclass
class GreenField(ScalarField):
    lam: float = 0.0
    bc: str = DIRICHLET
    residual: float = 0.0

    @property
    def base(self):
        return ScalarField(self.region, self.values)


@dataclass
class PotentialField(ScalarField):
    pass


@dataclass
class DisorderRealization:
    """A frozen disorder field on ``region``.

    ``alpha`` is a function of ``(seed, site)`` only, so values outside the
    stored region can always be regenerated with :meth:`alpha_at`.
    """

    seed: int
    epsilon: float
    region: Region
    alpha: ScalarField
    override: dict = field(default_factory=dict, repr=False)

    def alpha_at(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.region.d)
        idx = self.region.index_of(coords)
        out = np.empty(len(coords))
        ok = idx >= 0
        out[ok] = self.alpha.values[idx[ok]]
        if (~ok).any():
            out[~ok] = gaussian_at(coords[~ok], self.seed, STREAM_ALPHA)
        return out

    def on(self, sub):
        """Realization restricted to (or extended to) another region."""
        return DisorderRealization(
            self.seed, self.epsilon, sub, ScalarField(sub, self.alpha_at(sub.coords))
        )

    @classmethod
    def from_values(cls, region, values, epsilon, seed=0):
        """Realization with user supplied disorder (fixtures, planted spikes)."""
        return cls(int(seed), float(epsilon), region, ScalarField(region, values))


def sample_alpha(region, seed, epsilon):
    """I.i.d. standard Gaussians on ``region`` keyed by ``(seed, site)``."""
    vals = gaussian_at(region.coords, seed, STREAM_ALPHA)
    return DisorderRealization(int(seed), float(epsilon), region, ScalarField(region, vals))


def laplacian(region, bc, lam=0.0):
    """Sparse matrix of ``-Delta^bc + lam`` in the region's site order.

    Dirichlet: every site has diagonal 2d (neighbours outside are fixed at
    zero); Neumann: only internal edges enter.
    """
    bc = _bc(bc)
    n = len(region)
    i, j = internal_edges(region)
    if bc == DIRICHLET:
        diag = np.full(n, 2.0 * region.d)
    else:
        diag = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
        diag = diag.astype(np.float64)
    diag = diag + lam
    rows = np.concatenate([np.arange(n), i, j])
    cols = np.concatenate([np.arange(n), j, i])
    vals = np.concatenate([diag, -np.ones(len(i)), -np.ones(len(i))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def pcg(A, b, tol=1e-10, maxiter=None, project=False, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``max|b - A x| <= tol * max(max|b|, tiny)``.  With
    ``project=True`` the right-hand side and iterates are kept orthogonal to
    constants (singular Neumann operator).

    Returns
    -------
    x : ndarray
    residual : float
        Final sup-norm of ``b - A x``.
    iterations : int
    """
    n = len(b)
    b = np.asarray(b, dtype=np.float64)
    if project:
        b = b - b.mean()
    if maxiter is None:
        maxiter = max(10 * n, 1000)
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if project:
        x -= x.mean()
    r = b - A @ x
    scale = max(float(np.abs(b).max()) if n else 0.0, 1e-300)
    res = float(np.abs(r).max()) if n else 0.0
    if res <= tol * scale:
        return x, res, 0
    z = dinv * r
    if project:
        z -= z.mean()
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if it % 50 == 0:
            # periodic true-residual refresh guards against drift
            r = b - A @ x
        res = float(np.abs(r).max())
        if res <= tol * scale:
            if project:
                x -= x.mean()
            r = b - A @ x
            return x, float(np.abs(r).max()), it
        z = dinv * r
        if project:
            z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError("conjugate gradient did not converge", res)


def _source(real, sub, bc):
    a = real.alpha_at(sub.coords)
    if bc == NEUMANN:
        a = a - a.mean()
    return real.epsilon * a


def solve_green(real, subregion=None, lam=0.0, bc=DIRICHLET, tol=1e-10, source=None):
    """Green field ``eps (-Delta^bc + lam)^{-1} alpha`` on ``subregion``.

    Neumann fields use the centred source ``alpha - mean(alpha)``; at
    ``lam = 0`` the mean-zero solution is returned, which requires the
    subregion to be graph connected.  ``source`` replaces ``eps * alpha``
    when given (used by linear-algebra checks).
    """
    bc = _bc(bc)
    sub = real.region if subregion is None else subregion
    if lam < 0:
        raise ValueError("mass must be non-negative")
    if source is None:
        b = _source(real, sub, bc)
    else:
        b = np.asarray(source, dtype=np.float64)
        if bc == NEUMANN:
            b = b - b.mean()
    A = laplacian(sub, bc, lam)
    singular = bc == NEUMANN and lam == 0
    if singular and len(sub) == 1:
        return GreenField(sub, np.zeros(1), lam=lam, bc=bc, residual=0.0)
    x, res, _ = pcg(A, b, tol=tol, project=singular)
    return GreenField(sub, x, lam=float(lam), bc=bc, residual=res)


def _box_check(real, box):
    if isinstance(box, LatticeBox):
        return box
    if isinstance(box, Region):
        lo, hi = box.bbox()
        side = hi - lo + 1
        if len(set(side.tolist())) != 1 or len(box) != int(np.prod(side)):
            raise ValueError("eigenbasis oracle needs a full cubic box")
        return LatticeBox(tuple(lo), int(side[0]))
    raise ValueError("eigenbasis oracle needs a box")


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


def _transform(arr, bc, inverse=False):
    if bc == DIRICHLET:
        f = fft.idstn if inverse else fft.dstn
        return f(arr, type=1, norm="ortho")
    f = fft.idctn if inverse else fft.dctn
    return f(arr, type=2, norm="ortho")


def eigen_solve_oracle(real, box, lam=0.0, bc=DIRICHLET, source=None, return_modes=False):
    """Green field on a box by exact diagonalisation.

    Dirichlet eigenvectors are the type-I sines with ``k = pi j/(n+1)``,
    Neumann ones the type-II cosines with ``k = pi j/n``; eigenvalues are
    ``sum_i (2 - 2 cos k_i) + lam``.  For Neumann at ``lam = 0`` the zero
    mode is dropped.
    """
    bc = _bc(bc)
    box = _box_check(real, box)
    reg = box.region()
    n, d = box.side, box.d
    if source is None:
        b = _source(real, reg, bc)
    else:
        b = np.asarray(source, dtype=np.float64)
        if bc == NEUMANN:
            b = b - b.mean()
    arr = b.reshape((n,) * d)  # region order is lexicographic = C order
    mu = _mode_eigs(n, d, bc, lam)
    coef = _transform(arr, bc)
    with np.errstate(divide="ignore", invalid="ignore"):
        gk = np.where(mu > 0, coef / np.where(mu > 0, mu, 1.0), 0.0)
    g = _transform(gk, bc, inverse=True).ravel()
    res = float(np.abs(laplacian(reg, bc, lam) @ g - b).max())
    out = GreenField(reg, g, lam=float(lam), bc=bc, residual=res)
    if return_modes:
        return out, coef, mu
    return out


def fk_estimate(real, subregion, x, lam=0.0, walks=10000, seed=0, bc=DIRICHLET,
                holding="mean", batch=None):
    """Random-walk estimate of the Green field at site ``x``.

    The walk jumps at rate 2d to a uniform neighbour (Neumann: rate equal to
    the number of internal neighbours) and is killed at rate ``lam``; it
    stops on the first jump out of the subregion.  Each visit to ``y``
    contributes ``eps * alpha_y`` times the holding time.  With
    ``holding='mean'`` the exponential holding time is replaced by its mean
    ``1/(rate + lam)`` (same expectation, smaller variance); ``'sampled'``
    draws it.

    Returns
    -------
    estimate, standard_error : float
    """
    bc = _bc(bc)
    if lam < 0:
        raise ValueError("mass must be non-negative")
    if bc == NEUMANN and lam == 0:
        raise ValueError("walk with reflecting boundary and no killing never stops")
    if holding not in ("mean", "sampled"):
        raise ValueError("holding must be 'mean' or 'sampled'")
    sub = subregion
    start = sub.index_of(np.asarray(x).reshape(1, -1))[0]
    if start < 0:
        raise ValueError("start site not in the subregion")
    a = real.epsilon * real.alpha_at(sub.coords)
    if bc == NEUMANN:
        a = a - a.mean()
    nb = neighbor_table(sub)
    d2 = nb.shape[1]
    if bc == DIRICHLET:
        rate = np.full(len(sub), float(d2))
    else:
        rate = (nb >= 0).sum(axis=1).astype(np.float64)
        # compact neighbour lists so a uniform pick lands inside
        order = np.argsort(nb < 0, axis=1, kind="stable")
        nb = np.take_along_axis(nb, order, axis=1)
    total = rate + lam
    rng = np.random.Generator(np.random.Philox(int(seed)))
    if batch is None:
        batch = walks
    sums = np.empty(walks)
    done = 0
    while done < walks:
        m = min(batch, walks - done)
        pos = np.full(m, start, dtype=np.int64)
        acc = np.zeros(m)
        alive = np.arange(m)
        while alive.size:
            p = pos[alive]
            if holding == "mean":
                acc[alive] += a[p] / total[p]
            else:
                acc[alive] += a[p] * rng.exponential(1.0 / total[p])
            u = rng.random(alive.size)
            killed = u * total[p] < lam
            if bc == DIRICHLET:
                pick = rng.integers(0, d2, alive.size)
            else:
                pick = np.floor(rng.random(alive.size) * rate[p]).astype(np.int64)
            nxt = nb[p, pick]
            stop = killed | (nxt < 0)
            pos[alive] = np.where(stop, p, nxt)
            alive = alive[~stop]
        sums[done:done + m] = acc
        done += m
    est = float(sums.mean())
    se = float(sums.std(ddof=1) / np.sqrt(walks)) if walks > 1 else float("inf")
    return est, se


def local_potential(g, within=None, extend=None):
    """``m_x = sum_{y ~ x} (g_y - g_x)^2`` for ``x`` in ``within``.

    ``g`` is read as zero outside its region when ``extend='zero'`` (the
    default for Dirichlet fields); with ``extend='none'`` edges leaving the
    field's region are skipped (default for Neumann fields).
    """
    within = g.region if within is None else within
    if extend is None:
        extend = "none" if getattr(g, "bc", DIRICHLET) == NEUMANN else "zero"
    c = within.coords
    gx = g.at(c)
    m = np.zeros(len(within))
    for o in neighbor_offsets(within.d, "graph"):
        y = c + o
        idx = g.region.index_of(y)
        gy = np.where(idx >= 0, g.values[np.maximum(idx, 0)], 0.0)
        diff2 = (gy - gx) ** 2
        if extend == "none":
            diff2 = np.where(idx >= 0, diff2, 0.0)
        m += diff2
    return PotentialField(within, m)


def gradient_energy(g, region=None, include_crossing=True):
    """``sum_{e cap R != 0} (grad_e g)^2`` with ``g`` zero outside its region."""
    R = g.region if region is None else region
    i, j = internal_edges(R)
    v = g.at(R.coords)
    tot = float(np.sum((v[i] - v[j]) ** 2))
    if include_crossing:
        nb = neighbor_table(R)
        offs = neighbor_offsets(R.d, "graph")
        rows, cols = np.nonzero(nb < 0)
        y = R.coords[rows] + offs[cols]
        tot += float(np.sum((v[rows] - g.at(y)) ** 2))
    return tot


@dataclass(frozen=True)
class SpectralConstants:
    l: int
    lam: float
    d: int
    sigma2_sq: float
    sigma_grad_sq: float


def _cube_integral(f, lo, hi, d, rtol):
    opts = {"epsrel": rtol, "epsabs": 0.0, "limit": 200}
    if d == 1:
        return integrate.quad(f, lo, hi, **opts)[0]
    return integrate.nquad(lambda *k: f(*k), [(lo, hi)] * d, opts=opts)[0]


def spectral_sigmas(l, lam, d, rtol=1e-6):
    """The two momentum-space integrals over ``[1/l, 2 pi]^d``.

    ``sigma2^2 = int (|k|^2 + lam)^-2``, ``sigma_grad^2 = int |k|^2 (|k|^2 + lam)^-2``.
    For d >= 2 the integrand depends on ``|k|^2`` only, so one coordinate is
    integrated in closed form and the remaining (d-1)-fold integral is done
    by adaptive quadrature.
    """
    if l < 2:
        raise ValueError("side must be at least 2")
    lo, hi = 1.0 / l, 2.0 * np.pi

    def inner_2(s):
        # int_lo^hi dk (k^2 + c)^-2 with c = s + lam > 0
        c = s + lam
        rc = np.sqrt(c)
        F = lambda k: k / (2 * c * (k * k + c)) + np.arctan(k / rc) / (2 * c * rc)
        return F(hi) - F(lo)

    def inner_1(s):
        # int_lo^hi dk (k^2 + c)^-1
        c = s + lam
        rc = np.sqrt(c)
        return (np.arctan(hi / rc) - np.arctan(lo / rc)) / rc

    if d == 1:
        s2 = _cube_integral(lambda k: (k * k + lam) ** -2, lo, hi, 1, rtol)
        sg = _cube_integral(lambda k: k * k / (k * k + lam) ** 2, lo, hi, 1, rtol)
    else:
        def f2(*k):
            s = sum(v * v for v in k)
            return inner_2(s)

        def fg(*k):
            # |k|^2/(|k|^2+lam)^2 = 1/(|k|^2+lam) - lam/(|k|^2+lam)^2
            s = sum(v * v for v in k)
            return inner_1(s) - lam * inner_2(s)

        s2 = _cube_integral(f2, lo, hi, d - 1, rtol)
        sg = _cube_integral(fg, lo, hi, d - 1, rtol)
    return SpectralConstants(int(l), float(lam), int(d), float(s2), float(sg))


def harmonic_split(g_outer, sub, real=None, tol=1e-12):
    """Split a Dirichlet field on a box into the sub-box field plus a harmonic part.

    ``g_outer`` solves the Dirichlet problem on ``Q_l``; ``g_sub`` solves the
    same problem on ``sub`` with the same source and mass; ``h = g_outer -
    g_sub`` on ``sub`` satisfies ``(-Delta + lam) h = 0`` inside ``sub``
    with boundary values ``g_outer`` on the outer boundary of ``sub``.

    Returns ``(g_sub, h, report)``; the report holds the cross term
    ``sum_{e cap sub} grad g_sub . grad h`` (zero at lam = 0), the energy
    balance and the harmonic residual.
    """
    if getattr(g_outer, "bc", DIRICHLET) != DIRICHLET:
        raise ValueError("harmonic splitting needs Dirichlet fields")
    subr = sub.region() if isinstance(sub, LatticeBox) else sub
    if not subr.issubset(g_outer.region):
        raise ValueError("sub-box is not inside the outer region")
    lam = g_outer.lam
    if real is not None:
        g_sub = solve_green(real, subr, lam, DIRICHLET, tol=tol)
    else:
        raise ValueError("disorder realization required")
    h_vals = g_outer.at(subr.coords) - g_sub.values
    # h extended to the outer boundary of sub by g_outer (g_sub is 0 there)
    ob = boundary(subr, "outer")
    ext_reg = subr | ob
    h_ext = ScalarField(ext_reg, np.zeros(len(ext_reg)))
    h_ext.values[ext_reg.index_of(subr.coords)] = h_vals
    h_ext.values[ext_reg.index_of(ob.coords)] = g_outer.at(ob.coords)
    A = laplacian(subr, DIRICHLET, lam)
    bvals = np.zeros(len(subr))
    nb = neighbor_table(subr)
    offs = neighbor_offsets(subr.d, "graph")
    rows, cols = np.nonzero(nb < 0)
    np.add.at(bvals, rows, h_ext.at(subr.coords[rows] + offs[cols]))
    harm_res = float(np.abs(A @ h_vals - bvals).max())
    # edge sums over edges meeting sub; g_sub is zero off sub
    gs = ScalarField(subr, g_sub.values)
    i, j = internal_edges(subr)
    dg = gs.values[i] - gs.values[j]
    dh = h_vals[i] - h_vals[j]
    yc = subr.coords[rows] + offs[cols]
    dgc = gs.values[rows]
    dhc = h_vals[rows] - h_ext.at(yc)
    cross = float(dg @ dh + dgc @ dhc)
    go = g_outer.at(subr.coords)
    e_outer = float(np.sum((go[i] - go[j]) ** 2)
                    + np.sum((go[rows] - g_outer.at(yc)) ** 2))
    e_sub = float(dg @ dg + dgc @ dgc)
    e_h = float(dh @ dh + dhc @ dhc)
    lam_term = float(lam * g_sub.values @ h_vals)
    report = {
        "cross": cross,
        "lambda_cross": lam_term,
        "energy_outer": e_outer,
        "energy_sub": e_sub,
        "energy_h": e_h,
        # cross + lam <g_sub, h> vanishes by summation by parts
        "orthogonality": cross + lam_term,
        "additivity_error": e_outer - e_sub - e_h + 2 * lam_term,
        "harmonic_residual": harm_res,
    }
    return g_sub, ScalarField(subr, h_vals), report


def locality_gap(real, regionR, boxQ, lam, x, tol=1e-12):
    """``|g_{Q,x} - g_{R,x}|`` (Dirichlet, mass ``lam``) and the distance of
    ``x`` to the outer boundary of the symmetric difference ``Q ^ R``."""
    Q = boxQ.region() if isinstance(boxQ, LatticeBox) else boxQ
    x = np.asarray(x, dtype=np.int64).reshape(1, -1)
    if not (Q.contains_coords(x)[0] and regionR.contains_coords(x)[0]):
        raise ValueError("site must lie in both regions")
    gQ = solve_green(real, Q, lam, DIRICHLET, tol=tol)
    gR = solve_green(real, regionR, lam, DIRICHLET, tol=tol)
    gap = abs(float(gQ.at(x)[0] - gR.at(x)[0]))
    diff = Q ^ regionR
    if len(diff) == 0:
        dist = float("inf")
    else:
        ob = boundary(diff, "outer") | diff
        dist = float(np.abs(ob.coords - x).max(axis=1).min())
    return gap, dist
