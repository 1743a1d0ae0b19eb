"""Statistical checks on the disorder ensemble.

``randbasic_suite`` samples Green fields of iid Gaussian sources on a box
through the exact eigenbasis and compares tail frequencies, norms and
gradient energies with their closed-form spectral values.
``dirty_density`` estimates the fraction of L-blocks covered by hulls of
small dirty regions.
"""

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import fft, stats

from .classification import DisorderClassifier, _window_sum_axes
from .fields import DIRICHLET, _bc, sample_alpha

__all__ = [
    "TailReport",
    "wilson_interval",
    "bootstrap_median_diff",
    "spectrum",
    "randbasic_suite",
    "DirtyReport",
    "dirty_density",
    "block_animals",
]


def wilson_interval(k, n, z=1.96):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1 + z * z / n
    c = (p + z * z / (2 * n)) / den
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # the endpoints are exact at k = 0 and k = n; avoid roundoff there
    lo = 0.0 if k == 0 else max(0.0, c - h)
    hi = 1.0 if k == n else min(1.0, c + h)
    return (lo, hi)


def bootstrap_median_diff(a, b, reps=10000, seed=0, level=0.95):
    """Percentile bootstrap interval for ``median(b) - median(a)``."""
    rng = np.random.default_rng(seed)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ia = rng.integers(0, len(a), (reps, len(a)))
    ib = rng.integers(0, len(b), (reps, len(b)))
    diffs = np.median(b[ib], axis=1) - np.median(a[ia], axis=1)
    lo, hi = np.quantile(diffs, [(1 - level) / 2, (1 + level) / 2])
    return float(np.median(b) - np.median(a)), (float(lo), float(hi))


def spectrum(l, d, bc=DIRICHLET, lam=0.0):
    """Laplacian eigenvalues (without mass) on the box, as a d-dim grid."""
    bc = _bc(bc)
    if bc == DIRICHLET:
        k = np.pi * np.arange(1, l + 1) / (l + 1)
    else:
        k = np.pi * np.arange(l) / l
    mu1 = 2 - 2 * np.cos(k)
    mu = np.zeros((l,) * d)
    for ax in range(d):
        sh = [1] * d
        sh[ax] = l
        mu = mu + mu1.reshape(sh)
    return mu


def _modes_1d(l, bc):
    """Orthonormal 1-D eigenvectors as columns (matches the transforms used)."""
    eye = np.eye(l)
    if bc == DIRICHLET:
        return fft.idst(eye, type=1, norm="ortho", axis=0)
    return fft.idct(eye, type=2, norm="ortho", axis=0)


@dataclass
class TailReport:
    l: int
    d: int
    lam: float
    bc: str
    samples: int
    center_variance: float
    center_variance_exact: float
    tails: dict
    tail_fit: dict
    norm2: dict
    grad2: dict
    grad2_lower: dict
    avg_potential: dict
    checks: dict = field(default_factory=dict)

    def to_dict(self):
        out = dict(self.__dict__)
        out["tails"] = {str(k): v for k, v in self.tails.items()}
        return out


def randbasic_suite(l=16, lam=0.0, d=3, bc=DIRICHLET, samples=2000, seed=0,
                    M_grid=(1.0, 1.5, 2.0, 2.5, 3.0), radii=(1, 2, 4), A=0.05,
                    chunk=256, lower_fraction=0.5):
    """Empirical versions of the Gaussian Green-field estimates on ``Q_l``.

    Sources are iid standard Gaussians; since the eigenbasis is orthonormal
    their mode coefficients are iid as well, so each sample is drawn in
    mode space and transformed back.  ``lower_fraction`` is the constant in
    the lower-deviation check of the gradient energy.
    """
    bc = _bc(bc)
    if samples < 1000:
        raise ValueError("the suite needs at least 1000 samples")
    mu = spectrum(l, d, bc)
    mass = mu + lam
    zero = mass <= 0
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, mass))
    axes = tuple(range(1, d + 1))
    center = (l // 2,) * d
    # exact centre variance: sum_k phi_k(x)^2 / mass_k^2
    V = _modes_1d(l, bc)
    w = np.ones((l,) * d)
    for ax in range(d):
        sh = [1] * d
        sh[ax] = l
        w = w * (V[center[ax]] ** 2).reshape(sh)
    var_exact = float(np.sum(w * inv**2))
    norm2_exact = float(np.sum(inv**2))
    grad2_exact = float(np.sum(mu * inv**2))
    rng = np.random.Generator(np.random.Philox(key=[seed % 2**64, 0x5242]))
    center_vals = []
    n2 = []
    g2 = []
    avg_fail = {r: 0 for r in radii}
    done = 0
    inv_t = 1 if bc == DIRICHLET else 2
    while done < samples:
        b = min(chunk, samples - done)
        z = rng.standard_normal((b,) + (l,) * d)
        G = z * inv
        if bc == DIRICHLET:
            G = fft.idstn(G, type=1, axes=axes, norm="ortho")
        else:
            G = fft.idctn(G, type=inv_t, axes=axes, norm="ortho")
        center_vals.append(G[(slice(None),) + center])
        n2.append((G * G).reshape(b, -1).sum(axis=1))
        # gradient energy in real space: the padded frame adds the crossing edges
        E = np.pad(G, [(0, 0)] + [(1, 1)] * d) if bc == DIRICHLET else G
        g2.append(sum((np.diff(E, axis=ax) ** 2).reshape(b, -1).sum(axis=1) for ax in axes))
        if bc == DIRICHLET:
            P = np.pad(G, [(0, 0)] + [(1, 1)] * d)
            m = np.zeros_like(P)
            for ax in axes:
                a2 = np.diff(P, axis=ax) ** 2
                lo = [(0, 0)] * (d + 1)
                hi = [(0, 0)] * (d + 1)
                lo[ax] = (1, 0)
                hi[ax] = (0, 1)
                m += np.pad(a2, lo) + np.pad(a2, hi)
            idx = np.arange(l)
            dist1 = np.minimum(idx + 1, l - idx)
            dg = np.full((l,) * d, np.inf)
            for ax in range(d):
                sh = [1] * d
                sh[ax] = l
                dg = np.minimum(dg, dist1.reshape(sh))
            elig = dg >= l / 16
            for r in radii:
                ws = _window_sum_axes(m, r, axes) / float(r) ** d
                inner = ws[(slice(None),) + tuple(slice(1, l + 1) for _ in range(d))]
                avg_fail[r] += int(np.sum(inner[:, elig].min(axis=1) < A))
        done += b
    cv = np.concatenate(center_vals)
    n2 = np.concatenate(n2)
    g2 = np.concatenate(g2)
    sig2 = math.sqrt(var_exact)
    tails = {}
    for M in M_grid:
        k = int(np.sum(np.abs(cv) >= M * sig2))
        tails[M] = {"p": k / samples, "ci": wilson_interval(k, samples), "count": k}
    Ms = np.array([M for M in M_grid if tails[M]["count"] > 0], dtype=float)
    fit = {"slope": float("nan"), "r2": float("nan")}
    if len(Ms) >= 3:
        y = np.log([tails[M]["p"] for M in Ms])
        lr = stats.linregress(Ms**2, y)
        fit = {"slope": float(lr.slope), "r2": float(lr.rvalue**2), "points": len(Ms)}
    mean_g2 = float(g2.mean())
    se_g2 = float(g2.std(ddof=1) / math.sqrt(samples))
    checks = {
        "center_variance_ratio": float(cv.var(ddof=1) / var_exact),
        "tail_monotone": all(tails[a]["p"] >= tails[b]["p"] for a, b in zip(M_grid, M_grid[1:])),
        "tail_slope_negative": fit["slope"] < 0,
        "grad2_trace_z": (mean_g2 - grad2_exact) / se_g2 if se_g2 > 0 else 0.0,
    }
    lower = float(np.mean(g2 <= lower_fraction * grad2_exact))
    return TailReport(
        l=l, d=d, lam=lam, bc=bc, samples=samples,
        center_variance=float(cv.var(ddof=1)), center_variance_exact=var_exact,
        tails=tails, tail_fit=fit,
        norm2={"mean": float(n2.mean()), "exact": norm2_exact,
               "ratio": float(n2.mean() / norm2_exact)},
        grad2={"mean": mean_g2, "se": se_g2, "exact": grad2_exact},
        grad2_lower={"fraction": lower_fraction, "frequency": lower,
                     "ci": wilson_interval(int(np.sum(g2 <= lower_fraction * grad2_exact)), samples)},
        avg_potential={str(r): {"failures": avg_fail[r], "frequency": avg_fail[r] / samples}
                       for r in radii} if bc == DIRICHLET else {},
        checks=checks,
    )


# ----------------------------------------------------------------------------
# dirty set density


def block_animals(d, K):
    """Closed-connected sets of at most K unit blocks containing the origin
    as their least element (lexicographic), as tuples of offsets."""
    nbr = [o for o in product((-1, 0, 1), repeat=d) if any(o)]
    found = {(tuple([0] * d),)}
    frontier = set(found)
    for _ in range(K - 1):
        new = set()
        for an in frontier:
            s = set(an)
            for b in an:
                for o in nbr:
                    c = tuple(x + y for x, y in zip(b, o))
                    if c in s:
                        continue
                    t = tuple(sorted(s | {c}))
                    mn = t[0]
                    t = tuple(tuple(x - y for x, y in zip(p, mn)) for p in t)
                    new.add(t)
        found |= new
        frontier = new
    return sorted(found, key=lambda a: (len(a), a))


@dataclass
class DirtyReport:
    epsilon: float
    density: float
    densities: list
    correlation: dict
    K: int
    blocks: int


def _block_contributions(clf, Lcorners, s, L):
    """Per-L-block regularity pairing sums and s-block counts at scale s."""
    p = clf.params
    d = Lcorners.shape[1]
    sub = np.array(list(product(range(0, L, s), repeat=d)), dtype=np.int64)
    allc = (Lcorners[:, None, :] + sub[None]).reshape(-1, d)
    bf = clf.block_functions(s, allc)
    nb = len(sub)
    out = {}
    for j, lam in enumerate(bf["lams"]):
        Fg = bf["Fgrad"][:, j]
        out[f"rr1_{j}"] = (Fg * (Fg >= p.threshold("rr1_cut", s))).reshape(-1, nb).sum(axis=1)
        F = bf["F"][:, j]
        out[f"rr2_{j}"] = (F * (F >= p.threshold("rr2_cut", s, lam))).reshape(-1, nb).sum(axis=1)
    R = bf["R"]
    out["rr4"] = (R**2 * (R > p.threshold("rr4_cut", s))).reshape(-1, nb).sum(axis=1)
    out["rr5"] = bf["S"].reshape(-1, nb).sum(axis=1)
    limits = {f"rr1_{j}": p.threshold("rr1", s) for j in range(len(bf["lams"]))}
    limits.update({f"rr2_{j}": p.threshold("rr2", s) for j in range(len(bf["lams"]))})
    limits["rr4"] = p.threshold("rr4", s)
    limits["rr5"] = p.threshold("rr5", s, d=d)
    return out, limits, nb


def dirty_density(epsilon, window, params, samples=4, seed=0, K=3, scales=None,
                  classifier_factory=None):
    """Fraction of L-blocks of ``window`` lying in the hull of a dirty region.

    Candidate regions are closed-connected unions of at most ``K`` L-blocks
    whose L-thickening fits in the window (a truncation: the estimate is a
    lower bound on the full dirty set).  A region is dirty unless it is good
    and its thickening is regular at each scale in ``scales`` (default
    ``{l/2, l, L}``).
    """
    L = params.L
    d = window.d
    lo, hi = window.bbox()
    nbk = (hi - lo + 1) // L
    grid = [np.arange(n) for n in nbk]
    bidx = np.array(list(product(*grid)), dtype=np.int64)
    if scales is None:
        scales = sorted({max(1, params.ell // 2), params.ell, L})
    animals = block_animals(d, K)
    nbr3 = np.array(list(product((-1, 0, 1), repeat=d)), dtype=np.int64)
    dens = []
    masks = []
    for k in range(samples):
        real = sample_alpha(window, seed + k, epsilon)
        clf = (classifier_factory or DisorderClassifier)(real, params)
        # the thickening of Y reaches one block beyond it: pad the block grid
        pad_idx = np.array(list(product(*[np.arange(-1, n + 1) for n in nbk])), dtype=np.int64)
        pad_corners = lo + pad_idx * L
        good = clf.good(L, pad_corners)
        contrib = {}
        for s in scales:
            c, lim, nb = _block_contributions(clf, pad_corners, s, L)
            contrib[s] = (c, lim, nb)
        pos = {tuple(v): i for i, v in enumerate(pad_idx.tolist())}
        dirty = np.zeros(tuple(nbk), dtype=bool)
        dthr = params.threshold("dense")
        for b in bidx:
            for an in animals:
                Y = [tuple(b + np.array(o)) for o in an]
                if any(not all(0 <= y[a] < nbk[a] for a in range(d)) for y in Y):
                    continue
                nY = len(Y)
                bad = sum(1 for y in Y if not good[pos[y]])
                ok = bad <= dthr * nY
                if ok:
                    dY = {tuple(np.array(y) + o) for y in Y for o in nbr3}
                    ids = [pos[y] for y in dY]
                    for s, (c, lim, nb) in contrib.items():
                        N = nb * len(ids)
                        for key, arr in c.items():
                            if arr[ids].sum() > lim[key] * N:
                                ok = False
                                break
                        if not ok:
                            break
                if not ok:
                    for y in Y:
                        for o in nbr3:
                            z = np.array(y) + o
                            if np.all((z >= 0) & (z < nbk)):
                                dirty[tuple(z)] = True
        dens.append(float(dirty.mean()))
        masks.append(dirty)
    corr = _indicator_correlation(masks)
    return DirtyReport(epsilon, float(np.median(dens)), dens, corr, K, int(np.prod(nbk)))


def _indicator_correlation(masks, max_dist=3):
    """Correlation of the dirty indicator between blocks at l-inf distance r."""
    out = {}
    for r in range(1, max_dist + 1):
        xs, ys = [], []
        for m in masks:
            d = m.ndim
            for ax in range(d):
                if m.shape[ax] <= r:
                    continue
                a = np.take(m, np.arange(0, m.shape[ax] - r), axis=ax).ravel()
                b = np.take(m, np.arange(r, m.shape[ax]), axis=ax).ravel()
                xs.append(a)
                ys.append(b)
        if not xs:
            continue
        x = np.concatenate(xs).astype(float)
        y = np.concatenate(ys).astype(float)
        if x.std() == 0 or y.std() == 0:
            out[r] = float("nan")
        else:
            out[r] = float(np.corrcoef(x, y)[0, 1])
    return out
