"""Metropolis sampling of the quenched Gibbs measure ``exp(-beta H)``.

Sites are updated by parity class (the lattice is bipartite, so sites of
one parity are conditionally independent given the other), each with a
uniform proposal ``theta + U(-w, w)``.  The width adapts towards 50%
acceptance during burn-in and is frozen afterwards.  Every chain owns a
Philox generator keyed by its seed, so results do not depend on the
number of worker threads.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Region, block_corners, neighbor_table

__all__ = ["SamplerConfig", "ChainResult", "metropolis_run", "run_chains", "worker_count"]


@dataclass
class SamplerConfig:
    """Lattice, boundary condition ("free" or "e1"), temperature and schedule."""

    region: Region
    beta: float
    epsilon: float
    seed: int = 0
    sweeps: int = 1000
    burn_in: int = 200
    thinning: int = 1
    bc: str = "free"
    width: float = 1.0
    target_accept: float = 0.5
    block: int = None  # side of the blocks for block magnetisations
    init: str = "random"  # random | e1 | ordered (aligned at a uniform random angle)
    record_angles: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.sweeps < 1:
            raise ValueError("sweeps must be at least 1")
        if self.bc not in ("free", "e1"):
            raise ValueError("bc must be 'free' or 'e1'")
        if self.init not in ("random", "e1", "ordered"):
            raise ValueError("init must be 'random', 'e1' or 'ordered'")


@dataclass
class ChainResult:
    """Per-sample observables of one chain."""

    seed: int
    width: float
    accept: float
    m_cos: np.ndarray
    m_sin: np.ndarray
    energy: np.ndarray
    block_m: np.ndarray  # (samples, blocks, 2)
    angles: np.ndarray = None
    final: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def abs_m_e1(self):
        return np.abs(self.m_cos)

    def rows(self):
        for k in range(len(self.energy)):
            yield (self.seed, k, repr(float(self.m_cos[k])), repr(float(self.m_sin[k])),
                   repr(float(self.energy[k])))


def worker_count(default=None):
    """Number of worker threads: ``RFO_THREADS`` if set, else ``default`` or the CPU count."""
    env = os.environ.get("RFO_THREADS")
    if env:
        return max(1, int(env))
    return default or (os.cpu_count() or 1)


def _parity_classes(region):
    par = region.coords.sum(axis=1) % 2
    return [np.flatnonzero(par == p) for p in (0, 1)]


def _energy(theta, nb, field, bc_count):
    """``H`` for the sampler's representation (each edge once)."""
    d2 = nb.shape[1] // 2
    e = 0.0
    for k in range(d2):
        ok = nb[:, k] >= 0
        e += np.sum(1 - np.cos(theta[ok] - theta[nb[ok, k]]))
    e += np.sum(bc_count * (1 - np.cos(theta)))
    return float(e - field @ np.sin(theta))


def metropolis_run(cfg, real=None):
    """Run one chain; ``real`` supplies alpha (ignored when epsilon is 0)."""
    reg = cfg.region
    n = len(reg)
    nb = neighbor_table(reg)
    missing = (nb < 0).sum(axis=1)
    bc_count = missing.astype(np.float64) if cfg.bc == "e1" else np.zeros(n)
    if cfg.epsilon != 0 and real is None:
        raise ValueError("a disorder realization is needed when epsilon > 0")
    field = cfg.epsilon * real.alpha_at(reg.coords) if cfg.epsilon != 0 else np.zeros(n)
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed % 2**64, 0x5346]))
    if cfg.init == "random":
        theta = rng.uniform(-np.pi, np.pi, n)
    elif cfg.init == "ordered":
        theta = np.full(n, rng.uniform(-np.pi, np.pi))
    else:
        theta = np.zeros(n)
    classes = _parity_classes(reg)
    nbm = np.where(nb >= 0, nb, 0)
    has = nb >= 0
    w = float(cfg.width)
    if cfg.block:
        corners = block_corners(reg, cfg.block)
        bidx = np.full(n, -1)
        cidx = np.floor_divide(reg.coords, cfg.block)
        keys = {tuple(c): k for k, c in enumerate(np.floor_divide(corners, cfg.block).tolist())}
        bidx = np.array([keys[tuple(c)] for c in cidx.tolist()])
        counts = np.bincount(bidx, minlength=len(corners)).astype(np.float64)
    total = cfg.burn_in + cfg.sweeps
    mc, ms, en, bm, angs = [], [], [], [], []
    acc_meas = 0
    tried_meas = 0
    acc_win = 0
    tried_win = 0
    for sweep in range(total):
        for cls in classes:
            prop = theta[cls] + rng.uniform(-w, w, len(cls))
            u = rng.random(len(cls))
            tn = theta[nbm[cls]]
            h = has[cls]
            old = theta[cls]
            dH = (np.sum(h * (np.cos(old[:, None] - tn) - np.cos(prop[:, None] - tn)), axis=1)
                  + bc_count[cls] * (np.cos(old) - np.cos(prop))
                  - field[cls] * (np.sin(prop) - np.sin(old)))
            ok = u < np.exp(-cfg.beta * np.maximum(dH, 0.0))
            theta[cls[ok]] = np.mod(prop[ok] + np.pi, 2 * np.pi) - np.pi
            if sweep < cfg.burn_in:
                acc_win += int(ok.sum())
                tried_win += len(cls)
            else:
                acc_meas += int(ok.sum())
                tried_meas += len(cls)
        if sweep < cfg.burn_in and (sweep + 1) % 10 == 0:
            rate = acc_win / max(tried_win, 1)
            w = float(np.clip(w * np.exp(rate - cfg.target_accept), 1e-3, np.pi))
            acc_win = tried_win = 0
        if sweep >= cfg.burn_in and (sweep - cfg.burn_in) % cfg.thinning == 0:
            c, s = np.cos(theta), np.sin(theta)
            mc.append(c.mean())
            ms.append(s.mean())
            en.append(_energy(theta, nb, field, bc_count))
            if cfg.block:
                bm.append(np.stack([np.bincount(bidx, c, len(counts)) / counts,
                                    np.bincount(bidx, s, len(counts)) / counts], axis=1))
            if cfg.record_angles:
                angs.append(theta.copy())
    return ChainResult(
        seed=cfg.seed,
        width=w,
        accept=acc_meas / max(tried_meas, 1),
        m_cos=np.array(mc),
        m_sin=np.array(ms),
        energy=np.array(en),
        block_m=np.array(bm) if bm else np.zeros((len(mc), 0, 2)),
        angles=np.array(angs) if angs else None,
        final=theta.copy(),
    )


def run_chains(cfgs, reals=None, threads=None):
    """Run several chains in a thread pool; results come back in input order."""
    reals = reals if reals is not None else [None] * len(cfgs)
    nw = worker_count(threads)
    if nw == 1 or len(cfgs) == 1:
        return [metropolis_run(c, r) for c, r in zip(cfgs, reals)]
    with ThreadPoolExecutor(max_workers=nw) as ex:
        futs = [ex.submit(metropolis_run, c, r) for c, r in zip(cfgs, reals)]
        return [f.result() for f in futs]
