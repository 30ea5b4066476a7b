"""Monte Carlo for the factor model: path simulation, expected utility, Feynman-Kac checks.

Paths are split into fixed-size blocks. Each block draws from its own Philox
stream keyed by (seed, block index), so results do not depend on how many
worker threads advance the blocks.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteUtility, OutOfDomain
from .model import (CorrelationScheme, WealthState, factor_coefficients,
                    perturbed_correlations)

SIGMA_FLOOR_SUM = 1e-12


def worker_count():
    try:
        n = int(os.environ.get("VOLFACTOR_THREADS", "1"))
    except ValueError:
        n = 1
    return max(n, 1)


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    n_steps: int = 500
    seed: int = 20190101
    scheme: CorrelationScheme | None = None
    antithetic: bool = True
    block_size: int = 8192

    def __post_init__(self):
        if self.n_paths < 2 or self.n_steps < 1:
            raise ValueError("need n_paths >= 2 and n_steps >= 1")
        if self.antithetic and (self.n_paths % 2 or self.block_size % 2):
            raise ValueError("antithetic sampling needs even n_paths and block_size")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class McEstimate:
    mean: float
    std_error: float
    n_effective: int

    def to_json(self, config: SimConfig, escaped_paths=0):
        return {"estimate": self.mean, "std_error": self.std_error, "n_paths": config.n_paths,
                "n_steps": config.n_steps, "seed": config.seed, "escaped_paths": int(escaped_paths)}


def correlation_factor(rho1, rho2, rho12):
    """Lower-triangular L with L L^T the correlation of (W, B1, B2); rank deficiency allowed."""
    L = np.zeros((3, 3))
    L[0, 0] = 1.0
    L[1, 0] = rho1
    L[1, 1] = np.sqrt(1 - rho1**2)
    if rho1 == rho2 and rho12 == 1.0:
        L[2] = L[1]
        return L
    L[2, 0] = rho2
    L[2, 1] = (rho12 - rho1 * rho2) / L[1, 1]
    L[2, 2] = np.sqrt(max(1 - rho2**2 - L[2, 1] ** 2, 0.0))
    return L


class _Blocks:
    def __init__(self, config: SimConfig, dim):
        self.config = config
        self.dim = dim
        n, bs = config.n_paths, config.block_size
        starts = list(range(0, n, bs))
        self.slices = [slice(s, min(s + bs, n)) for s in starts]
        self.gens = [np.random.Generator(np.random.Philox(key=[config.seed, b]))
                     for b in range(len(starts))]
        self.threads = worker_count()
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def normals(self, b):
        size = self.slices[b].stop - self.slices[b].start
        g = self.gens[b]
        if self.config.antithetic:
            half = g.standard_normal((self.dim, size // 2))
            return np.concatenate([half, -half], axis=1)
        return g.standard_normal((self.dim, size))

    def run(self, fn):
        if self._pool is None:
            for b in range(len(self.slices)):
                fn(b)
        else:
            list(self._pool.map(fn, range(len(self.slices))))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _estimate(samples, config: SimConfig):
    """Mean and standard error; antithetic pairs are averaged first, block by block."""
    if config.antithetic:
        parts = []
        for s in range(0, config.n_paths, config.block_size):
            blk = samples[s:s + config.block_size]
            h = blk.size // 2
            parts.append(0.5 * (blk[:h] + blk[h:]))
        y = np.concatenate(parts)
    else:
        y = samples
    n = y.size
    mean = float(np.mean(y))
    se = float(np.std(y, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return McEstimate(mean, se, n)


def _factor_step(model, z1, z2, dt, sq, xi1, xi2):
    """Full-truncation Euler: coefficients use the positive part."""
    z1p = np.maximum(z1, 0.0)
    z2p = np.maximum(z2, 0.0)
    a1, a2, b1, b2 = factor_coefficients(model, z1p, z2p)
    return z1 + a1 * dt + b1 * sq * xi1, z2 + a2 * dt + b2 * sq * xi2


@dataclass
class FactorPaths:
    times: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    dW: np.ndarray


def simulate_factor_paths(model, scheme: CorrelationScheme, config: SimConfig, z0=(10.0, 10.0), t0=0.0):
    """Store full factor paths and wealth-noise increments (meant for moderate sizes)."""
    r1, r2, r12 = perturbed_correlations(scheme)
    L = correlation_factor(r1, r2, r12)
    n, ns = config.n_paths, config.n_steps
    dt = (model.T - t0) / ns
    sq = np.sqrt(dt)
    Z1 = np.empty((n, ns + 1))
    Z2 = np.empty((n, ns + 1))
    dW = np.empty((n, ns))
    Z1[:, 0], Z2[:, 0] = z0
    blocks = _Blocks(config, 3)

    def advance(b, k):
        sl = blocks.slices[b]
        xi = L @ blocks.normals(b)
        dW[sl, k] = sq * xi[0]
        Z1[sl, k + 1], Z2[sl, k + 1] = _factor_step(model, Z1[sl, k], Z2[sl, k], dt, sq, xi[1], xi[2])

    try:
        for k in range(ns):
            blocks.run(lambda b: advance(b, k))
    finally:
        blocks.close()
    return FactorPaths(t0 + dt * np.arange(ns + 1), Z1, Z2, dW)


@dataclass
class UtilityRun:
    estimate: McEstimate
    escaped_paths: int = 0
    max_dollar_variance: float = 0.0


def _simulate_wealth(model, exposure_fn, config: SimConfig, initial: WealthState, p, box=None,
                     prepare=None):
    """Log-wealth under the feedback exposure e = sigma * pi / x = exposure_fn(t, x, z1, z2).

    d log X = (e lambda - e^2 / 2) dt + e dW, so X stays positive by construction.
    Factors are advanced with full truncation; exposures see their positive parts.
    prepare(t) runs on the calling thread before each step.
    """
    scheme = config.scheme or CorrelationScheme(0.0)
    L = correlation_factor(*perturbed_correlations(scheme))
    n, ns = config.n_paths, config.n_steps
    logx = np.full(n, np.log(initial.x))
    if initial.t >= model.T:
        u = np.exp(p * logx) / p
        return UtilityRun(McEstimate(float(u[0]), 0.0, n))
    dt = (model.T - initial.t) / ns
    sq = np.sqrt(dt)
    z1 = np.full(n, float(initial.z1))
    z2 = np.full(n, float(initial.z2))
    escaped = np.zeros(n, dtype=bool)
    dollar_var = np.zeros(n)
    blocks = _Blocks(config, 3)

    def advance(b, k):
        sl = blocks.slices[b]
        xi = L @ blocks.normals(b)
        a, c = z1[sl], z2[sl]
        if box is not None:
            escaped[sl] |= (a > box) | (c > box)
        ap, cp = np.maximum(a, 0.0), np.maximum(c, 0.0)
        e = np.asarray(exposure_fn(initial.t + k * dt, np.exp(logx[sl]), ap, cp), dtype=float)
        lam = model.lam(ap, cp)
        logx[sl] += (e * lam - 0.5 * e * e) * dt + e * sq * xi[0]
        dollar_var[sl] += e * e * dt
        z1[sl], z2[sl] = _factor_step(model, a, c, dt, sq, xi[1], xi[2])

    try:
        for k in range(ns):
            if prepare is not None:
                prepare(initial.t + k * dt)
            blocks.run(lambda b: advance(b, k))
    finally:
        blocks.close()
    if not np.all(np.isfinite(logx)):
        raise NonFiniteUtility(f"{int(np.sum(~np.isfinite(logx)))} paths with non-finite log-wealth")
    u = np.exp(p * logx) / p
    return UtilityRun(_estimate(u, config), int(escaped.sum()), float(np.max(dollar_var)))


def estimate_expected_utility(model, strategy, config: SimConfig, initial: WealthState, p):
    """E[X_T^p / p] for the amount-invested feedback strategy(t, x, z1, z2)."""

    def exposure(t, x, z1, z2):
        s = np.maximum(z1 + z2, SIGMA_FLOOR_SUM)
        pi = np.asarray(strategy(t, x, z1, z2), dtype=float)
        return pi / x * model.sigma(z1, s - z1)

    return _simulate_wealth(model, exposure, config, initial, p).estimate


def feynman_kac_psi0(model, consts, rho, t, z1, z2, config: SimConfig):
    """E~[exp((Gamma/2q) int_t^T lambda^2 ds)] with fully correlated factors under the tilted drift."""
    n, ns = config.n_paths, config.n_steps
    if t >= model.T:
        return McEstimate(1.0, 0.0, n)
    dt = (model.T - t) / ns
    sq = np.sqrt(dt)
    c = consts.gamma / (2 * consts.q)
    Z1 = np.full(n, float(z1))
    Z2 = np.full(n, float(z2))
    integral = np.zeros(n)
    blocks = _Blocks(config, 1)

    def lam2(a, b):
        return model.lam(a, b) ** 2

    def advance(b, k):
        sl = blocks.slices[b]
        xi = blocks.normals(b)[0]
        a, d = np.maximum(Z1[sl], 0.0), np.maximum(Z2[sl], 0.0)
        l_now = lam2(a, d)
        a1, a2, b1, b2 = factor_coefficients(model, a, d)
        lam = np.sqrt(l_now)
        na = Z1[sl] + (a1 + consts.gamma * rho * lam * b1) * dt + b1 * sq * xi
        nd = Z2[sl] + (a2 + consts.gamma * rho * lam * b2) * dt + b2 * sq * xi
        integral[sl] += 0.5 * dt * (l_now + lam2(np.maximum(na, 0.0), np.maximum(nd, 0.0)))
        Z1[sl], Z2[sl] = na, nd

    try:
        for k in range(ns):
            blocks.run(lambda b: advance(b, k))
    finally:
        blocks.close()
    return _estimate(np.exp(c * integral), config)


@dataclass
class GapResult:
    gap: float
    std_error: float
    v_pde: float
    utility: McEstimate
    escaped_paths: int

    def to_json(self, config: SimConfig):
        out = self.utility.to_json(config, self.escaped_paths)
        out.update(gap=self.gap, gap_std_error=self.std_error, v_pde=self.v_pde)
        return out


def near_optimality_gap(model, scheme, consts, psi_full, psi0_surface, config: SimConfig,
                        initial: WealthState, max_escape_fraction=1e-3):
    """Value from the nonlinear solve minus the simulated utility of the zeroth-order strategy."""
    if config.scheme != scheme:
        config = SimConfig(config.n_paths, config.n_steps, config.seed, scheme,
                           config.antithetic, config.block_size)
    p, q = consts.p, consts.q
    box = psi0_surface.grid.z_box
    v_pde = initial.x**p / p * float(psi_full.interpolate(initial.t, initial.z1, initial.z2)) ** q
    g = psi0_surface.grid

    def prepare(t):
        # derivative fields are built here, not inside worker threads
        k = min(int(np.floor(min(max(t / g.dt, 0.0), float(g.n_t)))), g.n_t - 1)
        psi0_surface.jet(k)
        psi0_surface.jet(k + 1)

    def exposure(t, x, z1, z2):
        psi, d1, d2 = psi0_surface.gradient_at(t, z1, z2, clamp=True)
        _, _, b1, b2 = factor_coefficients(model, z1, z2)
        return (model.lam(z1, z2) + scheme.rho * q * (b1 * d1 + b2 * d2) / psi) / (1 - p)

    run = _simulate_wealth(model, exposure, config, initial, p, box=box, prepare=prepare)
    if run.escaped_paths > max_escape_fraction * config.n_paths:
        raise OutOfDomain(f"{run.escaped_paths} of {config.n_paths} paths left the grid box")
    est = run.estimate
    return GapResult(v_pde - est.mean, est.std_error, v_pde, est, run.escaped_paths)
