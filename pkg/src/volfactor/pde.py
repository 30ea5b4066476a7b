"""Finite-difference solvers for the distorted value function.

All solvers march backward from t = T with Crank-Nicolson in time and
centred differences in space. The factor box is padded beyond z_max so the
artificial upper edge does not pollute the reported region.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NewtonDivergence, OutOfDomain, StabilityFailure
from .model import (ChackoViceira, CorrelationScheme, DistortionConstants,
                    factor_coefficients, perturbed_correlations)


@dataclass(frozen=True)
class Grid2D:
    """Uniform (t, z1, z2) grid. n_z nodes per axis span the padded box [0, pad * z_max]."""

    z_max: float = 100.0
    n_z: int = 201
    n_t: int = 400
    T: float = 1.0
    pad: float = 1.25

    def __post_init__(self):
        if self.n_z < 3 or self.n_t < 1:
            raise ValueError("grid needs n_z >= 3 and n_t >= 1")
        if self.pad < 1.0 or self.z_max <= 0 or self.T <= 0:
            raise ValueError("invalid grid extent")

    @property
    def z_box(self):
        return self.pad * self.z_max

    @property
    def dz(self):
        return self.z_box / (self.n_z - 1)

    @property
    def dt(self):
        return self.T / self.n_t

    @property
    def z(self):
        return np.linspace(0.0, self.z_box, self.n_z)

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_t + 1)

    @property
    def inner(self):
        """Mask of nodes inside the reported region z <= z_max."""
        return self.z <= self.z_max * (1 + 1e-12)


# ---------------------------------------------------------------- stencils

def _first_derivative(n, h):
    main = np.zeros(n)
    up = np.full(n - 1, 0.5 / h)
    lo = np.full(n - 1, -0.5 / h)
    m = sp.diags([lo, main, up], [-1, 0, 1], format="lil")
    m[0, 0:3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    m[n - 1, n - 3:] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return m.tocsr()


def _second_derivative(n, h):
    # Edge rows reuse the neighbouring 3-point stencil. The 4-point one-sided
    # version puts a spurious unstable eigenvalue into the 2-D operator.
    m = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
    m[0, 0:3] = np.array([1.0, -2.0, 1.0])
    m[n - 1, n - 3:] = np.array([1.0, -2.0, 1.0])
    return (m / h**2).tocsr()


class Stencils(NamedTuple):
    D1: sp.csr_matrix
    D2: sp.csr_matrix
    D11: sp.csr_matrix
    D22: sp.csr_matrix
    D12: sp.csr_matrix


@lru_cache(maxsize=8)
def stencils_1d(n, h):
    return _first_derivative(n, h), _second_derivative(n, h)


@lru_cache(maxsize=4)
def stencils_2d(n, h):
    d1, d2 = stencils_1d(n, h)
    eye = sp.identity(n, format="csr")
    return Stencils(sp.kron(d1, eye, format="csr"), sp.kron(eye, d1, format="csr"),
                    sp.kron(d2, eye, format="csr"), sp.kron(eye, d2, format="csr"),
                    sp.kron(d1, d1, format="csr"))


class Jet(NamedTuple):
    psi: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d11: np.ndarray
    d22: np.ndarray
    d12: np.ndarray


def jet_of(values, st: Stencils):
    v = np.ravel(values)
    return Jet(v, st.D1 @ v, st.D2 @ v, st.D11 @ v, st.D22 @ v, st.D12 @ v)


class GridCoefficients(NamedTuple):
    z1: np.ndarray
    z2: np.ndarray
    lam: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray


def grid_coefficients(model, grid: Grid2D):
    z1, z2 = np.meshgrid(grid.z, grid.z, indexing="ij")
    z1 = z1.ravel()
    z2 = z2.ravel()
    a1, a2, b1, b2 = factor_coefficients(model, z1, z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.asarray(model.lam(z1, z2), dtype=float) * np.ones_like(z1)
    if not np.all(np.isfinite(lam)):
        raise StabilityFailure("Sharpe ratio is not finite on the grid")
    return GridCoefficients(z1, z2, lam, a1 * np.ones_like(z1), a2 * np.ones_like(z1),
                            b1 * np.ones_like(z1), b2 * np.ones_like(z1))


def assemble_operator(st: Stencils, drift1, drift2, diff11, diff22, cross12, potential):
    """Sparse drift1 D1 + drift2 D2 + diff11 D11 + diff22 D22 + cross12 D12 + potential."""
    dg = sp.diags
    return (dg(drift1) @ st.D1 + dg(drift2) @ st.D2 + dg(diff11) @ st.D11 + dg(diff22) @ st.D22
            + dg(cross12) @ st.D12 + dg(potential)).tocsr()


def linear_operator(coef: GridCoefficients, st: Stencils, consts: DistortionConstants,
                    rho1, rho2, rho12):
    """Drift, diffusion and potential of the distorted equation (everything but the bracket)."""
    g, q = consts.gamma, consts.q
    c = coef
    return assemble_operator(st, c.alpha1 + g * c.lam * rho1 * c.beta1,
                             c.alpha2 + g * c.lam * rho2 * c.beta2,
                             0.5 * c.beta1**2, 0.5 * c.beta2**2, rho12 * c.beta1 * c.beta2,
                             g / (2 * q) * c.lam**2)


def slope_operator(coef: GridCoefficients, st: Stencils, consts, scheme: CorrelationScheme):
    """Derivative in eps of the linear operator."""
    s1, s2, s12 = scheme.slopes
    g = consts.gamma
    c = coef
    dg = sp.diags
    return (dg(g * c.lam * s1 * c.beta1) @ st.D1 + dg(g * c.lam * s2 * c.beta2) @ st.D2
            + dg(s12 * c.beta1 * c.beta2) @ st.D12).tocsr()


def bracket(psi, g1, g2, coef: GridCoefficients, consts, rho1, rho2, rho12):
    """Quadratic gradient term that vanishes identically at the base correlations."""
    g, q = consts.gamma, consts.q
    c1 = (q - 1) + q * rho1**2 * g
    c2 = (q - 1) + q * rho2**2 * g
    c12 = rho12 * (q - 1) + q * rho1 * rho2 * g
    b1, b2 = coef.beta1, coef.beta2
    return (c1 * b1**2 * g1**2 + c2 * b2**2 * g2**2 + 2 * c12 * b1 * b2 * g1 * g2) / (2 * psi)


def f1_source(jet: Jet, coef: GridCoefficients, consts, scheme: CorrelationScheme):
    """Source of the first-order equation, built from the zeroth-order jet."""
    g, q, rho = consts.gamma, consts.q, scheme.rho
    s1, s2, s12 = scheme.slopes
    b1, b2 = coef.beta1, coef.beta2
    P, g1, g2 = jet.psi, jet.d1, jet.d2
    return (q * g * rho / P * (b1 * b2 * g1 * g2 * (s1 - rho * s12 + s2)
                               + s1 * b1**2 * g1**2 + s2 * b2**2 * g2**2)
            + g * coef.lam * (s1 * b1 * g1 + s2 * b2 * g2)
            + s12 * b1 * b2 * jet.d12)


# ---------------------------------------------------------------- surfaces

@dataclass
class SolverDiagnostics:
    wall_time: float = 0.0
    min_value: float = float("nan")
    max_value: float = float("nan")
    m_matrix_violation_fraction: float = 0.0
    artificial_diffusion: float = 0.0
    max_corrector_change: float = 0.0


class PsiSurface:
    """Gridded function of (t, z1, z2) with derivative access and bilinear interpolation."""

    def __init__(self, grid: Grid2D, values, label="psi", diagnostics=None, level_index=None):
        self.grid = grid
        self.values = values
        self.label = label
        self.diagnostics = diagnostics or SolverDiagnostics()
        # time-level index of each stored slice
        self.level_index = (np.arange(grid.n_t + 1) if level_index is None
                            else np.asarray(level_index))
        self._cache = {}

    @property
    def stencils(self):
        return stencils_2d(self.grid.n_z, self.grid.dz)

    @property
    def has_all_levels(self):
        return len(self.level_index) == self.grid.n_t + 1

    def level(self, k):
        pos = np.searchsorted(self.level_index, k)
        if pos >= len(self.level_index) or self.level_index[pos] != k:
            raise KeyError(f"time level {k} not stored")
        return self.values[pos]

    def at_time(self, t):
        g = self.grid
        s = np.clip(t / g.dt, 0, g.n_t)
        k = int(np.floor(s))
        if k >= g.n_t:
            return self.level(g.n_t)
        w = s - k
        if w < 1e-12:
            return self.level(k)
        return (1 - w) * self.level(k) + w * self.level(k + 1)

    def jet(self, k):
        if k not in self._cache:
            if len(self._cache) > 4:
                self._cache.pop(next(iter(self._cache)))
            self._cache[k] = jet_of(self.level(k), self.stencils)
        return self._cache[k]

    def _locate(self, z1, z2, clamp):
        g = self.grid
        z1 = np.asarray(z1, dtype=float)
        z2 = np.asarray(z2, dtype=float)
        tol = 1e-9 * g.z_box
        if not clamp and (np.any(z1 < -tol) or np.any(z2 < -tol)
                          or np.any(z1 > g.z_box + tol) or np.any(z2 > g.z_box + tol)):
            raise OutOfDomain(f"point outside the grid box [0, {g.z_box:g}]^2")
        u = np.clip(z1 / g.dz, 0, g.n_z - 1)
        v = np.clip(z2 / g.dz, 0, g.n_z - 1)
        i = np.minimum(u.astype(int), g.n_z - 2)
        j = np.minimum(v.astype(int), g.n_z - 2)
        return i, j, u - i, v - j

    def _bilinear(self, fields, t, z1, z2, clamp):
        g = self.grid
        i, j, wu, wv = self._locate(z1, z2, clamp)
        s = np.clip(t / g.dt, 0, g.n_t)
        k = min(int(np.floor(s)), g.n_t - 1)
        w = s - k
        n = g.n_z
        out = []
        for name in fields:
            vals = 0.0
            for kk, wt in ((k, 1 - w), (k + 1, w)):
                if wt == 0.0:
                    continue
                f = getattr(self.jet(kk), name).reshape(n, n)
                vals = vals + wt * ((1 - wu) * (1 - wv) * f[i, j] + wu * (1 - wv) * f[i + 1, j]
                                    + (1 - wu) * wv * f[i, j + 1] + wu * wv * f[i + 1, j + 1])
            out.append(vals)
        return out

    def interpolate(self, t, z1, z2, clamp=False):
        return self._bilinear(("psi",), t, z1, z2, clamp)[0]

    def gradient_at(self, t, z1, z2, clamp=False):
        return tuple(self._bilinear(("psi", "d1", "d2"), t, z1, z2, clamp))

    def diagonal(self, k=0, inner=True):
        """(z, values) along z1 = z2 at time level k."""
        g = self.grid
        vals = np.diagonal(self.level(k)).copy()
        z = g.z
        if inner:
            mask = g.inner
            return z[mask], vals[mask]
        return z, vals


# ---------------------------------------------------------------- marching core

def _m_matrix_violations(A):
    off = A.tocsr(copy=True)
    off.setdiag(0.0)
    off.eliminate_zeros()
    if off.nnz == 0:
        return 0.0
    rowmax = off.max(axis=1).toarray().ravel()
    return float(np.mean(rowmax > 0))


def cn_march(grid: Grid2D, L, terminal, *, source: Callable | None = None,
             nonlinear: Callable | None = None, positive=True, upper=None,
             keep_levels=True, label="psi", shape=None):
    """Backward Crank-Nicolson march of P_t + L P + source + nonlinear(P) = 0.

    source(n) gives the forcing for the step from level n+1 down to n.
    nonlinear(P) is lagged and re-corrected once at the midpoint.
    """
    t0 = time.perf_counter()
    N = L.shape[0]
    dt = grid.dt
    eye = sp.identity(N, format="csc")
    lhs = (eye - 0.5 * dt * L).tocsc()
    diag = SolverDiagnostics(m_matrix_violation_fraction=_m_matrix_violations(lhs))
    lu = spla.splu(lhs)
    R = (eye + 0.5 * dt * L).tocsr()
    shape = shape or (N,)
    P = np.array(terminal, dtype=float).ravel()
    nlev = grid.n_t + 1
    store = np.empty((nlev if keep_levels else 2,) + shape)
    store[-1] = P.reshape(shape)
    lo, hi = P.min(), P.max()
    for n in range(grid.n_t - 1, -1, -1):
        rhs = R @ P
        if source is not None:
            rhs += dt * source(n)
        if nonlinear is None:
            Pn = lu.solve(rhs)
        else:
            Ph = lu.solve(rhs + dt * nonlinear(P))
            Pn = lu.solve(rhs + dt * nonlinear(0.5 * (P + Ph)))
            change = np.max(np.abs(Pn - Ph)) / max(np.max(np.abs(Pn)), 1e-300)
            diag.max_corrector_change = max(diag.max_corrector_change, float(change))
            if not np.isfinite(change) or change > 0.1:
                raise NewtonDivergence(f"{label}: corrector changed the solution by "
                                       f"{change:.3e} at time level {n}")
        if not np.all(np.isfinite(Pn)):
            bad = int(np.argmax(~np.isfinite(Pn)))
            raise StabilityFailure(f"{label}: non-finite value at time level {n}, node {bad}")
        if positive:
            mn = Pn.min()
            if mn <= 0 or (upper is not None and Pn.max() > upper):
                node = int(np.argmin(Pn)) if mn <= 0 else int(np.argmax(Pn))
                raise StabilityFailure(f"{label}: value {Pn[node]:.6g} outside (0, {upper}] "
                                       f"at time level {n}, node {node}")
        lo = min(lo, Pn.min())
        hi = max(hi, Pn.max())
        P = Pn
        if keep_levels:
            store[n] = P.reshape(shape)
    if not keep_levels:
        store[0] = P.reshape(shape)
    diag.wall_time = time.perf_counter() - t0
    diag.min_value = float(lo)
    diag.max_value = float(hi)
    idx = np.arange(nlev) if keep_levels else np.array([0, grid.n_t])
    return store, idx, diag


def _upper_bound(coef, consts, T):
    return 2.0 * np.exp(abs(consts.gamma / (2 * consts.q)) * np.max(coef.lam**2) * T)


def _reshape(grid, store):
    n = grid.n_z
    return store.reshape(store.shape[0], n, n)


def solve_psi0_2d(model, consts: DistortionConstants, rho, grid: Grid2D, keep_levels=True):
    """Zeroth-order linear equation with fully correlated factors, terminal value 1."""
    coef = grid_coefficients(model, grid)
    st = stencils_2d(grid.n_z, grid.dz)
    L = linear_operator(coef, st, consts, rho, rho, 1.0)
    store, idx, diag = cn_march(grid, L, np.ones(grid.n_z**2), upper=_upper_bound(coef, consts, grid.T),
                                keep_levels=keep_levels, label="psi0")
    return PsiSurface(grid, _reshape(grid, store), "psi0", diag, idx)


def solve_psi1_2d(model, consts, scheme: CorrelationScheme, psi0: PsiSurface, grid: Grid2D | None = None,
                  keep_levels=True):
    """First-order correction; the source is evaluated on the Crank-Nicolson midpoint of psi0."""
    grid = grid or psi0.grid
    if grid != psi0.grid:
        raise ValueError("psi0 must live on the same grid")
    if not psi0.has_all_levels:
        raise ValueError("psi0 surface must keep every time level")
    coef = grid_coefficients(model, grid)
    st = stencils_2d(grid.n_z, grid.dz)
    base = CorrelationScheme(scheme.rho)
    L = linear_operator(coef, st, consts, base.rho, base.rho, 1.0)
    if all(s == 0 for s in scheme.slopes):
        src = None
    else:
        def src(n):
            mid = 0.5 * (psi0.level(n) + psi0.level(n + 1))
            return f1_source(jet_of(mid, st), coef, consts, scheme)
    store, idx, diag = cn_march(grid, L, np.zeros(grid.n_z**2), source=src, positive=False,
                                keep_levels=keep_levels, label="psi1")
    return PsiSurface(grid, _reshape(grid, store), "psi1", diag, idx)


def solve_psi_full(model, consts, scheme: CorrelationScheme, grid: Grid2D, keep_levels=True):
    """Fully nonlinear equation at the perturbed correlations, terminal value 1."""
    r1, r2, r12 = perturbed_correlations(scheme)
    coef = grid_coefficients(model, grid)
    st = stencils_2d(grid.n_z, grid.dz)
    L = linear_operator(coef, st, consts, r1, r2, r12)

    def nonlinear(P):
        return bracket(P, st.D1 @ P, st.D2 @ P, coef, consts, r1, r2, r12)

    store, idx, diag = cn_march(grid, L, np.ones(grid.n_z**2), nonlinear=nonlinear,
                                upper=_upper_bound(coef, consts, grid.T),
                                keep_levels=keep_levels, label=f"psi(eps={scheme.eps:g})")
    return PsiSurface(grid, _reshape(grid, store), f"psi_eps_{scheme.eps:g}", diag, idx)


# ---------------------------------------------------------------- 1-D oracles

@dataclass
class Surface1D:
    times: np.ndarray
    z: np.ndarray
    values: np.ndarray  # (n_t + 1, n_z) over the padded grid
    n_report: int
    diagnostics: SolverDiagnostics = field(default_factory=SolverDiagnostics)

    @property
    def z_report(self):
        return self.z[: self.n_report]

    def at_level(self, k, inner=True):
        v = self.values[k]
        return v[: self.n_report] if inner else v


def _padded_axis(z_grid, pad):
    z_grid = np.asarray(z_grid, dtype=float)
    h = z_grid[1] - z_grid[0]
    if z_grid[0] != 0.0 or np.max(np.abs(np.diff(z_grid) - h)) > 1e-9 * h:
        raise ValueError("z_grid must be uniform and start at 0")
    extra = int(np.ceil((pad - 1.0) * z_grid[-1] / h - 1e-9))
    return np.concatenate([z_grid, z_grid[-1] + h * np.arange(1, extra + 1)]), h


def _diag_operator_1d(model: ChackoViceira, consts, rho, z, h):
    d1, d2 = stencils_1d(z.size, h)
    g, q = consts.gamma, consts.q
    lb, bb = model.lambda_bar, model.beta_bar
    return (sp.diags(model.m - z + 2 * g * rho * lb * bb * z) @ d1 + sp.diags(bb**2 * z) @ d2
            + sp.diags(g * lb**2 / q * z)).tocsr()


def _grid_1d(model, z, n_t):
    return Grid2D(z_max=z[-1], n_z=3, n_t=n_t, T=model.T, pad=1.0)


def solve_psi0_tilde_1d(model: ChackoViceira, consts, rho, z_grid=None, n_t=400, pad=1.25):
    """Diagonal zeroth-order equation on z_grid (extended by padding)."""
    if z_grid is None:
        z_grid = np.linspace(0.0, 100.0, 401)
    z, h = _padded_axis(z_grid, pad)
    L = _diag_operator_1d(model, consts, rho, z, h)
    g = _grid_1d(model, z, n_t)
    store, _, diag = cn_march(g, L, np.ones(z.size), label="psi0_tilde")
    return Surface1D(g.times, z, store, len(z_grid), diag)


def solve_psi1_tilde_1d(model: ChackoViceira, consts, rho, psi0: Surface1D, fbar=None, source=None):
    """Diagonal first-order equation.

    Forcing is fbar(t) z psi0 at the step midpoint unless an explicit
    source(n) over the padded axis is given.
    """
    z = psi0.z
    h = z[1] - z[0]
    n_t = psi0.times.size - 1
    L = _diag_operator_1d(model, consts, rho, z, h)
    g = _grid_1d(model, z, n_t)
    if source is None:
        if fbar is None:
            raise ValueError("need fbar or source")

        def source(n):
            tm = 0.5 * (g.times[n] + g.times[n + 1])
            return fbar(tm) * z * 0.5 * (psi0.values[n] + psi0.values[n + 1])
    store, _, diag = cn_march(g, L, np.zeros(z.size), source=source, positive=False,
                              label="psi1_tilde")
    return Surface1D(g.times, z, store, psi0.n_report, diag)


# ---------------------------------------------------------------- error table

@dataclass
class DiagonalTable:
    z: np.ndarray
    psi: np.ndarray
    psi0: np.ndarray
    psi0_eps_psi1: np.ndarray
    err0: np.ndarray
    err1: np.ndarray
    eps: float

    HEADER = "z,psi,psi0,psi0_eps_psi1,err0,err1"

    def columns(self):
        return np.column_stack([self.z, self.psi, self.psi0, self.psi0_eps_psi1, self.err0, self.err1])

    def to_csv(self, path):
        data = self.columns()
        if not np.all(np.isfinite(data)):
            raise StabilityFailure("non-finite entry in the diagonal error table")
        with open(path, "w", newline="\n") as fh:
            fh.write(self.HEADER + "\n")
            for row in data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")

    @property
    def sup_err0(self):
        return float(np.max(np.abs(self.err0)))

    @property
    def sup_err1(self):
        return float(np.max(np.abs(self.err1)))


def diagonal_error_curves(psi_full: PsiSurface, order0: PsiSurface, order1: PsiSurface, eps):
    """Errors of the zeroth and first-order approximations along (0, z, z), z <= z_max."""
    if not (psi_full.grid.z_max == order0.grid.z_max == order1.grid.z_max):
        raise ValueError("surfaces must share z_max")
    z, psi = psi_full.diagonal(0)
    _, p0 = order0.diagonal(0)
    _, p1 = order1.diagonal(0)
    approx = p0 + eps * p1
    return DiagonalTable(z, psi, p0, approx, psi - p0, psi - approx, eps)
