"""Two stocks driven by two volatility factors.

Asset i has Sharpe ratio lambda_i, its noise W_i correlates with factor noise
B_k through rho_ik = rho_i + s_ik eps, and the factors correlate through
rho_B = 1 + s_B eps. The stocks correlate through rho_w.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closed_form import RiccatiSolution, correction_engine, default_time_grid, riccati_engine
from .errors import DomainError, FullyCorrelatedStocks, InvalidCorrelation, OutOfDomain, SingularHessian
from .model import DistortionConstants, WealthState, check_exponent
from .pde import (Grid2D, Jet, PsiSurface, assemble_operator, cn_march, jet_of, stencils_2d)


@dataclass(frozen=True)
class TwoAssetModel:
    mu_bar_1: float = 0.05
    mu_bar_2: float = 0.05
    sigma_bar_1: float = 0.2
    sigma_bar_2: float = 0.2
    m: float = 26.0
    beta_bar: float = 5.0
    rho_w: float = 0.0
    rho_1: float = 0.5
    rho_2: float = 0.5
    slopes: tuple = ((0.0, -0.5), (0.0, -0.5))  # s_ik, row i = asset, column k = factor
    slope_b: float = -1.0
    eps: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if abs(self.rho_w) >= 1:
            raise FullyCorrelatedStocks(f"|rho_w| must be < 1, got {self.rho_w}")
        if self.sigma_bar_1 <= 0 or self.sigma_bar_2 <= 0:
            raise InvalidCorrelation("volatility scales must be positive")
        if self.m < 1 or self.beta_bar <= 0:
            raise DomainError("need m >= 1 and beta_bar > 0")
        if self.eps > 0 and self.slope_b >= 0:
            raise InvalidCorrelation("slope_b must be negative when eps > 0")
        C = self.correlation_matrix()
        if np.min(np.linalg.eigvalsh(C)) < -1e-12:
            raise InvalidCorrelation("joint correlation of (W1, W2, B1, B2) is not positive semidefinite")

    @property
    def lambda_bar_1(self):
        return self.mu_bar_1 / self.sigma_bar_1

    @property
    def lambda_bar_2(self):
        return self.mu_bar_2 / self.sigma_bar_2

    def rho_ik(self, eps=None):
        e = self.eps if eps is None else eps
        base = np.array([[self.rho_1, self.rho_1], [self.rho_2, self.rho_2]])
        return base + np.asarray(self.slopes, dtype=float) * e

    def rho_b(self, eps=None):
        return 1.0 + self.slope_b * (self.eps if eps is None else eps)

    def correlation_matrix(self, eps=None):
        r = self.rho_ik(eps)
        rb = self.rho_b(eps)
        return np.array([[1.0, self.rho_w, r[0, 0], r[0, 1]],
                         [self.rho_w, 1.0, r[1, 0], r[1, 1]],
                         [r[0, 0], r[1, 0], 1.0, rb],
                         [r[0, 1], r[1, 1], rb, 1.0]])

    def lambdas(self, z1, z2):
        s = np.sqrt(np.asarray(z1) + np.asarray(z2))
        return self.lambda_bar_1 * s, self.lambda_bar_2 * s

    def sigmas(self, z1, z2):
        s = np.sqrt(np.asarray(z1) + np.asarray(z2))
        return self.sigma_bar_1 / s, self.sigma_bar_2 / s

    def alpha(self, z):
        return self.m - np.asarray(z)

    def beta(self, z):
        return self.beta_bar * np.sqrt(2.0 * np.maximum(np.asarray(z), 0.0))


def q_two_asset(p, rho1, rho2, rho_w):
    check_exponent(p)
    if abs(rho_w) >= 1:
        raise FullyCorrelatedStocks(f"|rho_w| must be < 1, got {rho_w}")
    g = p / (1 - p)
    r2 = (rho1**2 + rho2**2 - 2 * rho1 * rho2 * rho_w) / (1 - rho_w**2)
    denom = 1 + g * r2
    if denom <= 0:
        raise InvalidCorrelation("hedging correlation too strong: distortion exponent undefined")
    return DistortionConstants(p=float(p), gamma=g, q=1.0 / denom)


def _effective(l1, l2, model: TwoAssetModel):
    w = model.rho_w
    d = 1 - w**2
    lam_sq = (l1**2 - 2 * l1 * l2 * w + l2**2) / d
    lam_bb = (l1 * (model.rho_1 - model.rho_2 * w) + l2 * (model.rho_2 - model.rho_1 * w)) / d
    return lam_sq, lam_bb


def effective_lambdas(model: TwoAssetModel):
    """(lambda_bar^2, double-bar lambda) of the diagonal reduction."""
    return _effective(model.lambda_bar_1, model.lambda_bar_2, model)


def pi_star_two_asset(v_x, v_xx, v_xz, mu, sigma, beta, rho_ik, rho_w):
    """Maximiser of the two-asset wealth generator.

    v_xz = (v_x1, v_x2) cross derivatives, mu, sigma per asset, beta per factor.
    """
    if np.any(np.asarray(v_xx) >= 0):
        raise SingularHessian("v_xx must be negative")
    if abs(rho_w) >= 1:
        raise FullyCorrelatedStocks("stocks fully correlated")
    r = np.asarray(rho_ik, dtype=float)
    out = []
    for i, j in ((0, 1), (1, 0)):
        ai = sigma[i] * (beta[0] * r[i, 0] * v_xz[0] + beta[1] * r[i, 1] * v_xz[1]) + mu[i] * v_x
        aj = sigma[j] * (beta[0] * r[j, 0] * v_xz[0] + beta[1] * r[j, 1] * v_xz[1]) + mu[j] * v_x
        out.append((sigma[j] * ai - rho_w * sigma[i] * aj)
                   / ((rho_w**2 - 1) * sigma[i] ** 2 * sigma[j] * v_xx))
    return tuple(out)


def wealth_generator(pi, v_x, v_xx, v_xz, mu, sigma, beta, rho_ik, rho_w):
    """The pi-dependent part of the generator (used to check the maximiser)."""
    r = np.asarray(rho_ik, dtype=float)
    lin = (mu[0] * pi[0] + mu[1] * pi[1]) * v_x
    quad = 0.5 * v_xx * (pi[0] ** 2 * sigma[0] ** 2 + pi[1] ** 2 * sigma[1] ** 2
                         + 2 * rho_w * pi[0] * pi[1] * sigma[0] * sigma[1])
    cross = sum(r[i, k] * pi[i] * sigma[i] * beta[k] * v_xz[k] for i in range(2) for k in range(2))
    return lin + quad + cross


# ---------------------------------------------------------------- zeroth order

def _grid_terms(model: TwoAssetModel, grid: Grid2D):
    z1, z2 = np.meshgrid(grid.z, grid.z, indexing="ij")
    z1 = z1.ravel()
    z2 = z2.ravel()
    l1, l2 = model.lambdas(z1, z2)
    lam_sq, lam_bb = _effective(l1, l2, model)
    return z1, z2, l1, l2, lam_sq, lam_bb, model.beta(z1), model.beta(z2)


def _psi0_operator(model, consts, grid):
    z1, z2, l1, l2, lam_sq, lam_bb, b1, b2 = _grid_terms(model, grid)
    st = stencils_2d(grid.n_z, grid.dz)
    g, q = consts.gamma, consts.q
    L = assemble_operator(st, model.alpha(z1) + g * lam_bb * b1, model.alpha(z2) + g * lam_bb * b2,
                          0.5 * b1**2, 0.5 * b2**2, b1 * b2, g / (2 * q) * lam_sq)
    return L, st


def diagonal_riccati(model: TwoAssetModel, consts, time_grid=None, drift_rho=None) -> RiccatiSolution:
    """Riccati engine with the effective Sharpe ratios substituted.

    drift_rho multiplies the drift term; None is the mechanical reduction of
    the two-dimensional equation, a number reproduces the alternative
    diagonal equation carrying an extra correlation factor.
    """
    lam_sq, lam_bb = effective_lambdas(model)
    bb = model.beta_bar
    k = 1.0 if drift_rho is None else drift_rho
    params = dict(gamma=consts.gamma, q=consts.q, p=consts.p, rho=None, lambda_sq=lam_sq,
                  lambda_bb=lam_bb, beta_bar=bb, m=model.m, T=model.T)
    return riccati_engine(bb**2, 2 * consts.gamma * k * lam_bb * bb - 1, consts.gamma * lam_sq / consts.q,
                          model.m, model.T, time_grid, params)


def solve_psi0_two_asset(model: TwoAssetModel, consts, grid: Grid2D | None = None, time_grid=None,
                         keep_levels=True):
    """Two-dimensional surface when a grid is given, else the diagonal closed form."""
    if grid is None:
        return diagonal_riccati(model, consts, time_grid)
    L, _ = _psi0_operator(model, consts, grid)
    lam_sq_max = np.max(_grid_terms(model, grid)[4])
    upper = 2 * np.exp(abs(consts.gamma / (2 * consts.q)) * lam_sq_max * grid.T)
    store, idx, diag = cn_march(grid, L, np.ones(grid.n_z**2), upper=upper,
                                keep_levels=keep_levels, label="psi0_two_asset")
    n = grid.n_z
    return PsiSurface(grid, store.reshape(store.shape[0], n, n), "psi0_two_asset", diag, idx)


# ---------------------------------------------------------------- first order

def psi1_source_two_asset(jet: Jet, z1, z2, model: TwoAssetModel, consts):
    """First-order forcing built from the zeroth-order jet at factor levels (z1, z2)."""
    q, g, w = consts.q, consts.gamma, model.rho_w
    d = 1 - w**2
    r1, r2 = model.rho_1, model.rho_2
    s = np.asarray(model.slopes, dtype=float)
    sb = model.slope_b
    w1, w2 = r1 - r2 * w, r2 - r1 * w
    l1, l2 = model.lambdas(z1, z2)
    b1, b2 = model.beta(z1), model.beta(z2)
    P, g1, g2 = jet.psi, jet.d1, jet.d2
    hedge_sq = r1**2 + r2**2 - 2 * r1 * r2 * w
    quad = (b1**2 * (w1 * s[0, 0] + w2 * s[1, 0]) * g1**2
            + b2**2 * (w1 * s[0, 1] + w2 * s[1, 1]) * g2**2
            + b1 * b2 * g1 * g2 * (w1 * (s[0, 0] + s[0, 1]) + w2 * (s[1, 0] + s[1, 1]) - hedge_sq * sb))
    drift = sum(((l1 - l2 * w) * s[0, k] + (l2 - l1 * w) * s[1, k]) * bk * gk
                for k, bk, gk in ((0, b1, g1), (1, b2, g2)))
    return q * g / (d * P) * quad + g / d * drift + sb * b1 * b2 * jet.d12


def solve_psi1_two_asset(model: TwoAssetModel, consts, psi0: PsiSurface, keep_levels=True):
    grid = psi0.grid
    if not psi0.has_all_levels:
        raise ValueError("psi0 surface must keep every time level")
    L, st = _psi0_operator(model, consts, grid)
    z1, z2 = _grid_terms(model, grid)[:2]

    def src(n):
        mid = 0.5 * (psi0.level(n) + psi0.level(n + 1))
        return psi1_source_two_asset(jet_of(mid, st), z1, z2, model, consts)

    store, idx, diag = cn_march(grid, L, np.zeros(grid.n_z**2), source=src, positive=False,
                                keep_levels=keep_levels, label="psi1_two_asset")
    n = grid.n_z
    return PsiSurface(grid, store.reshape(store.shape[0], n, n), "psi1_two_asset", diag, idx)


def fbar1_two_asset(t, riccati: RiccatiSolution, model: TwoAssetModel, consts):
    """Diagonal forcing per unit z Psi0, with Psi_i -> C Psi and Psi_12 -> C^2 Psi."""
    q, g, w = consts.q, consts.gamma, model.rho_w
    d = 1 - w**2
    r1, r2 = model.rho_1, model.rho_2
    s = np.asarray(model.slopes, dtype=float)
    sb = model.slope_b
    bb = model.beta_bar
    w1, w2 = r1 - r2 * w, r2 - r1 * w
    lb1, lb2 = model.lambda_bar_1, model.lambda_bar_2
    C = riccati.A(t)
    hedge_sq = r1**2 + r2**2 - 2 * r1 * r2 * w
    return (2 * q * g * bb**2 * C**2 / d
            * (2 * w1 * (s[0, 0] + s[0, 1]) + 2 * w2 * (s[1, 0] + s[1, 1]) - hedge_sq * sb)
            + 2 * g * bb * C / d * ((lb1 - lb2 * w) * (s[0, 0] + s[0, 1]) + (lb2 - lb1 * w) * (s[1, 0] + s[1, 1]))
            + 2 * sb * bb**2 * C**2)


def diagonal_correction(model: TwoAssetModel, consts, riccati: RiccatiSolution, time_grid=None):
    time_grid = default_time_grid(model.T) if time_grid is None else time_grid
    return correction_engine(riccati, lambda t: fbar1_two_asset(t, riccati, model, consts), time_grid,
                             (tuple(map(tuple, model.slopes)), model.slope_b))


# ---------------------------------------------------------------- strategy

def pi0_from_jet(x, psi, d1, d2, z1, z2, model: TwoAssetModel, consts, perturbed=False):
    """Zeroth-order amounts for both assets (vectorised)."""
    r = model.rho_ik() if perturbed else model.rho_ik(0.0)
    w = model.rho_w
    l1, l2 = model.lambdas(z1, z2)
    s1, s2 = model.sigmas(z1, z2)
    b1, b2 = model.beta(z1), model.beta(z2)
    lam = (l1, l2)
    sig = (s1, s2)
    out = []
    for i, j in ((0, 1), (1, 0)):
        num = (consts.q * (b1 * (r[i, 0] - r[j, 0] * w) * d1 + b2 * (r[i, 1] - r[j, 1] * w) * d2)
               + psi * (lam[i] - lam[j] * w))
        out.append(x * num / ((1 - consts.p) * (1 - w**2) * sig[i] * psi))
    return tuple(out)


def pi0_two_asset(state: WealthState, psi0, model: TwoAssetModel, consts, perturbed=False):
    """Zeroth-order strategy from a surface, or from the diagonal Riccati solution."""
    if isinstance(psi0, RiccatiSolution):
        if state.z1 != state.z2:
            raise OutOfDomain("the diagonal closed form only covers z1 == z2")
        psi = float(np.exp(psi0.A(state.t) * state.z1 + psi0.B(state.t)))
        # on the diagonal each partial derivative carries half of the total slope
        d = 0.5 * float(psi0.A(state.t)) * psi
        return tuple(float(v) for v in pi0_from_jet(state.x, psi, d, d, state.z1, state.z2,
                                                    model, consts, perturbed))
    psi, d1, d2 = psi0.gradient_at(state.t, state.z1, state.z2)
    return tuple(float(v) for v in pi0_from_jet(state.x, psi, d1, d2, state.z1, state.z2,
                                                model, consts, perturbed))


def diagonal_drift_comparison(model: TwoAssetModel, consts):
    """A(0)-type coefficient of the mechanical reduction vs the variant with an extra rho factor."""
    out = {"C0_mechanical": float(diagonal_riccati(model, consts).A(0.0))}
    if model.rho_1 == model.rho_2:
        out["C0_with_extra_rho"] = float(diagonal_riccati(model, consts, drift_rho=model.rho_1).A(0.0))
    else:
        out["C0_with_extra_rho"] = None
    lam_sq, lam_bb = effective_lambdas(model)
    out["lambda_sq"] = lam_sq
    out["lambda_bb"] = lam_bb
    out["lambda_bb_equals_lambda"] = bool(np.isclose(lam_bb, np.sqrt(lam_sq)))
    return out
