"""Riccati closed forms for the diagonal functions and the zeroth-order strategy.

On the diagonal z1 = z2 = z the zeroth-order function is exp(A(t) z + B(t))
where A solves A' + a2 A^2 + a1 A + a0 = 0, B' = -m A, A(T) = B(T) = 0.
The first-order correction is (z A1(t) + B1(t)) exp(A z + B) with A1, B1
solving linear ODEs driven by fbar1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp
from scipy.interpolate import CubicSpline

from .errors import DegenerateRoots, NegativeBase, QuadratureError
from .model import (ChackoViceira, CorrelationScheme, DistortionConstants, WealthState,
                    factor_coefficients)

EXPLOSION_BOUND = 1e6


def default_time_grid(T, n=401):
    return np.linspace(0.0, T, n)


def riccati_coefficients(consts: DistortionConstants, model: ChackoViceira, rho):
    """(a2, a1, a0) of the diagonal Riccati equation."""
    g, q = consts.gamma, consts.q
    lb, bb = model.lambda_bar, model.beta_bar
    return bb**2, 2.0 * g * lb * rho * bb - 1.0, g * lb**2 / q


def _roots(a2, a1, a0):
    if a2 <= 0:
        raise DegenerateRoots("no quadratic term: roots undefined")
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc <= 0:
        raise DegenerateRoots(f"discriminant {disc:.3e} <= 0")
    sq = np.sqrt(disc)
    if sq / a2 < 1e-12:
        raise DegenerateRoots("roots coincide")
    # a+ a- = a0 / a2 is used for the smaller-magnitude root to avoid cancellation
    if -a1 >= 0:
        big = (-a1 + sq) / (2 * a2)
        return big, (a0 / a2) / big
    small_neg = (-a1 - sq) / (2 * a2)
    return (a0 / a2) / small_neg, small_neg


def riccati_roots(consts, model, rho):
    """Roots a+ > a- of beta_bar^2 a^2 + (2 Gamma lambda_bar rho beta_bar - 1) a + Gamma lambda_bar^2 / q."""
    return _roots(*riccati_coefficients(consts, model, rho))


@dataclass(frozen=True)
class RiccatiSolution:
    a2: float
    a1: float
    a0: float
    m: float
    T: float
    a_plus: float | None
    a_minus: float | None
    params: dict = field(default_factory=dict)
    _A_interp: object = None
    _B_interp: object = None

    @property
    def method(self):
        return "closed" if self._A_interp is None else "ode"

    def A(self, t):
        if self._A_interp is not None:
            return self._A_interp(t)
        ap, am = self.a_plus, self.a_minus
        tau = self.T - np.asarray(t, dtype=float)
        einv = np.exp(-self.a2 * tau * (ap - am))
        return ap * am * (einv - 1.0) / (am * einv - ap)

    def B(self, t):
        if self._B_interp is not None:
            return self._B_interp(t)
        ap, am = self.a_plus, self.a_minus
        tau = self.T - np.asarray(t, dtype=float)
        einv = np.exp(-self.a2 * tau * (ap - am))
        return 0.0 - self.m * (np.log((am * einv - ap) / (am - ap)) / self.a2 - am * tau)

    def riccati_residual(self, t, h=1e-6):
        t = np.asarray(t, dtype=float)
        lo = np.clip(t - h, 0.0, self.T)
        hi = np.clip(t + h, 0.0, self.T)
        dA = (self.A(hi) - self.A(lo)) / (hi - lo)
        A = self.A(t)
        return dA + self.a2 * A * A + self.a1 * A + self.a0


def _ode_riccati(a2, a1, a0, m, T, time_grid):
    def rhs(t, y):
        return [-(a2 * y[0] ** 2 + a1 * y[0] + a0), -m * y[0]]

    def blowup(t, y):
        return EXPLOSION_BOUND - abs(y[0])
    blowup.terminal = True

    ts = np.asarray(time_grid, dtype=float)
    sol = solve_ivp(rhs, (T, ts[0]), [0.0, 0.0], method="DOP853", t_eval=ts[::-1],
                    rtol=1e-12, atol=1e-14, events=blowup)
    if sol.status == 1 or sol.y.shape[1] != ts.size:
        raise DegenerateRoots("Riccati solution explodes before t=0 (value function blows up)")
    A = sol.y[0][::-1]
    B = sol.y[1][::-1]
    return CubicSpline(ts, A), CubicSpline(ts, B)


def riccati_engine(a2, a1, a0, m, T, time_grid=None, params=None):
    """Closed form when the roots exist, backward ODE integration otherwise."""
    if time_grid is None:
        time_grid = default_time_grid(T)
    params = dict(params or {})
    try:
        ap, am = _roots(a2, a1, a0)
        return RiccatiSolution(a2, a1, a0, m, T, ap, am, params)
    except DegenerateRoots:
        fa, fb = _ode_riccati(a2, a1, a0, m, T, time_grid)
        return RiccatiSolution(a2, a1, a0, m, T, None, None, params, fa, fb)


def solve_AB(consts: DistortionConstants, model: ChackoViceira, rho, time_grid=None):
    a2, a1, a0 = riccati_coefficients(consts, model, rho)
    params = dict(gamma=consts.gamma, q=consts.q, p=consts.p, rho=rho,
                  lambda_bar=model.lambda_bar, beta_bar=model.beta_bar, m=model.m, T=model.T)
    return riccati_engine(a2, a1, a0, model.m, model.T, time_grid, params)


def fbar1(t, riccati: RiccatiSolution, scheme: CorrelationScheme, consts: DistortionConstants):
    """Diagonal source of the first-order Riccati correction (divided by z Psi0)."""
    pr = riccati.params
    g, q, rho = consts.gamma, consts.q, pr["rho"]
    bb, lb = pr["beta_bar"], pr["lambda_bar"]
    s1, s2, s12 = scheme.slopes
    A = riccati.A(t)
    return (2 * q * g * rho * bb**2 * A**2 * (2 * s1 - rho * s12 + 2 * s2)
            + 2 * g * lb * bb * A * (s1 + s2)
            + 2 * s12 * bb**2 * A**2)


@dataclass(frozen=True)
class CorrectionSolution:
    times: np.ndarray
    A1_values: np.ndarray
    B1_values: np.ndarray
    fbar_values: np.ndarray
    slopes: tuple

    def _interp(self, vals, t):
        # C2 spline keeps the time derivative accurate; exact terminal value at t = T
        return np.where(np.asarray(t) >= self.times[-1], vals[-1], CubicSpline(self.times, vals)(t))

    def A1(self, t):
        return self._interp(self.A1_values, t)

    def B1(self, t):
        return self._interp(self.B1_values, t)

    def fbar1(self, t):
        return self._interp(self.fbar_values, t)


def correction_engine(riccati: RiccatiSolution, fbar_fn, time_grid, slopes=()):
    """A1(t) = int_t^T exp(int_t^s c(u) du) fbar(s) ds with c = 2 a2 A + a1, B1 = m int_t^T A1."""
    ts = np.asarray(time_grid, dtype=float)
    if ts.size < 3:
        raise QuadratureError("quadrature needs at least 3 time nodes")
    if np.any(np.diff(ts) <= 0):
        raise QuadratureError("time grid must be strictly increasing")
    c = 2.0 * riccati.a2 * riccati.A(ts) + riccati.a1
    K = cumulative_simpson(c, x=ts, initial=0.0)
    fb = np.asarray(fbar_fn(ts), dtype=float) * np.ones_like(ts)
    J = cumulative_simpson(np.exp(K) * fb, x=ts, initial=0.0)
    A1 = np.exp(-K) * (J[-1] - J)
    I = cumulative_simpson(A1, x=ts, initial=0.0)
    B1 = riccati.m * (I[-1] - I)
    A1[-1] = 0.0
    B1[-1] = 0.0
    return CorrectionSolution(ts, A1, B1, fb, tuple(slopes))


def solve_A1B1(riccati, scheme, consts, time_grid=None):
    if time_grid is None:
        time_grid = default_time_grid(riccati.T)
    return correction_engine(riccati, lambda t: fbar1(t, riccati, scheme, consts),
                             time_grid, scheme.slopes)


def psi0_tilde(t, z, riccati):
    return np.exp(riccati.A(t) * np.asarray(z) + riccati.B(t))


def psi1_tilde(t, z, riccati, correction):
    z = np.asarray(z)
    return (z * correction.A1(t) + correction.B1(t)) * psi0_tilde(t, z, riccati)


def value_approx(state: WealthState, order, riccati, correction, consts, eps):
    """(x^p/p) (Psi0 + eps Psi1)^q on the diagonal."""
    if state.z1 != state.z2:
        raise ValueError("closed-form value needs z1 == z2; use a PDE surface off the diagonal")
    base = psi0_tilde(state.t, state.z1, riccati)
    if order >= 1:
        base = base + eps * psi1_tilde(state.t, state.z1, riccati, correction)
    base = float(base)
    if base <= 0:
        raise NegativeBase(f"Psi0 + eps Psi1 = {base:.3e} <= 0; eps too large for the expansion")
    p = consts.p
    return state.x**p / p * base**consts.q


def pi0_diagonal(state: WealthState, riccati, consts, model: ChackoViceira):
    rho = riccati.params["rho"]
    z = state.z1
    A = riccati.A(state.t)
    return float(2 * state.x * z * (model.lambda_bar + rho * consts.q * model.beta_bar * A)
                 / ((1 - consts.p) * model.sigma_bar))


def pi0_fraction(psi, psi1, psi2, z1, z2, consts, model, rho):
    """pi0 / x from Psi0 and its gradient (vectorised)."""
    _, _, b1, b2 = factor_coefficients(model, z1, z2)
    lam = model.lam(z1, z2)
    sig = model.sigma(z1, z2)
    return (lam + rho * consts.q * (b1 * psi1 + b2 * psi2) / psi) / ((1 - consts.p) * sig)


def pi0_general(state: WealthState, psi0_surface, consts, model, rho):
    psi, d1, d2 = psi0_surface.gradient_at(state.t, state.z1, state.z2)
    return float(state.x * pi0_fraction(psi, d1, d2, state.z1, state.z2, consts, model, rho))
