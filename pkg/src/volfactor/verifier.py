"""Residual checks for the expansion: the controlled generator, sub/super bounds, error order."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundDegenerate, NegativeBase, StepTooSmall
from .model import CorrelationScheme, DistortionConstants, factor_coefficients, perturbed_correlations
from .pde import GridCoefficients, Jet, PsiSurface, grid_coefficients, jet_of

EPS_MACHINE = np.finfo(float).eps


# ---------------------------------------------------------------- generic operator

def _as_point(point):
    if hasattr(point, "t"):
        return np.array([point.t, point.x, point.z1, point.z2], dtype=float)
    return np.asarray(point, dtype=float)


def _derivatives(v, p0, h):
    """Central first, second and mixed derivatives of v at p0 with steps h."""
    n = len(p0)
    f0 = v(*p0)
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    cache = {}

    def f(shift):
        key = tuple(shift)
        if key not in cache:
            cache[key] = v(*(p0 + np.asarray(shift) * h))
        return cache[key]

    for i in range(n):
        e = np.zeros(n)
        e[i] = 1
        fp, fm = f(e), f(-e)
        grad[i] = (fp - fm) / (2 * h[i])
        hess[i, i] = (fp - 2 * f0 + fm) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = 1
            hess[i, j] = hess[j, i] = ((f(e + ej) - f(e - ej) - f(-e + ej) + f(-e - ej))
                                       / (4 * h[i] * h[j]))
    return f0, grad, hess


def apply_Q(strategy, v, point, model, scheme: CorrelationScheme, steps=None, rel_step=1e-4):
    """Controlled generator of (t, x, z1, z2) applied to v, by Richardson-extrapolated differences.

    strategy is a callable (t, x, z1, z2) -> amount invested, or a number.
    """
    p0 = _as_point(point)
    scale = np.maximum(np.abs(p0), 1.0)
    h = np.asarray(steps, dtype=float) if steps is not None else rel_step * scale
    if np.any(h <= 0):
        raise StepTooSmall("finite-difference steps must be positive")
    if np.any(EPS_MACHINE / (h / scale) ** 2 > 1e-6):
        raise StepTooSmall("steps too small: cancellation error above 1e-6 relative")
    f0, g1, H1 = _derivatives(v, p0, h)
    _, g2, H2 = _derivatives(v, p0, h / 2)
    grad = (4 * g2 - g1) / 3
    hess = (4 * H2 - H1) / 3

    t, x, z1, z2 = p0
    pi = strategy(t, x, z1, z2) if callable(strategy) else float(strategy)
    r1, r2, r12 = perturbed_correlations(scheme)
    a1, a2, b1, b2 = (float(c) for c in factor_coefficients(model, z1, z2))
    mu = float(model.mu(z1, z2))
    sig = float(model.sigma(z1, z2))
    vt, vx, v1, v2 = grad
    gen_z = (a1 * v1 + a2 * v2 + 0.5 * b1**2 * hess[2, 2] + 0.5 * b2**2 * hess[3, 3]
             + r12 * b1 * b2 * hess[2, 3])
    gen_x = (pi * mu * vx + 0.5 * pi**2 * sig**2 * hess[1, 1]
             + pi * sig * (r1 * b1 * hess[1, 2] + r2 * b2 * hess[1, 3]))
    return float(vt + gen_z + gen_x)


# ---------------------------------------------------------------- pointwise generator on jets

def exposure_pi0(jet0: Jet, coef: GridCoefficients, consts, rho):
    """sigma * pi0 / x from the zeroth-order jet."""
    return (coef.lam + rho * consts.q * (coef.beta1 * jet0.d1 + coef.beta2 * jet0.d2) / jet0.psi) / (1 - consts.p)


def q_over_xp(b_t, jet: Jet, exposure, coef: GridCoefficients, consts, rho1, rho2, rho12):
    """Q[(x^p/p) b^q] / x^p for the strategy with sigma * pi / x = exposure.

    exposure=None takes the supremum over strategies.
    """
    p, q = consts.p, consts.q
    b = jet.psi
    if np.any(b <= 0):
        raise NegativeBase("distorted base is not positive")
    b1, b2 = coef.beta1, coef.beta2
    gen = (coef.alpha1 * jet.d1 + coef.alpha2 * jet.d2 + 0.5 * b1**2 * jet.d11
           + 0.5 * b2**2 * jet.d22 + rho12 * b1 * b2 * jet.d12)
    quad = 0.5 * b1**2 * jet.d1**2 + 0.5 * b2**2 * jet.d2**2 + rho12 * b1 * b2 * jet.d1 * jet.d2
    hedge = rho1 * b1 * jet.d1 + rho2 * b2 * jet.d2
    if exposure is None:
        exposure = (coef.lam * b + q * hedge) / ((1 - p) * b)
    bq1 = b ** (q - 1)
    return (q / p * bq1 * (b_t + gen) + q * (q - 1) / p * b ** (q - 2) * quad
            + b**q * (exposure * coef.lam - 0.5 * (1 - p) * exposure**2)
            + exposure * q * bq1 * hedge)


# ---------------------------------------------------------------- second-order quantities

def phi_term(jet0: Jet, jet1: Jet, coef: GridCoefficients, consts, scheme: CorrelationScheme):
    """Second-order quantity Phi in the sub-solution residual in closed form (the "displayed" variant)."""
    p, q, rho = consts.p, consts.q, scheme.rho
    s1, s2, s12 = scheme.slopes
    P0, P1 = jet0.psi, jet1.psi
    g1, g2, h1, h2 = jet0.d1, jet0.d2, jet1.d1, jet1.d2
    b1, b2 = coef.beta1, coef.beta2
    qm, pm = q - 1, p - 1
    part1 = (b1**2 * (q * p * s1**2 * g1**2 + 4 * q * p * rho * s1 * g1 * h1 - qm * pm * h1**2)
             + b2**2 * (q * p * s2**2 * g2**2 + 4 * q * p * rho * s2 * g2 * h2 - qm * pm * h2**2)
             + 2 * b1 * b2 * ((q * p * rho * (s1 + s2) - qm * pm * s12) * (h1 * g2 + h2 * g1)
                              - qm * pm * h1 * h2 + q * p * s1 * s2 * g1 * g2))
    part2 = (b1**2 * (-q * p * rho * s1 * g1**2 + qm * pm * g1 * h1)
             + b2**2 * (-q * p * rho * s2 * g2**2 + qm * pm * g2 * h2)
             + b1 * b2 * ((-q * p * rho * (s1 + s2) + qm * pm * s12) * g1 * g2
                          + qm * pm * (g1 * h2 + g2 * h1)))
    part3 = b1 * b2 * pm * s12 * jet1.d12 - coef.lam * p * (b1 * s1 * h1 + b2 * s2 * h2)
    return (P0**2 * part1 + 2 * P0 * P1 * part2 - 2 * P0**3 * part3
            + qm * (1 - p) * P1**2 * (b1 * g1 + b2 * g2) ** 2)


def theta_sq(jet0: Jet, jet1: Jet, coef: GridCoefficients, consts, rho):
    w = (jet1.psi * (coef.beta1 * jet0.d1 + coef.beta2 * jet0.d2)
         - jet0.psi * (coef.beta1 * jet1.d1 + coef.beta2 * jet1.d2))
    return consts.q**2 * rho**2 * w**2


def _quad_form(c1, c2, c12, coef, u1, u2, w1=None, w2=None):
    """sum c_i beta_i^2 u_i w_i + c12 beta1 beta2 (u1 w2 + u2 w1)."""
    w1 = u1 if w1 is None else w1
    w2 = u2 if w2 is None else w2
    b1, b2 = coef.beta1, coef.beta2
    return c1 * b1**2 * u1 * w1 + c2 * b2**2 * u2 * w2 + c12 * b1 * b2 * (u1 * w2 + u2 * w1)


def assembled_phi(jet0: Jet, jet1: Jet, coef: GridCoefficients, consts, scheme: CorrelationScheme):
    """Second-order coefficients obtained by expanding the generator directly.

    Returns (phi_sub, phi_super) normalised like the displayed Phi and Phi + p Theta^2,
    so the eps^2 term of Q[v]/x^p is (q/p) Psi0^(q-1) phi / (2 (1-p) Psi0^2).
    """
    p, q, g, rho = consts.p, consts.q, consts.gamma, scheme.rho
    s1, s2, s12 = scheme.slopes
    P0, P1 = jet0.psi, jet1.psi
    lin = (g * coef.lam * (s1 * coef.beta1 * jet1.d1 + s2 * coef.beta2 * jet1.d2)
           + s12 * coef.beta1 * coef.beta2 * jet1.d12)
    ga1, ga2 = 2 * q * g * rho * s1, 2 * q * g * rho * s2
    ga12 = q * g * (rho * (s1 + s2) - rho**2 * s12)
    de1, de2, de12 = q * g * s1**2, q * g * s2**2, q * g * s1 * s2
    c1_0 = _quad_form(ga1, ga2, ga12, coef, jet0.d1, jet0.d2)
    c2_0 = _quad_form(de1, de2, de12, coef, jet0.d1, jet0.d2)
    c1_d = 2 * _quad_form(ga1, ga2, ga12, coef, jet0.d1, jet0.d2, jet1.d1, jet1.d2)
    n2 = lin + (c2_0 + c1_d - c1_0 * P1 / P0) / (2 * P0)
    sb0 = coef.beta1 * jet0.d1 + coef.beta2 * jet0.d2
    sb1 = coef.beta1 * jet1.d1 + coef.beta2 * jet1.d2
    w = (s1 * coef.beta1 * jet0.d1 + s2 * coef.beta2 * jet0.d2) / P0 + rho * (P0 * sb1 - P1 * sb0) / P0**2
    phi_super = 2 * (1 - p) * P0**2 * n2
    return phi_super - p * q * P0**3 * w**2, phi_super


# ---------------------------------------------------------------- bands and M

def band_mask(grid, width=0.2):
    z = grid.z
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    return ((np.abs(z1 - z2) <= width * grid.z_max + 1e-12)
            & (z1 <= grid.z_max * (1 + 1e-12)) & (z2 <= grid.z_max * (1 + 1e-12))).ravel()


SLACKS = ("horizon", "elapsed")


def _regime_bracket(consts, lam, t, T, slack="horizon"):
    if slack not in SLACKS:
        raise ValueError(f"slack must be one of {SLACKS}")
    c = consts.gamma / (2 * consts.q)
    if consts.p > 0:
        return 1 + c * lam**2 * (T - t)
    if slack == "elapsed":
        return 1 + c * lam**2 * (-t)
    # slack M (T - t) on the larger base: d/dt gives -M, the potential adds -|c| lam^2 M (T - t)
    return 1 - c * lam**2 * (T - t)


@dataclass
class MSample:
    """Band sample of the second-order quantities used to pick M."""

    t: np.ndarray
    lam: np.ndarray
    psi0: np.ndarray
    phi: np.ndarray
    theta_sq: np.ndarray
    phi_sub_assembled: np.ndarray
    phi_super_assembled: np.ndarray


def sample_second_order(psi0: PsiSurface, psi1: PsiSurface, model, consts, scheme, width=0.2, stride=1):
    grid = psi0.grid
    coef = grid_coefficients(model, grid)
    mask = band_mask(grid, width)
    cb = GridCoefficients(*(c[mask] for c in coef))
    st = psi0.stencils
    ts, lams, p0s, phis, ths, subs, sups = [], [], [], [], [], [], []
    for k in range(0, grid.n_t + 1, stride):
        j0 = Jet(*(a[mask] for a in jet_of(psi0.level(k), st)))
        j1 = Jet(*(a[mask] for a in jet_of(psi1.level(k), st)))
        ts.append(np.full(j0.psi.size, grid.times[k]))
        lams.append(cb.lam)
        p0s.append(j0.psi)
        phis.append(phi_term(j0, j1, cb, consts, scheme))
        ths.append(theta_sq(j0, j1, cb, consts, scheme.rho))
        a, b = assembled_phi(j0, j1, cb, consts, scheme)
        subs.append(a)
        sups.append(b)
    cat = np.concatenate
    return MSample(cat(ts), cat(lams), cat(p0s), cat(phis), cat(ths), cat(subs), cat(sups))


def choose_M(sample: MSample, consts, T, eps_max=0.1, source="displayed", psi1_sup=None,
             safety=1.5, floor=1e-8, slack="horizon"):
    """Constant making the eps^2 terms of both residuals carry the right sign on the sample."""
    if source == "displayed":
        sub = sample.phi
        sup = sample.phi + consts.p * sample.theta_sq
    elif source == "assembled":
        sub, sup = sample.phi_sub_assembled, sample.phi_super_assembled
    else:
        raise ValueError("source must be 'displayed' or 'assembled'")
    br = _regime_bracket(consts, sample.lam, sample.t, T, slack)
    if np.min(br) <= 0:
        raise BoundDegenerate("slack bracket is not positive on the sample")
    denom = 2 * (1 - consts.p) * sample.psi0**2
    need = np.maximum(np.abs(sub), np.abs(sup)) / denom
    M = max(safety * float(np.max(need)) / float(np.min(br)), floor)
    if psi1_sup is not None:
        # the bounds must stay well defined up to eps_max
        if np.min(sample.psi0) - eps_max * psi1_sup - eps_max**2 * M * T <= 0:
            raise NegativeBase("M too large for eps_max: distorted base turns negative")
    return M


def second_order_coefficients(M, sample: MSample, consts, T, source="displayed", slack="horizon"):
    """eps^2 brackets of the sub and super residuals (without the common prefactor)."""
    br = _regime_bracket(consts, sample.lam, sample.t, T, slack)
    denom = 2 * (1 - consts.p) * sample.psi0**2
    if source == "displayed":
        sub, sup = sample.phi, sample.phi + consts.p * sample.theta_sq
    else:
        sub, sup = sample.phi_sub_assembled, sample.phi_super_assembled
    return M * br + sub / denom, -M * br + sup / denom


# ---------------------------------------------------------------- sandwich

@dataclass
class SubSuperPair:
    M: float
    eps: float
    psi0: PsiSurface
    psi1: PsiSurface
    consts: DistortionConstants
    slack: str = "horizon"

    def __post_init__(self):
        if self.slack not in SLACKS:
            raise ValueError(f"slack must be one of {SLACKS}")

    @property
    def regime(self):
        return "positive" if self.consts.p > 0 else "negative"

    def _slack(self, t):
        # lower base minus this, upper base plus this; for p < 0 v- must sit on the larger base
        T = self.psi0.grid.T
        if self.consts.p > 0:
            return self.eps**2 * self.M * (T - t)
        if self.slack == "elapsed":
            return self.eps**2 * self.M * (-t)
        return -self.eps**2 * self.M * (T - t)

    def bases(self, k):
        t = self.psi0.grid.times[k]
        b = self.psi0.level(k) + self.eps * self.psi1.level(k)
        s = self._slack(t)
        return b - s, b + s

    def values(self, k):
        """(v-, v+) at x = 1 and time level k."""
        lo, hi = self.bases(k)
        if np.min(lo) <= 0 or np.min(hi) <= 0:
            raise NegativeBase(f"sub/super base not positive at level {k}")
        p, q = self.consts.p, self.consts.q
        return lo**q / p, hi**q / p


@dataclass
class SandwichVerdict:
    holds: bool
    violation_fraction: float
    n_points: int
    n_violations: int
    max_excess: float
    violations_by_level: np.ndarray = field(repr=False, default=None)


def sandwich_check(pair: SubSuperPair, psi_full: PsiSurface, width=0.2, rtol=1e-12):
    grid = psi_full.grid
    mask = band_mask(grid, width).reshape(grid.n_z, grid.n_z)
    p, q = pair.consts.p, pair.consts.q
    n_pts = 0
    n_bad = 0
    worst = 0.0
    per_level = np.zeros(grid.n_t + 1, dtype=int)
    for k in range(grid.n_t + 1):
        vm, vp = pair.values(k)
        v = psi_full.level(k) ** q / p
        tol = rtol * np.abs(v)
        below = (vm - v)[mask]
        above = (v - vp)[mask]
        bad = (below > tol[mask]) | (above > tol[mask])
        per_level[k] = int(bad.sum())
        n_bad += per_level[k]
        n_pts += int(mask.sum())
        worst = max(worst, float(np.max(below)), float(np.max(above)))
    frac = n_bad / n_pts
    return SandwichVerdict(n_bad == 0, frac, n_pts, n_bad, max(worst, 0.0), per_level)


def pair_residual_signs(pair: SubSuperPair, model, scheme: CorrelationScheme, width=0.2):
    """Shares of band midpoints where Q^{pi0}[v-] < 0 and where sup_pi Q[v+] > 0."""
    psi0 = pair.psi0
    grid = psi0.grid
    mask = band_mask(grid, width)
    cb = GridCoefficients(*(c[mask] for c in grid_coefficients(model, grid)))
    st = psi0.stencils
    r1, r2, r12 = perturbed_correlations(scheme)
    bad_sub = bad_sup = n = 0
    for k in range(grid.n_t):
        j0, _ = _midpoint_jets(psi0, k, st)
        expo = exposure_pi0(Jet(*(a[mask] for a in j0)), cb, pair.consts, scheme.rho)
        lo0, hi0 = pair.bases(k)
        lo1, hi1 = pair.bases(k + 1)
        for b0, b1, ex in ((lo0, lo1, expo), (hi0, hi1, None)):
            jm = Jet(*(a[mask] for a in jet_of(0.5 * (b0 + b1), st)))
            res = q_over_xp((b1 - b0).ravel()[mask] / grid.dt, jm, ex, cb, pair.consts, r1, r2, r12)
            if ex is not None:
                bad_sub += int(np.sum(res < 0))
            else:
                bad_sup += int(np.sum(res > 0))
        n += int(mask.sum())
    return bad_sub / n, bad_sup / n


# ---------------------------------------------------------------- order regression

@dataclass
class RegressionResult:
    eps: list
    residual_sup: list
    fitted_order: float
    noise_floor: float
    trusted: list


def _midpoint_jets(surface, k, st):
    a = surface.level(k)
    b = surface.level(k + 1)
    return jet_of(0.5 * (a + b), st), (b - a).ravel() / surface.grid.dt


def residual_order_regression(eps_list, psi0: PsiSurface, psi1: PsiSurface, model, consts, scheme,
                              strategy="pi0", width=0.2, stride=1):
    """Sup over the band of Q[(x^p/p)(Psi0 + eps Psi1)^q]/x^p per eps, and the log-log slope.

    The generator is evaluated at Crank-Nicolson midpoints with the same
    difference operators as the solver, so the discrete equations for Psi0
    and Psi1 cancel the order-one and order-eps terms to rounding.
    strategy is 'pi0' or 'zero'.
    """
    if len(eps_list) < 2:
        raise ValueError("need at least two eps values")
    grid = psi0.grid
    coef = grid_coefficients(model, grid)
    mask = band_mask(grid, width)
    cb = GridCoefficients(*(c[mask] for c in coef))
    st = psi0.stencils
    all_eps = [0.0] + list(eps_list)
    sups = np.zeros(len(all_eps))
    for k in range(0, grid.n_t, stride):
        j0, d0 = _midpoint_jets(psi0, k, st)
        j1, d1 = _midpoint_jets(psi1, k, st)
        j0 = Jet(*(a[mask] for a in j0))
        j1 = Jet(*(a[mask] for a in j1))
        d0, d1 = d0[mask], d1[mask]
        if strategy == "pi0":
            expo = exposure_pi0(j0, cb, consts, scheme.rho)
        elif strategy == "zero":
            expo = np.zeros_like(j0.psi)
        else:
            raise ValueError("strategy must be 'pi0' or 'zero'")
        for i, e in enumerate(all_eps):
            r1, r2, r12 = perturbed_correlations(scheme.with_eps(e))
            jb = Jet(*(a + e * b for a, b in zip(j0, j1)))
            res = q_over_xp(d0 + e * d1, jb, expo, cb, consts, r1, r2, r12)
            sups[i] = max(sups[i], float(np.max(np.abs(res))))
    floor = sups[0]
    vals = sups[1:]
    trusted = [bool(v >= 10 * floor) for v in vals]
    use = np.array(trusted) if sum(trusted) >= 2 else np.ones(len(vals), bool)
    x = np.log(np.asarray(eps_list, dtype=float)[use])
    y = np.log(vals[use])
    slope = float(np.polyfit(x, y, 1)[0])
    return RegressionResult(list(map(float, eps_list)), list(map(float, vals)), slope, float(floor), trusted)


def hjb_residual(psi: PsiSurface, model, consts, scheme, width=0.2):
    """Sup over the band of the maximised generator applied to (x^p/p) Psi^q."""
    grid = psi.grid
    coef = grid_coefficients(model, grid)
    mask = band_mask(grid, width)
    cb = GridCoefficients(*(c[mask] for c in coef))
    r1, r2, r12 = perturbed_correlations(scheme)
    worst = 0.0
    for k in range(grid.n_t):
        j, d = _midpoint_jets(psi, k, psi.stencils)
        j = Jet(*(a[mask] for a in j))
        res = q_over_xp(d[mask], j, None, cb, consts, r1, r2, r12)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def verification_report(M, verdicts, regression: RegressionResult, extra=None):
    rep = {
        "M": float(M),
        "sandwich_violation_fraction": {f"{e:g}": float(v.violation_fraction) for e, v in verdicts.items()},
        "residual_sup_by_eps": {f"{e:g}": r for e, r in zip(regression.eps, regression.residual_sup)},
        "fitted_order": regression.fitted_order,
    }
    if extra:
        rep.update(extra)
    return rep
