import numpy as np
import pytest

from volfactor.errors import BoundDegenerate, NegativeBase, StepTooSmall
from volfactor.model import (CorrelationScheme, DistortionConstants, distortion_constants, factor_coefficients,
                             perturbed_correlations)
from volfactor.pde import GridCoefficients, Jet, grid_coefficients, jet_of, solve_psi0_2d, solve_psi1_2d, solve_psi_full
from volfactor.verifier import (MSample, SubSuperPair, apply_Q, assembled_phi, band_mask, choose_M, exposure_pi0,
                                hjb_residual, pair_residual_signs, phi_term, q_over_xp, residual_order_regression,
                                sample_second_order, sandwich_check, second_order_coefficients, theta_sq,
                                verification_report)

POINT = (0.4, 1.3, 12.0, 17.0)


def test_generator_on_simple_functions(model, scheme):
    t, x, z1, z2 = POINT
    r1, r2, r12 = perturbed_correlations(scheme)
    a1, a2, b1, b2 = (float(c) for c in factor_coefficients(model, z1, z2))
    mu, sig = float(model.mu(z1, z2)), float(model.sigma(z1, z2))
    pi = 0.7
    assert apply_Q(pi, lambda *a: 3.0, POINT, model, scheme) == pytest.approx(0.0, abs=1e-9)
    assert apply_Q(pi, lambda t, x, a, b: x, POINT, model, scheme) == pytest.approx(pi * mu, rel=1e-8)
    assert apply_Q(pi, lambda t, x, a, b: x * x, POINT, model, scheme) == pytest.approx(
        2 * x * pi * mu + pi**2 * sig**2, rel=1e-7)
    assert apply_Q(pi, lambda t, x, a, b: a * b, POINT, model, scheme) == pytest.approx(
        a1 * z2 + a2 * z1 + r12 * b1 * b2, rel=1e-7)
    assert apply_Q(pi, lambda t, x, a, b: x * a, POINT, model, scheme) == pytest.approx(
        pi * mu * z1 + a1 * x + pi * sig * r1 * b1, rel=1e-7)
    assert apply_Q(lambda t, x, a, b: 0.0, lambda t, x, a, b: t, POINT, model, scheme) == pytest.approx(1.0)


def test_generator_rejects_bad_steps(model, scheme):
    with pytest.raises(StepTooSmall):
        apply_Q(0.1, lambda *a: 1.0, POINT, model, scheme, steps=[0.0, 1e-3, 1e-3, 1e-3])
    with pytest.raises(StepTooSmall):
        apply_Q(0.1, lambda *a: 1.0, POINT, model, scheme, rel_step=1e-9)


def _point_jet(model, z1, z2, vals):
    lam = float(model.lam(z1, z2))
    a1, a2, b1, b2 = (float(c) for c in factor_coefficients(model, z1, z2))
    coef = GridCoefficients(*(np.array([v]) for v in (z1, z2, lam, a1, a2, b1, b2)))
    return coef, Jet(*(np.array([v]) for v in vals))


def test_supremum_dominates_fixed_strategies(model, consts):
    coef, jet = _point_jet(model, 12.0, 17.0, (0.8, -0.01, -0.02, 1e-4, 2e-4, -5e-5))
    best = q_over_xp(-0.03, jet, None, coef, consts, 0.5, 0.45, 0.9)
    for e in np.linspace(-1, 2, 31):
        assert q_over_xp(-0.03, jet, np.array([e]), coef, consts, 0.5, 0.45, 0.9) <= best + 1e-15


def test_jet_generator_matches_finite_differences(model):
    consts = distortion_constants(-1.0, 0.5)
    scheme = CorrelationScheme(0.5, 0.2, -0.5, -1.0, 0.1)
    r1, r2, r12 = perturbed_correlations(scheme)
    a, b, c, d = 0.01, -0.02, 3e-4, 0.05
    t, x, z1, z2 = POINT
    P = np.exp(a * z1 + b * z2 + c * z1 * z2 + d * t)
    u1, u2 = a + c * z2, b + c * z1
    coef, jet = _point_jet(model, z1, z2, (P, u1 * P, u2 * P, u1 * u1 * P, u2 * u2 * P, (c + u1 * u2) * P))
    expo = 0.37
    sig = float(model.sigma(z1, z2))

    def v(t, x, z1, z2):
        return x**consts.p / consts.p * np.exp(a * z1 + b * z2 + c * z1 * z2 + d * t) ** consts.q

    fd = apply_Q(expo * x / sig, v, POINT, model, scheme, rel_step=3e-3)
    jet_value = x**consts.p * q_over_xp(d * P, jet, np.array([expo]), coef, consts, r1, r2, r12)[0]
    assert jet_value == pytest.approx(fd, rel=1e-7)


def test_second_order_terms_vanish_without_perturbation(model, consts):
    coef, j0 = _point_jet(model, 12.0, 17.0, (0.8, -0.01, -0.02, 1e-4, 2e-4, -5e-5))
    _, j1 = _point_jet(model, 12.0, 17.0, (0.0,) * 6)
    flat = CorrelationScheme(0.5, 0.0, 0.0, 0.0)
    assert phi_term(j0, j1, coef, consts, flat)[0] == 0.0
    assert theta_sq(j0, j1, coef, consts, 0.5)[0] == 0.0
    assert assembled_phi(j0, j1, coef, consts, flat) == (0.0, 0.0)


def test_theta_nonnegative_and_symmetric(model, consts, rng):
    for _ in range(20):
        z1, z2 = rng.uniform(1, 100, 2)
        v0, v1 = rng.normal(size=6), rng.normal(size=6)
        coef, j0 = _point_jet(model, z1, z2, v0)
        _, j1 = _point_jet(model, z1, z2, v1)
        th = theta_sq(j0, j1, coef, consts, 0.5)[0]
        assert th >= 0
        swap = [0, 2, 1, 4, 3, 5]
        coef_s, j0s = _point_jet(model, z2, z1, v0[swap])
        _, j1s = _point_jet(model, z2, z1, v1[swap])
        assert theta_sq(j0s, j1s, coef_s, consts, 0.5)[0] == pytest.approx(th, rel=1e-12)


def test_assembled_terms_are_second_eps_derivative(small_psi0, small_psi1, model, consts, scheme):
    """Direct second difference in eps of the generator, against the assembled Phi (and the displayed one)."""
    g = small_psi0.grid
    coef = grid_coefficients(model, g)
    st = small_psi0.stencils
    k = 40
    j0, j1 = jet_of(small_psi0.level(k), st), jet_of(small_psi1.level(k), st)
    d0 = (small_psi0.level(k + 1) - small_psi0.level(k - 1)).ravel() / (2 * g.dt)
    d1 = (small_psi1.level(k + 1) - small_psi1.level(k - 1)).ravel() / (2 * g.dt)
    s1, s2, s12 = scheme.slopes

    def r(e, expo):
        jb = Jet(*(a + e * b for a, b in zip(j0, j1)))
        return q_over_xp(d0 + e * d1, jb, expo, coef, consts, scheme.rho + e * s1, scheme.rho + e * s2, 1 + e * s12)

    sub, sup = assembled_phi(j0, j1, coef, consts, scheme)
    phi = phi_term(j0, j1, coef, consts, scheme)
    th = theta_sq(j0, j1, coef, consts, scheme.rho)
    p, q, P = consts.p, consts.q, j0.psi
    pref = q / p * P ** (q - 1) / (2 * (1 - p) * P**2)
    h = 1e-3
    for expo, assembled, displayed in ((exposure_pi0(j0, coef, consts, scheme.rho), sub, phi),
                                       (None, sup, phi + p * th)):
        c2 = (r(h, expo) - 2 * r(0.0, expo) + r(-h, expo)) / (2 * h * h)
        scale = np.max(np.abs(c2))
        assert np.max(np.abs(c2 - pref * assembled)) <= 1e-4 * scale
        # the displayed combination differs at order one
        assert np.max(np.abs(c2 - pref * displayed)) >= 0.1 * scale


def test_band_mask(small_grid):
    m = band_mask(small_grid, 0.2).reshape(small_grid.n_z, small_grid.n_z)
    assert m[0, 0] and m[32, 32] and not m[33, 33]
    # half-width 20 on a 3.125 spacing
    assert m[0, 6] and not m[0, 7]
    np.testing.assert_array_equal(m, m.T)


@pytest.fixture(scope="module")
def sample(small_psi0, small_psi1, model, consts, scheme):
    return sample_second_order(small_psi0, small_psi1, model, consts, scheme)


def test_choose_M_gives_signed_coefficients(sample, consts):
    for source in ("displayed", "assembled"):
        M = choose_M(sample, consts, 1.0, source=source)
        sub, sup = second_order_coefficients(M, sample, consts, 1.0, source)
        assert np.all(sub >= 0) and np.all(sup <= 0)
        M_el = choose_M(sample, consts, 1.0, source=source, slack="elapsed")
        sub, sup = second_order_coefficients(M_el, sample, consts, 1.0, source, slack="elapsed")
        assert np.all(sub >= 0) and np.all(sup <= 0)
    with pytest.raises(ValueError):
        choose_M(sample, consts, 1.0, source="other")


def test_choose_M_floor_and_guards(sample, consts):
    zero = MSample(*(np.zeros(3) if i in (3, 4, 5, 6) else np.ones(3) for i in range(7)))
    assert choose_M(zero, consts, 1.0) == 1e-8
    weird = DistortionConstants(0.5, -100.0, 1.0)
    with pytest.raises(BoundDegenerate):
        choose_M(sample, weird, 1.0)
    with pytest.raises(NegativeBase):
        choose_M(sample, consts, 1.0, eps_max=10.0, psi1_sup=1.0)


def test_sandwich_trivial_at_zero_eps(small_grid, small_psi0, small_psi1, consts):
    pair = SubSuperPair(1.0, 0.0, small_psi0, small_psi1, consts)
    v = sandwich_check(pair, small_psi0)
    assert v.holds and v.n_violations == 0
    assert pair.regime == "negative"


def test_sandwich_without_slack_fails(small_grid, small_psi0, small_psi1, model, consts, scheme):
    full = solve_psi_full(model, consts, scheme, small_grid)
    v = sandwich_check(SubSuperPair(0.0, 0.1, small_psi0, small_psi1, consts), full)
    assert not v.holds and v.violation_fraction > 0.5


def test_negative_exponent_slack_shapes(small_grid, small_psi0, small_psi1, consts):
    elapsed = SubSuperPair(5.0, 0.1, small_psi0, small_psi1, consts, slack="elapsed")
    horizon = SubSuperPair(5.0, 0.1, small_psi0, small_psi1, consts)
    n = small_grid.n_t
    lo, hi = elapsed.bases(0)
    np.testing.assert_array_equal(lo, hi)
    lo, hi = horizon.bases(n)
    np.testing.assert_array_equal(lo, hi)
    for pair, k in ((elapsed, n), (horizon, 0)):
        lo, hi = pair.bases(k)
        # with p < 0 the larger base gives the smaller value, so v- uses the larger one
        assert np.all(lo > hi)
        vm, vp = pair.values(k)
        assert np.all(vm < vp)
    with pytest.raises(ValueError):
        SubSuperPair(5.0, 0.1, small_psi0, small_psi1, consts, slack="other")


def test_negative_exponent_sandwich_by_slack(small_grid, small_psi0, small_psi1, sample, model, consts, scheme):
    full = solve_psi_full(model, consts, scheme, small_grid)
    verdict = {}
    for slack in ("horizon", "elapsed"):
        M = choose_M(sample, consts, 1.0, slack=slack)
        verdict[slack] = sandwich_check(SubSuperPair(M, 0.1, small_psi0, small_psi1, consts, slack), full)
    assert verdict["horizon"].holds
    M_asm = choose_M(sample, consts, 1.0, source="assembled")
    assert sandwich_check(SubSuperPair(M_asm, 0.1, small_psi0, small_psi1, consts), full).holds
    M = choose_M(sample, consts, 1.0)
    signs = {s: pair_residual_signs(SubSuperPair(M, 0.1, small_psi0, small_psi1, consts, s), model, scheme)
             for s in ("horizon", "elapsed")}
    assert signs["horizon"] == (0.0, 0.0)
    assert signs["elapsed"][1] > 0.5
    # the elapsed slack is zero at t = 0 and its time derivative pushes the residuals the wrong way
    assert verdict["elapsed"].violation_fraction > 0.1


def test_sandwich_positive_exponent(small_grid, model, scheme):
    c = distortion_constants(0.2, 0.5)
    p0 = solve_psi0_2d(model, c, 0.5, small_grid)
    p1 = solve_psi1_2d(model, c, scheme, p0)
    full = solve_psi_full(model, c, scheme, small_grid)
    s = sample_second_order(p0, p1, model, c, scheme)
    for source in ("displayed", "assembled"):
        pair = SubSuperPair(choose_M(s, c, 1.0, source=source), 0.1, p0, p1, c)
        assert pair.regime == "positive"
        assert sandwich_check(pair, full).holds


def test_residual_regression(small_psi0, small_psi1, model, consts, scheme):
    r = residual_order_regression([0.025, 0.05, 0.1], small_psi0, small_psi1, model, consts, scheme)
    assert abs(r.fitted_order - 2.0) < 0.05
    assert all(r.trusted) and r.noise_floor < 1e-10
    z = residual_order_regression([0.025, 0.05, 0.1], small_psi0, small_psi1, model, consts, scheme,
                                  strategy="zero")
    assert abs(z.fitted_order) < 0.05
    with pytest.raises(ValueError):
        residual_order_regression([0.1], small_psi0, small_psi1, model, consts, scheme)


def test_hjb_residual_of_full_solution(small_grid, model, consts, scheme, small_psi0):
    full = solve_psi_full(model, consts, scheme, small_grid)
    assert hjb_residual(full, model, consts, scheme) < 1e-8
    # Psi0 does not solve the perturbed equation
    assert hjb_residual(small_psi0, model, consts, scheme) > 1e-4


def test_report_layout(small_psi0, small_psi1, model, consts, scheme):
    r = residual_order_regression([0.05, 0.1], small_psi0, small_psi1, model, consts, scheme)
    v = sandwich_check(SubSuperPair(1.0, 0.0, small_psi0, small_psi1, consts), small_psi0)
    rep = verification_report(2.0, {0.0: v}, r, {"note": 1})
    assert rep["M"] == 2.0 and rep["note"] == 1
    assert set(rep["residual_sup_by_eps"]) == {"0.05", "0.1"}
    assert rep["sandwich_violation_fraction"] == {"0": 0.0}
