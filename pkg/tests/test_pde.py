import warnings

import numpy as np
import pytest

from volfactor.closed_form import psi0_tilde, psi1_tilde
from volfactor.errors import OutOfDomain, StabilityFailure
from volfactor.model import ChackoViceira, CorrelationScheme, distortion_constants, perturbed_correlations
from volfactor.pde import (GridCoefficients, Grid2D, Jet, bracket, cn_march, diagonal_error_curves, f1_source,
                           grid_coefficients, jet_of, linear_operator, solve_psi0_2d, solve_psi0_tilde_1d,
                           solve_psi1_2d, solve_psi1_tilde_1d, solve_psi_full, stencils_1d, stencils_2d)
from volfactor.verifier import apply_Q


@pytest.fixture(scope="module")
def medium(model, consts, scheme):
    grid = Grid2D(z_max=100.0, n_z=81, n_t=160)
    psi0 = solve_psi0_2d(model, consts, 0.5, grid)
    psi1 = solve_psi1_2d(model, consts, scheme, psi0)
    return grid, psi0, psi1


def test_grid_geometry():
    g = Grid2D(z_max=100.0, n_z=201, n_t=400)
    assert g.z_box == pytest.approx(125.0)
    assert g.dz == pytest.approx(125.0 / 200)
    assert g.dt == pytest.approx(1 / 400)
    assert g.z[-1] == pytest.approx(125.0)
    assert g.inner.sum() == 161


def test_stencils_exact_on_quadratics():
    n, h = 11, 0.3
    x = h * np.arange(n)
    d1, d2 = stencils_1d(n, h)
    f = 2 * x**2 - x + 3
    np.testing.assert_allclose(d1 @ f, 4 * x - 1, atol=1e-12)
    np.testing.assert_allclose(d2 @ f, np.full(n, 4.0), atol=1e-10)
    st = stencils_2d(n, h)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    g = (X1 * X2 + X1**2).ravel()
    np.testing.assert_allclose(st.D12 @ g, 1.0, atol=1e-10)
    np.testing.assert_allclose(st.D11 @ g, 2.0, atol=1e-10)


def test_psi0_terminal_and_bounds(small_psi0):
    np.testing.assert_array_equal(small_psi0.level(small_psi0.grid.n_t), 1.0)
    assert small_psi0.values.min() > 0
    assert small_psi0.values.max() <= 1.0 + 1e-12


def test_psi0_diagonal_matches_closed_form(medium, riccati):
    _, psi0, _ = medium
    z, d = psi0.diagonal(0)
    assert np.max(np.abs(d / psi0_tilde(0.0, z, riccati) - 1)) <= 1e-3


def test_zero_sharpe_ratio_gives_one(consts):
    m = ChackoViceira(mu_bar=0.0)
    s = solve_psi0_2d(m, consts, 0.5, Grid2D(n_z=21, n_t=20))
    np.testing.assert_allclose(s.values, 1.0, atol=1e-14)


def test_psi1_terminal_and_zero_slopes(small_psi0, small_psi1, model, consts):
    np.testing.assert_array_equal(small_psi1.level(small_psi1.grid.n_t), 0.0)
    flat = solve_psi1_2d(model, consts, CorrelationScheme(0.5, 0.0, 0.0, 0.0), small_psi0)
    np.testing.assert_array_equal(flat.values, 0.0)


@pytest.mark.xfail(strict=True, reason=(
    "the diagonal forcing fbar1 replaces each partial derivative of Psi0 by A Psi0, while on the "
    "diagonal of exp(A z + B) each partial carries A Psi0 / 2 and the cross derivative is not "
    "determined by diagonal data; the 2-D surface and the closed form differ by about 58% at every "
    "resolution (41, 81 and 201 nodes), so the gap is structural and not discretisation error"))
def test_psi1_diagonal_matches_closed_form(medium, riccati, correction):
    _, _, psi1 = medium
    z, d = psi1.diagonal(0)
    exact = psi1_tilde(0.0, z, riccati, correction)
    assert np.max(np.abs(d - exact)) <= 5e-3 * np.max(np.abs(exact))


def test_psi1_diagonal_matches_one_dimensional_solve(medium, model, consts, scheme):
    """The locked-factor dynamics keep z1 = z2, so the diagonal obeys a 1-D equation with the 2-D forcing."""
    grid, psi0, psi1 = medium
    st = psi0.stencils
    coef = grid_coefficients(model, grid)
    idx = np.arange(grid.n_z) * (grid.n_z + 1)
    one_d = solve_psi0_tilde_1d(model, consts, 0.5, grid.z[grid.inner], n_t=grid.n_t, pad=grid.pad)
    assert one_d.z.size == grid.n_z

    def source(n):
        mid = 0.5 * (psi0.level(n) + psi0.level(n + 1))
        return f1_source(jet_of(mid, st), coef, consts, scheme)[idx]

    s1 = solve_psi1_tilde_1d(model, consts, 0.5, one_d, source=source)
    _, d = psi1.diagonal(0)
    # worst near z = 0 where the corner sees different one-sided stencils, ~1e-5 far from it;
    # either way two orders below the gap to the closed form above
    assert np.max(np.abs(s1.at_level(0) - d)) <= 1e-2 * np.max(np.abs(d))


def test_full_solution_at_zero_eps_is_psi0(small_grid, small_psi0, model, consts, scheme):
    f = solve_psi_full(model, consts, scheme.with_eps(0.0), small_grid)
    np.testing.assert_allclose(f.values, small_psi0.values, rtol=1e-12)


def test_full_solution_terminal_and_comparison(small_grid, model, consts, scheme):
    f = solve_psi_full(model, consts, scheme, small_grid)
    np.testing.assert_array_equal(f.level(small_grid.n_t), 1.0)
    assert f.values.min() > 0 and f.values.max() <= 1.0 + 1e-12
    assert f.diagnostics.max_corrector_change < 1e-6


def test_positive_exponent_surface_above_one(model):
    c = distortion_constants(0.2, 0.5)
    f = solve_psi_full(model, c, CorrelationScheme(0.5, 0.0, -0.5, -1.0, 0.1), Grid2D(n_z=31, n_t=40))
    assert f.values.min() >= 1.0 - 1e-12


def test_bracket_vanishes_at_base(small_psi0, model, consts):
    grid = small_psi0.grid
    coef = grid_coefficients(model, grid)
    j = jet_of(small_psi0.level(0), small_psi0.stencils)
    np.testing.assert_allclose(bracket(j.psi, j.d1, j.d2, coef, consts, 0.5, 0.5, 1.0), 0.0, atol=1e-15)


def test_bracket_matches_direct_substitution(model, rng):
    """Maximised generator of (x^p/p) Psi^q, by finite differences, against the Psi-equation.

    The trial Psi is smooth and arbitrary; the identity holds pointwise, which pins the factor
    2 on the cross term of the nonlinear bracket.
    """
    consts = distortion_constants(-1.0, 0.5)
    scheme = CorrelationScheme(0.5, 0.3, -0.5, -1.0, 0.2)
    r1, r2, r12 = perturbed_correlations(scheme)
    a, b, c, d = 0.01, -0.02, 3e-4, 0.05

    def psi(t, z1, z2):
        return np.exp(a * z1 + b * z2 + c * z1 * z2 + d * t)

    def v(t, x, z1, z2):
        return x**consts.p / consts.p * psi(t, z1, z2) ** consts.q

    for t, z1, z2 in [(0.3, 12.0, 9.0), (0.7, 30.0, 33.0), (0.1, 5.0, 20.0)]:
        P = psi(t, z1, z2)
        g1, g2 = (a + c * z2) * P, (b + c * z1) * P
        h11, h22, h12 = (a + c * z2) ** 2 * P, (b + c * z1) ** 2 * P, (c + (a + c * z2) * (b + c * z1)) * P
        lam = float(model.lam(z1, z2))
        b1, b2 = float(model.beta(z1)), float(model.beta(z2))
        coef = GridCoefficients(*(np.array([v_]) for v_ in (z1, z2, lam, 26 - z1, 26 - z2, b1, b2)))
        lin = (d * P + (26 - z1) * g1 + (26 - z2) * g2 + 0.5 * b1**2 * h11 + 0.5 * b2**2 * h22
               + r12 * b1 * b2 * h12 + consts.gamma / (2 * consts.q) * lam**2 * P
               + consts.gamma * lam * (r1 * b1 * g1 + r2 * b2 * g2))
        full = lin + bracket(np.array([P]), np.array([g1]), np.array([g2]), coef, consts, r1, r2, r12)[0]
        x = 1.7
        sigma = float(model.sigma(z1, z2))
        # maximiser in amount invested: sigma pi / x = (lam Psi + q sum rho_i beta_i Psi_i) / ((1-p) Psi)
        expo = (lam * P + consts.q * (r1 * b1 * g1 + r2 * b2 * g2)) / ((1 - consts.p) * P)
        pi = expo * x / sigma
        hjb = apply_Q(pi, v, (t, x, z1, z2), model, scheme, rel_step=3e-3)
        expected = x**consts.p * consts.q / consts.p * P ** (consts.q - 1) * full
        assert hjb == pytest.approx(expected, rel=1e-7)


def test_psi0_tilde_1d_matches_closed_form(model, consts, riccati):
    s = solve_psi0_tilde_1d(model, consts, 0.5)
    assert s.z_report.size == 401
    np.testing.assert_array_equal(s.at_level(s.times.size - 1), 1.0)
    assert np.max(np.abs(s.at_level(0) / psi0_tilde(0.0, s.z_report, riccati) - 1)) <= 1e-3


def test_psi1_tilde_1d_matches_closed_form(model, consts, riccati, correction):
    s0 = solve_psi0_tilde_1d(model, consts, 0.5)
    s1 = solve_psi1_tilde_1d(model, consts, 0.5, s0, fbar=correction.fbar1)
    np.testing.assert_array_equal(s1.at_level(s1.times.size - 1), 0.0)
    exact = psi1_tilde(0.0, s1.z_report, riccati, correction)
    assert np.max(np.abs(s1.at_level(0) - exact)) <= 1e-3 * np.max(np.abs(exact))


def test_frozen_factor_limit(consts):
    # beta_bar = 0, m = 0: dz = -z dt, so Psi = exp(k (1 - e^-(T-t)) z) with k = Gamma lambda_bar^2 / q
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m0 = ChackoViceira(m=0.0, beta_bar=0.0)
    s = solve_psi0_tilde_1d(m0, consts, 0.5)
    k = consts.gamma / consts.q * m0.lambda_bar**2
    for n in (0, 200):
        tau = 1.0 - s.times[n]
        exact = np.exp(k * (1 - np.exp(-tau)) * s.z_report)
        assert np.max(np.abs(s.at_level(n) / exact - 1)) <= 1e-5


def test_error_table(small_grid, small_psi0, small_psi1, model, consts, scheme, tmp_path):
    f = solve_psi_full(model, consts, scheme, small_grid, keep_levels=False)
    tab = diagonal_error_curves(f, small_psi0, small_psi1, 0.1)
    assert tab.z[-1] == pytest.approx(100.0)
    np.testing.assert_allclose(tab.err0 - tab.err1, 0.1 * (tab.psi0_eps_psi1 - tab.psi0) / 0.1 * 1.0, atol=1e-15)
    assert tab.sup_err1 < tab.sup_err0
    path = tmp_path / "diag.csv"
    tab.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "z,psi,psi0,psi0_eps_psi1,err0,err1"
    assert len(lines) == tab.z.size + 1
    assert float(lines[5].split(",")[1]) == tab.psi[4]
    base = solve_psi_full(model, consts, scheme.with_eps(0.0), small_grid, keep_levels=False)
    t0 = diagonal_error_curves(base, small_psi0, small_psi1, 0.0)
    assert t0.sup_err0 < 1e-12 and t0.sup_err1 < 1e-12


def test_surface_interpolation(medium, riccati):
    _, psi0, _ = medium
    assert psi0.interpolate(1.0, 37.3, 52.1) == pytest.approx(1.0)
    v = psi0.interpolate(0.0, 10.0, 10.0)
    assert v == pytest.approx(psi0_tilde(0.0, 10.0, riccati), rel=2e-3)
    with pytest.raises(OutOfDomain):
        psi0.interpolate(0.0, 200.0, 10.0)
    assert np.isfinite(psi0.interpolate(0.0, 200.0, 10.0, clamp=True))


def test_positivity_guard(small_grid, model, consts):
    coef = grid_coefficients(model, small_grid)
    L = linear_operator(coef, stencils_2d(small_grid.n_z, small_grid.dz), consts, 0.5, 0.5, 1.0)
    with pytest.raises(StabilityFailure):
        cn_march(small_grid, L, np.ones(small_grid.n_z**2), upper=0.5)
