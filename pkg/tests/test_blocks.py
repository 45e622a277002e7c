import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wemhd import blocks as B
from wemhd import geometry as geo
from wemhd.spectral import TorusGrid, lp_norm_array, outer_self

P = B.DEFAULT_PROFILES
L = geo.build_direction_set()
E3 = next(e for e in L if e.k == (F(0), F(0), F(1)))
TWO_PI = 2 * math.pi


# -- profiles ------------------------------------------------------------------------


def test_profile_normalizations():
    rep = P.normalization_report()
    assert abs(rep["phi_sq"] - 1) < 1e-8
    assert abs(rep["psi_sq"] - 1) < 1e-8
    assert abs(rep["psi_mean"]) < 1e-8
    assert abs(rep["g_sq"] - 1) < 1e-10


def test_phi_is_minus_laplacian_of_Phi():
    s = np.linspace(-0.99, 0.99, 41)
    s1, s2 = np.meshgrid(s, s * 0.7, indexing="ij")
    lap = P.derivative_2d("Phi", 2, 0, s1, s2) + P.derivative_2d("Phi", 0, 2, s1, s2)
    assert np.abs(-lap - P.phi(s1, s2)).max() < 1e-8 * np.abs(P.phi(s1, s2)).max()
    assert np.abs(P.derivative_2d("phi", 0, 0, s1, s2) - P.phi(s1, s2)).max() < 1e-8


def test_gradient_closed_forms_agree():
    s = np.linspace(-0.95, 0.95, 31)
    s1, s2 = np.meshgrid(s, s, indexing="ij")
    g = P.grad_Phi(s1, s2)
    assert np.allclose(g[0], P.derivative_2d("Phi", 1, 0, s1, s2), atol=1e-9)
    assert np.allclose(g[1], P.derivative_2d("Phi", 0, 1, s1, s2), atol=1e-9)
    for which in ("Phi", "phi"):
        for order in (0, 1, 2):
            fast = P.derivative_tensor_2d(which, order, s1, s2)
            slow = np.zeros_like(s1)
            for n1 in range(order + 1):
                slow += math.comb(order, n1) * P.derivative_2d(which, n1, order - n1, s1, s2) ** 2
            assert np.allclose(fast, np.sqrt(slow), rtol=1e-8, atol=1e-6)


def test_high_order_derivatives_available():
    s = np.array([0.1, 0.3])
    for n in range(9):
        assert np.all(np.isfinite(P.derivative_2d("phi", n, 8 - n, s, s)))
        assert np.all(np.isfinite(P.psi(s, n)))
        assert np.all(np.isfinite(P.g(0.5 + 0.1 * s, n)))


def test_profiles_compactly_supported():
    assert P.phi(1.0, 0.0) == 0 and P.Phi(0.8, 0.7) == 0
    assert np.all(P.psi(np.array([-1.0, 1.0, 1.5])) == 0)
    t = np.linspace(0, 0.25, 50)
    assert np.all(P.g(t) == 0)


def test_psi_derivative_matches_finite_difference():
    z = np.linspace(-0.9, 0.9, 37)
    h = 1e-6
    fd = (P.psi(z + h) - P.psi(z - h)) / (2 * h)
    assert np.abs(fd - P.psi(z, 1)).max() < 1e-5 * np.abs(P.psi(z, 1)).max()


# -- temporal blocks ---------------------------------------------------------------------


@pytest.mark.parametrize("tau,sigma", [(1, 1), (2, 1), (1, 3), (3.5, 2), (8, 4)])
def test_cancel_identity(tau, sigma):
    tb = B.temporal_blocks(tau, sigma)
    t = np.linspace(0, 1, 20001)
    assert tb.cancel_residual(t) < 1e-8
    assert np.abs(tb.h(t)).max() <= 1.0
    assert tb.h(np.array([0.0]))[0] == 0.0


def test_cancel_identity_by_finite_difference():
    tb = B.temporal_blocks(2, 3)
    t = np.linspace(0.01, 0.99, 500)
    h = 1e-6
    fd = (tb.h(t + h) - tb.h(t - h)) / (2 * h) / tb.sigma
    assert np.abs(fd - (tb.g(t) ** 2 - 1)).max() < 1e-5


def test_temporal_blocks_vanish_near_zero():
    tb = B.temporal_blocks(2, 2)
    t0 = tb.first_support_time()
    assert t0 > 0
    assert np.all(tb.g(np.linspace(0, t0, 20)) == 0)


def test_temporal_resolution_error():
    with pytest.raises(B.ResolutionError):
        B.temporal_blocks(4, 2, n_time=64)
    B.temporal_blocks(2, 2, n_time=64)
    with pytest.raises(B.BlockError):
        B.temporal_blocks(2, 1.5)


def test_g_lgamma_slopes():
    rep = B.verify_scaling("temporal")
    for row in rep.rows:
        if row.quantity.startswith("dt^0") and row.parameter == "tau":
            assert row.rel_error < 0.05, row
        if row.quantity.startswith("dt^1") and row.parameter == "sigma":
            assert abs(row.fitted_exponent - 1) < 0.07
        if row.quantity == "dt^1 g_(tau) L^1_t" and row.parameter == "tau":
            assert abs(row.fitted_exponent - 0.5) < 0.07


@settings(max_examples=20, deadline=None)
@given(st.floats(1, 16), st.integers(1, 8))
def test_property_cancel_and_h_bound(tau, sigma):
    tb = B.temporal_blocks(tau, sigma)
    t = np.linspace(0, 1, 4001)
    assert tb.cancel_residual(t) < 1e-8
    assert np.abs(tb.h(t)).max() <= 1.0


# -- Mikado blocks ---------------------------------------------------------------------------


def test_mikado_e3_divergence_identities_on_grid():
    g = TorusGrid(32, 8)
    b = B.mikado_block(E3, 0.25, TWO_PI * 8, g, min_cells=0.1)
    res = b.grid_identity_residuals()
    assert res["div_W"] < 1e-10 and res["div_WW"] < 1e-10


@pytest.mark.parametrize("index", [0, 3, 7, 14])
def test_mikado_resolved_identities(index):
    res = B.verify_block_identities(L[index], "I", r=0.25, lam=TWO_PI * 8)
    assert res["curl_curl"] < 1e-8
    assert res["div_W"] < 1e-10 and res["div_WW"] < 1e-10


def test_mikado_grid_curl_curl_converges_with_resolution():
    errs = []
    for n in (32, 64):
        b = B.mikado_block(E3, 1.0, TWO_PI, TorusGrid(n, 8), min_cells=1.0)
        errs.append(b.grid_identity_residuals()["curl_curl"])
    assert errs[1] < errs[0] / 4


def test_mikado_l2_norm_independent_of_r():
    vals = [B._mikado_norm(P, "phi", 0, 2.0, r, TWO_PI * 32, 3) for r in (1 / 4, 1 / 8, 1 / 16, 1 / 32)]
    assert max(vals) / min(vals) < 1.05


def test_mikado_sampled_mean_square_is_one():
    g = TorusGrid(32, 8)
    b = B.mikado_block(L[4], 0.25, TWO_PI * 4, g, min_cells=0.5)
    assert abs(np.mean(b.profile_square()) - 1) < 1e-13
    assert b.normalization > 0
    assert b.W().shape == (3,) + g.shape
    assert np.allclose(b.Wc(), b.Phi[None] * b.k[:, None, None, None] / (TWO_PI * 4 * 3) ** 2)


def test_mikado_errors():
    g = TorusGrid(32, 8)
    with pytest.raises(B.ResolutionError):
        B.mikado_block(E3, 0.25, TWO_PI * 8, g)
    with pytest.raises(B.BlockError):
        B.mikado_block(E3, 0.3, TWO_PI * 8, g, min_cells=0.1)
    with pytest.raises(B.BlockError):
        B.mikado_block(E3, 0.25, 7.0, g, min_cells=0.1)


def test_shift_selection_gives_disjoint_supports():
    g = TorusGrid(32, 8)
    dirs, blocks = B.build_blocks(L, "I", TWO_PI * 8, 1 / 8, g, min_cells=0.1)
    for i, a in enumerate(blocks):
        for b in blocks[i + 1:]:
            assert not np.any(a.W() * b.W())
    again, _ = B.build_blocks(L, "I", TWO_PI * 8, 1 / 8, g, min_cells=0.1)
    assert [e.shift for e in again] == [e.shift for e in dirs]


def test_shift_selection_reports_impossible_packing():
    with pytest.raises(B.ShiftSelectionError):
        B.select_shifts(L, TWO_PI * 2, 0.5, TorusGrid(32, 8))


# -- jets ------------------------------------------------------------------------------------


@pytest.mark.parametrize("index", [0, 5, 11])
def test_jet_resolved_identities(index):
    res = B.verify_block_identities(L[index], "II", r=0.25, lam=TWO_PI * 8, ell=0.5)
    assert res["div_W_plus_Wtilde"] < 1e-8
    assert res["curl_curl"] < 1e-8


def test_jet_errors():
    g = TorusGrid(32, 8)
    with pytest.raises(B.BlockError):
        B.jet_block(E3, 0.25, 0.05, 4.0, TWO_PI * 8, g, min_cells=0.1)
    with pytest.raises(B.BlockError):
        B.jet_block(E3, 0.25, 0.5, -1.0, TWO_PI * 8, g, min_cells=0.1)


def test_jet_analytic_time_derivative():
    g = TorusGrid(16, 8)
    b = B.jet_block(L[2], 0.5, 0.5, 1.0, TWO_PI * 2, g, min_cells=0.5)
    t, h = 0.3, 1e-6
    fd = (b.psi_at(t + h) - b.psi_at(t - h)) / (2 * h)
    exact = b.phase_speed * b.psi_at(t, 1)
    assert np.abs(fd - exact).max() < 1e-6 * np.abs(exact).max()
    field = b.field("W")
    assert field.time_derivative_mode == "analytic"
    assert np.allclose(field.time_derivative(3), b.dW(3))


def test_jet_constant_translation_preserves_norm():
    g = TorusGrid(32, 8)
    b = B.jet_block(L[0], 0.25, 0.5, 4.0, TWO_PI * 4, g, min_cells=0.5)
    norms = [lp_norm_array(b.W(j), g, 2) for j in range(g.n_time)]
    assert max(norms) > 0


def test_jet_r_slopes():
    rep = B.verify_scaling("jet")
    for row in rep.rows:
        if row.quantity.startswith("dt^0 W_k") and row.parameter == "r":
            assert row.rel_error < 0.07, row


def test_jet_time_derivative_ratio_scales_like_lam_r_mu_over_ell():
    ratios = []
    for lam_n, r, ell, mu in [(8, 1 / 4, 1 / 2, 4.0), (16, 1 / 8, 1 / 4, 2.0), (32, 1 / 8, 1 / 8, 8.0),
                              (16, 1 / 16, 1 / 2, 1.0)]:
        lam = TWO_PI * lam_n
        speed = lam * r * 3 * mu
        ratio = B._psi_norm(P, 1, 2.0, ell, speed) / B._psi_norm(P, 0, 2.0, ell, speed)
        ratios.append(ratio / (lam * r * mu / ell))
    assert max(ratios) / min(ratios) < 1.2


# -- scaling report ------------------------------------------------------------------------------


def test_full_scaling_report_within_ten_percent():
    rep = B.verify_scaling()
    assert rep.passed(0.10), rep.failures(0.10)
    text = rep.to_csv()
    assert text.splitlines()[0] == ("lemma,quantity,parameter,predicted_exponent,fitted_exponent,"
                                    "rel_error")
    lemmas = {r.lemma for r in rep.rows}
    assert lemmas == {"mikado", "jet", "temporal"}
    assert all(r.points >= 4 for r in rep.rows)


def test_scaling_key_examples():
    rows = {(r.lemma, r.quantity, r.parameter): r for r in B.verify_scaling("mikado").rows}
    assert abs(rows[("mikado", "grad^0 phi_k L^1", "r")].fitted_exponent - 1) < 0.07
    assert abs(rows[("mikado", "grad^1 W_k L^2", "lambda")].fitted_exponent - 1) < 0.05


def test_unknown_family():
    with pytest.raises(B.BlockError):
        B.verify_scaling("nope")


def test_outer_self_of_mikado_is_shear():
    g = TorusGrid(16, 8)
    b = B.mikado_block(E3, 1.0, TWO_PI, g, min_cells=0.5)
    WW = outer_self(b.W())
    assert np.allclose(WW[2], b.phi**2)
    assert np.all(WW[:2] == 0)
