import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import band_limited
from wemhd import spectral as sp
from wemhd.spectral import (ScalarField, SpaceTimeField, SpectralVectorField, SymTensorField,
                            TorusGrid)

G = TorusGrid(32, 16)
TWO_PI = 2 * np.pi


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def mode(grid, f):
    x, y, z = grid.coords()
    return np.broadcast_to(f(x, y, z), grid.shape).astype(float)


# -- grid ---------------------------------------------------------------------


@pytest.mark.parametrize("n", [6, 7, 31])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(ValueError):
        TorusGrid(n)


def test_grid_frequencies_are_two_pi_integers():
    kx = G.wavevector[0].ravel()
    assert np.allclose(kx / TWO_PI, np.round(kx / TWO_PI))
    assert set(np.round(kx / TWO_PI).astype(int)) == set(range(-16, 16))


# -- gradient / divergence / curl ---------------------------------------------------


def test_gradient_of_constant():
    f = ScalarField(G, np.full(G.shape, 3.7))
    assert np.abs(sp.gradient(f).data).max() == 0


def test_gradient_single_mode():
    f = ScalarField(G, mode(G, lambda x, y, z: np.sin(TWO_PI * x)))
    grad = sp.gradient(f).data
    assert np.abs(grad[0] - TWO_PI * mode(G, lambda x, y, z: np.cos(TWO_PI * x))).max() < 1e-12
    assert np.abs(grad[1:]).max() < 1e-12
    assert np.abs(grad.mean(axis=(1, 2, 3))).max() < 1e-14


def test_curl_single_mode():
    v = np.zeros((3,) + G.shape)
    v[1] = mode(G, lambda x, y, z: np.sin(TWO_PI * x))
    c = sp.curl(SpectralVectorField(G, v)).data
    expect = TWO_PI * mode(G, lambda x, y, z: np.cos(TWO_PI * x))
    assert np.abs(c[2] - expect).max() < 1e-12
    assert np.abs(c[:2]).max() < 1e-12


def test_curl_of_gradient_vanishes(rng):
    for _ in range(5):
        f = ScalarField(G, band_limited(G, None, rng))
        g = sp.gradient(f)
        assert sp.lp_norm(sp.curl(g), 2) < 1e-10 * sp.lp_norm(g, 2)


def test_div_of_curl_vanishes(rng):
    for _ in range(5):
        v = SpectralVectorField(G, band_limited(G, 3, rng))
        c = sp.curl(v)
        assert sp.lp_norm(sp.divergence(c), 2) < 1e-10 * sp.lp_norm(c, 2)
        assert c.divergence_free


def test_curl_curl_identity(rng):
    v = SpectralVectorField(G, band_limited(G, 3, rng))
    lhs = sp.curl_curl(v).data
    rhs = sp.gradient(sp.divergence(v)).data - sp.laplacian(v).data
    assert rel(lhs, rhs) < 1e-10


# -- fractional Laplacian ---------------------------------------------------------


def test_frac_laplacian_eigenfunction():
    f = ScalarField(G, mode(G, lambda x, y, z: np.sin(TWO_PI * x)))
    out = sp.frac_laplacian(f, 1).data
    assert np.abs(out - TWO_PI**2 * f.data).max() < 1e-9


def test_frac_laplacian_alpha_zero_is_identity_on_mean_zero(rng):
    f = ScalarField(G, band_limited(G, None, rng))
    assert rel(sp.frac_laplacian(f, 0).data, f.data) < 1e-13


def test_frac_laplacian_seven_quarters():
    f = ScalarField(G, mode(G, lambda x, y, z: np.cos(TWO_PI * (x + y))))
    out = sp.frac_laplacian(f, 1.75).data
    factor = (8 * np.pi**2) ** 1.75
    assert rel(out, factor * f.data) < 1e-10


def test_frac_laplacian_sign_and_domain():
    f = ScalarField(G, mode(G, lambda x, y, z: np.sin(TWO_PI * z)))
    assert rel(sp.frac_laplacian(f, 1, sign=-1).data, -(TWO_PI**2) * f.data) < 1e-12
    with pytest.raises(sp.SpectralError):
        sp.frac_laplacian(f, -0.5)


# -- projections -----------------------------------------------------------------------


def test_leray_kills_gradients(rng):
    g = sp.gradient(ScalarField(G, band_limited(G, None, rng)))
    assert sp.lp_norm(sp.leray_project(g), 2) < 1e-12 * sp.lp_norm(g, 2)


def test_leray_fixes_divergence_free(rng):
    v = sp.curl(SpectralVectorField(G, band_limited(G, 3, rng)))
    assert rel(sp.leray_project(v).data, v.data) < 1e-12


def test_leray_idempotent_and_commutes_with_curl(rng):
    v = SpectralVectorField(G, band_limited(G, 3, rng))
    p = sp.leray_project(v)
    assert rel(sp.leray_project(p).data, p.data) < 1e-12
    assert rel(sp.curl(p).data, sp.curl(v).data) < 1e-10
    assert sp.lp_norm(sp.divergence(p), 2) < 1e-10 * sp.lp_norm(p, 2)


def test_project_nonzero(rng):
    c = ScalarField(G, np.full(G.shape, 2.0))
    assert np.abs(sp.project_nonzero(c).data).max() < 1e-15
    f = ScalarField(G, band_limited(G, None, rng))
    assert rel(sp.project_nonzero(f).data, f.data) < 1e-14
    shifted = ScalarField(G, f.data + 5.0)
    assert rel(sp.project_nonzero(shifted).data, f.data) < 1e-13
    once = sp.project_nonzero(shifted)
    assert rel(sp.project_nonzero(once).data, once.data) < 1e-12


# -- inverse divergence ----------------------------------------------------------------


def test_inverse_divergence_zero():
    out = sp.inverse_divergence(SpectralVectorField(G, np.zeros((3,) + G.shape)))
    assert np.abs(out.data).max() == 0


def test_inverse_divergence_single_mode():
    v = np.zeros((3,) + G.shape)
    v[1] = mode(G, lambda x, y, z: np.sin(TWO_PI * x))
    R = sp.inverse_divergence(SpectralVectorField(G, v))
    xy = sp.SYM_INDEX[(0, 1)]
    expect = -mode(G, lambda x, y, z: np.cos(TWO_PI * x)) / TWO_PI
    assert np.abs(R.data[xy] - expect).max() < 1e-14
    others = [c for c in range(6) if c != xy]
    assert np.abs(R.data[others]).max() < 1e-14
    assert np.abs(sp.tensor_divergence(R).data - v).max() < 1e-13


def test_inverse_divergence_round_trip(rng):
    for _ in range(20):
        v = SpectralVectorField(G, band_limited(G, 3, rng))
        R = sp.inverse_divergence(v)
        assert rel(sp.tensor_divergence(R).data, v.data) < 1e-10
        assert np.abs(R.trace()).max() < 1e-10 * np.abs(R.data).max()
        assert R.trace_free


def test_inverse_divergence_rejects_mean():
    v = np.zeros((3,) + G.shape)
    v[0] = 1.0
    with pytest.raises(sp.SpectralError):
        sp.inverse_divergence(SpectralVectorField(G, v))


def test_symmetric_matrix_round_trip(rng):
    t = band_limited(G, 6, rng)
    m = sp.sym_to_matrix(t)
    assert np.array_equal(m, np.swapaxes(m, 0, 1))
    assert np.array_equal(sp.matrix_to_sym(m), t)


@pytest.mark.parametrize("p", [4 / 3, 2, 4])
def test_calderon_zygmund_proxy_flat_in_grid_size(p):
    """``||R curl f||_p / ||f||_p`` stays bounded as the grid is refined."""
    ratios = {}
    for n in (16, 32):
        grid = TorusGrid(n, 8)
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            f = band_limited(grid, 3, rng, kmax=n // 4)
            out = grid.inverse_divergence(grid.curl(f))
            worst = max(worst, sp.lp_norm_array(out, grid, p) / sp.lp_norm_array(f, grid, p))
        ratios[n] = worst
    assert ratios[32] < 1.2 * ratios[16] + 1e-12
    assert ratios[16] < 5.0


# -- norms --------------------------------------------------------------------------------


def test_l2_of_sine():
    f = ScalarField(G, mode(G, lambda x, y, z: np.sin(TWO_PI * x)))
    assert abs(sp.lp_norm(f, 2) - 1 / np.sqrt(2)) < 1e-10


@pytest.mark.parametrize("p", [1, 1.5, 2, 3, np.inf])
def test_constant_one_has_unit_norm(p):
    assert abs(sp.lp_norm(ScalarField(G, np.ones(G.shape)), p) - 1) < 1e-14


def test_norm_rejects_small_p():
    with pytest.raises(sp.SpectralError):
        sp.lp_norm(ScalarField(G, np.ones(G.shape)), 0.5)


def test_parseval(rng):
    f = band_limited(G, None, rng)
    h = G.fft(f)
    weight = np.full(h.shape[-1], 2.0)
    weight[0] = weight[-1] = 1.0
    spectral = np.sqrt((np.abs(h) ** 2 * weight).sum()) / G.n_space**3
    assert abs(spectral - sp.lp_norm_array(f, G, 2)) < 1e-12


def test_sobolev_norm_of_sine():
    f = ScalarField(G, mode(G, lambda x, y, z: np.sin(TWO_PI * x)))
    s = 1 / np.sqrt(2)
    expect = s * (1 + TWO_PI + TWO_PI**2)
    assert abs(sp.sobolev_norm(f, 2, 2) - expect) < 1e-9 * expect
    with pytest.raises(sp.SpectralError):
        sp.sobolev_norm(f, 4, 2)


def test_space_time_norm_constant_and_sup():
    g = TorusGrid(16, 8, T=2.0)
    f = np.full(g.shape, 3.0)
    F = SpaceTimeField.constant(g, f)
    assert abs(sp.space_time_norm(F, 2, ("lp", 2)) - 3 * np.sqrt(2)) < 1e-12
    assert abs(sp.space_time_norm(F, 1, ("lp", np.inf)) - 6) < 1e-12
    ramp = SpaceTimeField.separable(g, [(np.arange(8.0), np.ones(8), f)])
    assert abs(sp.space_time_norm(ramp, np.inf, ("lp", 2)) - 21) < 1e-12


def test_space_time_derivative_modes():
    g = TorusGrid(8, 64)
    t = g.times()
    s = np.ones(g.shape)
    w = TWO_PI / g.T
    analytic = SpaceTimeField.separable(g, [(np.sin(w * t), w * np.cos(w * t), s)])
    assert analytic.time_derivative_mode == "analytic"
    fd = SpaceTimeField.from_array(g, np.stack([analytic.slice(j) for j in range(64)]))
    assert fd.time_derivative_mode == "finite-difference"
    err = max(np.abs(fd.time_derivative(j) - analytic.time_derivative(j)).max() for j in range(64))
    assert err < 1e-4 * w
    with pytest.raises(ValueError):
        SpaceTimeField(g, (), lambda j: s, time_derivative_mode="analytic")


# -- field wrappers ---------------------------------------------------------------------------


def test_fields_are_immutable_and_checked():
    f = ScalarField(G, np.zeros(G.shape))
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 1
    with pytest.raises(sp.GridMismatch):
        SymTensorField(G, np.zeros((3,) + G.shape))
    with pytest.raises(sp.GridMismatch):
        f + ScalarField(TorusGrid(16), np.zeros((16,) * 3))


def test_fourier_coefficients_conjugate_symmetric(rng):
    f = ScalarField(G, band_limited(G, None, rng))
    full = np.fft.fftn(f.data)
    flipped = np.conj(np.roll(full[::-1, ::-1, ::-1], 1, axis=(0, 1, 2)))
    assert np.abs(full - flipped).max() < 1e-10


def test_dealiased_product_matches_exact_product():
    g = TorusGrid(16, 8, oversample=2)
    a = mode(g, lambda x, y, z: np.cos(TWO_PI * 3 * x))
    b = mode(g, lambda x, y, z: np.cos(TWO_PI * 6 * x))
    # cos(3)cos(6) = (cos 3 + cos 9)/2; the 9-mode is beyond Nyquist (8) and must be dropped
    expect = 0.5 * mode(g, lambda x, y, z: np.cos(TWO_PI * 3 * x))
    assert np.abs(g.dealiased_product(a, b) - expect).max() < 1e-12
    assert np.abs(a * b - expect).max() > 0.1


def test_spectral_tail_flags_rough_fields(rng):
    smooth = band_limited(G, None, rng, kmax=3)
    rough = smooth + 1e-2 * band_limited(G, None, rng, kmax=15)
    assert G.spectral_tail(smooth) < 1e-20
    assert G.spectral_tail(rough) > 1e-6


def test_fft_workers_do_not_change_results(rng):
    v = band_limited(TorusGrid(32), 3, rng)
    with sp.fft_workers(1):
        a = G.curl(v)
    with sp.fft_workers(4):
        b = G.curl(v)
    assert np.array_equal(a, b)


# -- dumps ----------------------------------------------------------------------------------


def test_dump_round_trip_and_layout(tmp_path, rng):
    g = TorusGrid(8, 8)
    data = rng.normal(size=(8, 3) + g.shape)
    F = SpaceTimeField.from_array(g, data)
    path = tmp_path / "f.bin"
    sp.write_dump(path, F)
    n, nt, nc, arr = sp.read_dump(path)
    assert (n, nt, nc) == (8, 8, 3)
    assert np.array_equal(np.asarray(arr), data)
    raw = path.read_bytes()
    assert raw[:6] == b"WEMHD1"
    first = np.frombuffer(raw[18:18 + 16], "<f8")
    assert np.array_equal(first, data[0, 0, :2, 0, 0])  # x fastest


def test_dump_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTDMP" + bytes(12))
    with pytest.raises(ValueError):
        sp.read_dump(p)


# -- properties -------------------------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_property_inverse_divergence(seed, kmax):
    rng = np.random.default_rng(seed)
    g = TorusGrid(16, 8)
    v = band_limited(g, 3, rng, kmax=kmax)
    R = g.inverse_divergence(v)
    assert rel(g.tensor_div(R), v) < 1e-10
    assert np.abs(R[0] + R[1] + R[2]).max() < 1e-10 * np.abs(R).max()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 4))
def test_property_frac_laplacian_composes(seed, alpha):
    rng = np.random.default_rng(seed)
    g = TorusGrid(16, 8)
    f = band_limited(g, None, rng, kmax=5)
    twice = g.frac_laplacian(g.frac_laplacian(f, alpha / 2), alpha / 2)
    assert rel(twice, g.frac_laplacian(f, alpha)) < 1e-10
