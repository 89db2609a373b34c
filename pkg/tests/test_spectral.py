import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fracpme.errors import DomainError
from fracpme.kernels import riesz_constant
from fracpme.spectral import (
    Field,
    Grid,
    convolve,
    dirichlet_form,
    frac_laplacian,
    gn2_theta,
    gradient,
    hs_seminorm,
    inequality_probe,
    inv_frac_laplacian,
    lp_norm,
    pressure_gradient,
    read_field,
    write_field,
    write_field_csv,
)
from fracpme.verify import (
    composition_error,
    gn1_dilation_spread,
    lattice_dirichlet_form,
    operator_battery,
    plane_wave_errors,
    young_ratios,
)


def test_grid_basics():
    g = Grid(2, 4.0, 32)
    assert g.spacing == 0.25
    assert g.cell_volume == pytest.approx(0.0625)
    assert g.axis[g.n // 2] == 0.0 and g.axis[0] == -4.0
    assert lp_norm(np.ones(g.shape), 1, g) == pytest.approx(64.0)
    with pytest.raises(ValueError):
        Grid(2, 4.0, 24)
    with pytest.raises(ValueError):
        Field(g, np.full(g.shape, np.nan))


def test_check_margin():
    g = Grid(2, 8.0, 64)
    r2 = sum(c * c for c in g.coords)
    g.check_margin(np.exp(-r2 / 0.5))
    with pytest.raises(DomainError):
        g.check_margin(np.exp(-r2 / 8.0))


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_plane_wave_and_composition(s):
    g = Grid(2, 4.0, 64)
    assert max(plane_wave_errors(g, s).values()) < 1e-12
    assert composition_error(g, s) < 1e-12


def test_inverse_gauge_and_constant_pressure():
    g = Grid(2, 4.0, 32)
    assert np.max(np.abs(inv_frac_laplacian(np.full(g.shape, 2.0), 0.5, g))) < 1e-14
    assert np.max(np.abs(pressure_gradient(np.full(g.shape, 2.0), 0.5, g))) < 1e-14


def test_axis_mode_on_lowest_wavenumber():
    g = Grid(2, 4.0, 32)
    k = 2 * math.pi / g.half_length
    u = np.cos(k * g.coords[0])
    assert np.allclose(inv_frac_laplacian(u, 0.3, g), k ** (-0.6) * u, atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(s=st.floats(0.05, 0.45), t=st.floats(0.05, 0.45), seed=st.integers(0, 2**32 - 1))
def test_multipliers_commute(s, t, seed):
    g = Grid(2, 4.0, 32)
    u = np.random.default_rng(seed).standard_normal(g.shape)
    u -= u.mean()
    a = inv_frac_laplacian(inv_frac_laplacian(u, s, g), t, g)
    b = inv_frac_laplacian(u, s + t, g)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fft_round_trip(seed):
    g = Grid(3, 2.0, 16)
    u = np.random.default_rng(seed).standard_normal(g.shape)
    assert np.max(np.abs(g.ifft(g.fft(u)) - u)) < 1e-12 * np.max(np.abs(u))


def test_riesz_potential_of_gaussian_by_radial_quadrature():
    # (-Delta)^{-s} of exp(-|x|^2/(2a)) at a probe point vs direct convolution with c|x|^{2s-d}
    g = Grid(2, 16.0, 256)
    a, s = 0.25, 0.25
    u = np.exp(-sum(c * c for c in g.coords) / (2 * a))
    spec = inv_frac_laplacian(u, s, g)
    c = riesz_constant(2, s)
    i0 = g.n // 2 + 8
    x = g.axis[i0]

    def integrand(r, th):
        y2 = x * x + r * r - 2 * x * r * math.cos(th)
        return c * r ** (2 * s - 2) * math.exp(-y2 / (2 * a)) * r

    ref = integrate.dblquad(integrand, 0, 2 * math.pi, 0, 40.0, epsabs=1e-12)[0]
    # the torus zero mode is gauged away, so compare differences between two probes
    j0 = g.n // 2 + 24
    x2 = g.axis[j0]

    def integrand2(r, th):
        y2 = x2 * x2 + r * r - 2 * x2 * r * math.cos(th)
        return c * r ** (2 * s - 2) * math.exp(-y2 / (2 * a)) * r

    ref2 = integrate.dblquad(integrand2, 0, 2 * math.pi, 0, 40.0, epsabs=1e-12)[0]
    assert spec[i0, g.n // 2] - spec[j0, g.n // 2] == pytest.approx(ref - ref2, rel=1e-2)


def test_pressure_gradient_sine_mode():
    g = Grid(2, 4.0, 32)
    k = math.pi / g.half_length * np.array([2.0, 1.0])
    ph = k[0] * g.coords[0] + k[1] * g.coords[1]
    kk = np.linalg.norm(k)
    grad = pressure_gradient(np.sin(ph), 0.5, g)
    for a in range(2):
        assert np.allclose(grad[a], k[a] * kk**-1.0 * np.cos(ph), atol=1e-13)


def test_staggered_gradient_is_half_cell_shift():
    g = Grid(1, 4.0, 32)
    k = math.pi / g.half_length * 3
    u = np.sin(k * g.axis)
    st_ = gradient(u, g, staggered=True)[0]
    assert np.allclose(st_, k * np.cos(k * (g.axis + g.spacing / 2)), atol=1e-12)


def test_convolution_identities():
    g = Grid(2, 8.0, 128)
    r2 = sum(c * c for c in g.coords)
    # unit cell mass at the origin acts as the identity
    delta = np.zeros(g.shape)
    delta[g.n // 2, g.n // 2] = 1.0 / g.cell_volume
    u = np.exp(-r2) * (1 + g.coords[0])
    assert np.max(np.abs(convolve(u, delta, g) - u)) < 1e-13
    # Gaussians: variances add
    gauss = lambda v: np.exp(-r2 / (2 * v)) / (2 * math.pi * v)
    assert np.max(np.abs(convolve(gauss(0.3), gauss(0.5), g) - gauss(0.8))) < 1e-8


def test_young_inequality():
    for seed in range(3):
        ratios = young_ratios(Grid(2, 4.0, 32), seed)
        assert max(ratios.values()) <= 1 + 1e-10


def test_norms_single_mode():
    g = Grid(2, 4.0, 32)
    k = math.pi / g.half_length * np.array([1.0, 3.0])
    u = np.sin(k[0] * g.coords[0] + k[1] * g.coords[1])
    assert lp_norm(u, 2, g) ** 2 == pytest.approx(g.box_volume / 2, rel=1e-12)
    kk = np.linalg.norm(k)
    assert hs_seminorm(u, 0.5, g) == pytest.approx(kk**0.5 * lp_norm(u, 2, g), rel=1e-12)
    assert lp_norm(u, np.inf, g) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("s", [0.5, 0.75])
def test_dirichlet_form_matches_double_sum(s):
    g = Grid(2, 8.0, 16)
    x = g.coords
    gfun = np.cos(math.pi * x[0] / 8) + 0.3 * np.cos(math.pi * (x[0] + x[1]) / 8)
    assert lattice_dirichlet_form(gfun, s, g) / dirichlet_form(gfun, s, g) == pytest.approx(1.0, abs=0.05)


def test_gn1_dilation_invariance():
    g = Grid(2, 8.0, 128)
    for s in (0.25, 0.5):
        assert gn1_dilation_spread(g, s, 2.0) <= 0.05


def test_gn2_theta_and_probe_validation():
    assert gn2_theta(2, 2.0, 2.0, 0.25) == pytest.approx(0.5)
    g = Grid(2, 8.0, 64)
    u = np.exp(-sum(c * c for c in g.coords))
    with pytest.raises(DomainError):
        inequality_probe(u, "HLS", g, s=0.25, p=2.0, q=2.0)
    with pytest.raises(DomainError):
        inequality_probe(u, "XYZ", g, s=0.25, p=2.0)
    rep = inequality_probe(u, "HLS", g, s=0.25, p=2.0, q=4.0)
    assert np.isfinite(rep.ratio) and rep.ratio > 0


def test_hls_single_mode_ratio():
    g = Grid(2, 4.0, 64)
    k = math.pi / g.half_length * np.array([1.0, 1.0])
    u = np.cos(k[0] * g.coords[0] + k[1] * g.coords[1])
    s, p, q = 0.25, 2.0, 4.0
    rep = inequality_probe(u, "HLS", g, s=s, p=p, q=q)
    expect = np.linalg.norm(k) ** (-2 * s) * lp_norm(u, q, g) / lp_norm(u, p, g)
    assert rep.ratio == pytest.approx(expect, rel=1e-10)


def test_field_binary_round_trip(tmp_path):
    g = Grid(2, 3.0, 16)
    u = np.random.default_rng(0).random(g.shape)
    write_field(tmp_path / "u.bin", u, g)
    back = read_field(tmp_path / "u.bin")
    assert back.grid == g and np.array_equal(back.values, u)
    raw = (tmp_path / "u.bin").read_bytes()
    assert len(raw) == 8 * 3 + 8 * u.size
    write_field_csv(tmp_path / "u.csv", u, g)
    assert (tmp_path / "u.csv").read_text().splitlines()[0].startswith("x,y,value")


def test_operator_battery_fast():
    items = operator_battery(Grid(2, 8.0, 64), 0.5, fast=True)
    bad = [it for it in items if not it.passed]
    assert not bad, bad


def test_dealias_mask_keeps_low_modes():
    from fracpme.spectral import dealias_mask

    g = Grid(2, 4.0, 32)
    m = dealias_mask(g)
    k = math.pi / g.half_length
    low = np.cos(3 * k * g.coords[0])
    high = np.cos(14 * k * g.coords[0])
    assert np.allclose(g.ifft(g.fft(low) * m), low, atol=1e-14)
    assert np.max(np.abs(g.ifft(g.fft(high) * m))) < 1e-14
