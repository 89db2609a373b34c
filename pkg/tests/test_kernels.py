import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from fracpme.errors import ConfigError, DomainError
from fracpme.kernels import (
    CutoffSpec,
    MollifierSpec,
    PowerLaw,
    ProblemParams,
    RegularizedKernel,
    bump_constant,
    bump_profile,
    build_nonlinearity,
    build_regularized_kernel,
    eval_mollifier,
    named_density,
    plateau,
    regularize_initial,
    riesz_constant,
    riesz_kernel,
    truncated_kernel,
)
from fracpme.spectral import Grid, convolve


# ---------------------------------------------------------------- constants


def _gamma_oracle(d, s, kind):
    # log-gamma route, independent of the closed forms in the library
    if kind == "minus":
        return math.exp(math.lgamma(d / 2 - s) - s * math.log(4) - d / 2 * math.log(math.pi) - math.lgamma(s))
    if kind == "plus":
        return math.exp(s * math.log(4) + math.lgamma(d / 2 + s) - d / 2 * math.log(math.pi)) / abs(special.gamma(-s))
    return _gamma_oracle(d, 1 - s, "plus")


def test_riesz_constant_known_values():
    assert riesz_constant(2, 0.5, "minus") == pytest.approx(1 / (2 * math.pi), rel=1e-14)
    assert riesz_constant(3, 0.5, "minus") == pytest.approx(1 / (2 * math.pi**2), rel=1e-14)
    assert riesz_constant(2, 0.5, "plus") == pytest.approx(_gamma_oracle(2, 0.5, "plus"), rel=1e-13)


@given(d=st.integers(2, 3), s=st.floats(0.05, 0.95))
def test_riesz_constant_matches_lgamma(d, s):
    for kind in ("minus", "plus", "one_minus"):
        assert riesz_constant(d, s, kind) == pytest.approx(_gamma_oracle(d, s, kind), rel=1e-12)


def test_riesz_constant_rejects_poles():
    for s in (0.0, 1.0):
        with pytest.raises(DomainError):
            riesz_constant(2, s, "plus")
    with pytest.raises(DomainError):
        riesz_constant(1, 0.5, "minus")


def test_riesz_kernel_is_fourier_inverse_of_power():
    # int K(x) e^{-|x|^2/2} dx = (2pi)^{-d/2} int |k|^{-2s} (2pi)^{d/2} e^{-|k|^2/2} dk
    d, s = 3, 0.5
    lhs = integrate.quad(lambda r: riesz_kernel(r, d, s) * math.exp(-r * r / 2) * 4 * math.pi * r * r, 0, np.inf)[0]
    rhs = integrate.quad(lambda k: k ** (-2 * s) * math.exp(-k * k / 2) * 4 * math.pi * k * k, 0, np.inf)[0] / (
        2 * math.pi
    ) ** (d / 2)
    assert lhs == pytest.approx(rhs, rel=1e-9)


def test_problem_params_derived_and_invalid():
    p = ProblemParams(d=2, s=0.75)
    assert p.a == pytest.approx(0.5)
    assert p.m_moment == pytest.approx(8.0)
    assert p.replace(s=0.25).a == 1.0
    with pytest.raises(ConfigError):
        ProblemParams(d=1, s=0.5)
    with pytest.raises(ConfigError):
        ProblemParams(n_particles=1)


# ---------------------------------------------------------------- mollifier


@pytest.mark.parametrize("d", [1, 2, 3])
def test_bump_normalized_by_independent_quadrature(d):
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    mass = integrate.quad(lambda r: math.exp(-1 / (1 - r * r)) * area * r ** (d - 1), 0, 1, epsabs=1e-15)[0]
    assert bump_constant(d) * mass == pytest.approx(1.0, abs=1e-12)


def test_mollifier_support_peak_and_grid_mass():
    g = Grid(2, 4.0, 64)
    for width in (0.5, 1.0, 2.0):
        spec = MollifierSpec(width, 2)
        assert spec(np.array([width, 0.0])) == 0.0
        assert spec(np.array([0.0, 1.01 * width])) == 0.0
        assert spec.peak == pytest.approx(bump_constant(2) * math.exp(-1) / width**2, rel=1e-15)
        assert g.integrate(spec.stencil(g)) == pytest.approx(1.0, abs=1e-12)
    # raw nodal quadrature converges fast once the bump is resolved
    errs = [abs(Grid(2, 4.0, 64).integrate(MollifierSpec(w, 2).stencil(Grid(2, 4.0, 64), normalize=False)) - 1) for w in (0.5, 1.0, 2.0)]
    assert errs[2] < 1e-5 and errs[2] < errs[1] < errs[0]
    assert eval_mollifier(np.zeros(2), 0.5) == pytest.approx(bump_constant(2) * math.exp(-1) * 4)


def test_mollifier_apply_preserves_constants():
    g = Grid(2, 4.0, 32)
    out = MollifierSpec(0.7, 2).apply(np.full(g.shape, 3.0), g)
    assert np.max(np.abs(out - 3.0)) < 1e-13


def test_cutoff_profile_and_lipschitz():
    z = 0.5
    cs = CutoffSpec(z)
    r = np.linspace(0, 6, 6001)
    w = cs(r)
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(w[r <= 1 / z] == 1) and np.all(w[r >= 2 / z] == 0)
    g = Grid(2, 8.0, 128)
    om = cs(g.radius)
    for a in range(2):
        q = np.abs(np.diff(om, axis=a)) / g.spacing
        assert q.max() <= 2 * z + 1e-12
    assert cs.lipschitz <= 2 * z


def test_plateau_profile():
    r = np.linspace(0, 3, 3001)
    p = plateau(r)
    assert np.all(p[r <= 1] == 1.0) and np.all(p[r >= 2] == 0.0)
    assert np.all(np.diff(p) <= 1e-15)


# ---------------------------------------------------------------- regularized kernel


def _kzeta_oracle(x0, d, s, zeta):
    """int W_zeta(z) K~_zeta(x0 - z) dz in polar coordinates around x0 (d = 2)."""
    c = bump_constant(2) / zeta**2

    def inner(r, th):
        y = np.array([x0[0] - r * math.cos(th), x0[1] - r * math.sin(th)])
        return c * math.exp(-1 / (1 - (r / zeta) ** 2)) * float(truncated_kernel(np.linalg.norm(y), d, s, zeta)) * r

    return integrate.dblquad(lambda r, th: inner(r, th), 0, 2 * math.pi, 0, zeta * (1 - 1e-12), epsabs=1e-12)[0]


@pytest.mark.parametrize("s", [0.5, 0.75])
def test_regularized_kernel_matches_brute_force_quadrature(s):
    g = Grid(2, 8.0, 128)
    zeta = 0.5
    ker = RegularizedKernel(2, s, zeta, g)
    c = g.n // 2
    for off in ((16, 0), (8, 8), (28, 4)):
        x0 = np.array([g.axis[c + off[0]], g.axis[c + off[1]]])
        ref = _kzeta_oracle(x0, 2, s, zeta)
        assert ker.values[c + off[0], c + off[1]] == pytest.approx(ref, rel=2e-3, abs=1e-6)


def test_truncated_kernel_below_riesz():
    r = np.linspace(1e-3, 20, 20001)
    for d, s in ((2, 0.5), (2, 0.75), (3, 0.5)):
        for zeta in (0.1, 0.5, 1.0):
            assert np.all(truncated_kernel(r, d, s, zeta) <= riesz_kernel(r, d, s))


def test_mollified_kernel_exceeds_riesz_off_origin():
    # |x|^{2s-d} is subharmonic away from 0, so ball averages exceed the centre value
    x0 = np.array([1.0, 0.0])
    assert _kzeta_oracle(x0, 2, 0.5, 0.5) > riesz_kernel(1.0, 2, 0.5)


def test_regularized_kernel_bounds_and_support():
    g = Grid(2, 8.0, 128)
    for s, zeta in ((0.5, 0.5), (0.75, 0.25), (0.25, 1.0)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ker = RegularizedKernel(2, s, zeta, g)
        r = g.radius
        mask = (r > zeta + g.spacing) & (r < g.half_length)
        # K_zeta(x) is an average of K~_zeta over the zeta-ball, and K is radially decreasing
        assert np.all(ker.values[mask] <= riesz_kernel(r[mask] - zeta, 2, s) + 1e-8)
        # Nyquist truncation of the symbol leaves ringing of a few 1e-5 of the peak
        assert ker.values.min() >= -5e-5 * ker.values.max()
        far = r > 2 / zeta + zeta + 2 * g.spacing
        assert np.max(np.abs(ker.values[far]), initial=0.0) < 5e-5 * ker.values.max()
        assert np.all(np.isfinite(ker.values))


def test_regularized_kernel_small_zeta_tends_to_riesz():
    # box large enough that the support 2/zeta + zeta never wraps
    # and zeta >= 2 spacings so that W_zeta is resolved by the nodes
    g = Grid(2, 16.0, 512)
    c, j = g.n // 2, 16
    errs = []
    for zeta in (0.5, 0.25, 0.125):
        ker = RegularizedKernel(2, 0.5, zeta, g)
        errs.append(abs(ker.values[c + j, c] / riesz_kernel(g.axis[c + j], 2, 0.5) - 1))
    assert errs[-1] < 1e-3
    assert errs[2] < errs[1] < errs[0]


def test_sampled_and_spectral_kernels_agree():
    g = Grid(2, 8.0, 128)
    a = RegularizedKernel(2, 0.5, 0.5, g, "spectral").values
    b = RegularizedKernel(2, 0.5, 0.5, g, "sampled").values
    mask = g.radius > 1.0
    assert np.max(np.abs(a[mask] - b[mask])) / a.max() < 5e-3


def test_kernel_gradient_odd_and_wrap_warning():
    g = Grid(2, 8.0, 64)
    ker = RegularizedKernel(2, 0.5, 0.5, g)
    gx = ker.gradient_values[0]
    c = g.n // 2
    assert gx[c, c] == pytest.approx(0.0, abs=1e-12)
    assert gx[c + 5, c] == pytest.approx(-gx[c - 5, c], rel=1e-10)
    with pytest.warns(RuntimeWarning):
        build_regularized_kernel(ProblemParams(zeta=0.2), g)


def test_kernel_csv_export(tmp_path):
    g = Grid(2, 8.0, 32)
    ker = RegularizedKernel(2, 0.5, 0.5, g)
    ker.export_csv(tmp_path / "k.csv")
    data = np.loadtxt(tmp_path / "k.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 4 and np.all(np.isfinite(data))


# ---------------------------------------------------------------- nonlinearity


def _fsigma_prime_oracle(f, sig, w):
    if w <= -sig:
        return 0.0
    tau = min(1.0, w / sig)
    conv = integrate.quad(
        lambda t: bump_constant(1) * math.exp(-1 / (1 - t * t)) * float(f.prime(np.array(w - sig * t))),
        -1,
        tau,
        epsabs=1e-15,
        limit=200,
    )[0]
    return conv * float(plateau(sig * w))


def _fsigma_oracle(f, sig, u):
    pts = [sig] if sig < u else None
    return integrate.quad(lambda w: _fsigma_prime_oracle(f, sig, w), 0, u, points=pts, limit=400, epsabs=1e-14)[0]


@pytest.mark.parametrize("m,sig", [(1, 0.01), (2, 0.01), (1.5, 0.1)])
def test_fsigma_against_direct_quadrature(m, sig):
    f = PowerLaw(m)
    tab = build_nonlinearity(f, sig)
    for u in (0.003, 0.5, 1.0, 3.0):
        assert tab.value(u) == pytest.approx(_fsigma_oracle(f, sig, u), abs=1e-9)
        assert tab.prime(u) == pytest.approx(_fsigma_prime_oracle(f, sig, u), abs=1e-9)


def test_fsigma_linear_close_to_identity():
    tab = build_nonlinearity(PowerLaw(1), 0.01)
    assert tab.value(0.0) == 0.0
    u = np.linspace(0.01, 1 / 0.01 - 0.01, 400)
    assert np.max(np.abs(tab.value(u) - u)) <= 0.01
    assert tab.value(0.5) == pytest.approx(0.5, abs=0.01)


def test_fsigma_quadratic_derivative():
    tab = build_nonlinearity(PowerLaw(2), 0.01)
    u = np.linspace(0.1, 1.0, 50)
    assert np.max(np.abs(tab.prime(u) - 2 * u)) <= 0.05


@settings(max_examples=10, deadline=None)
@given(m=st.floats(1.0, 3.0), sig=st.floats(0.05, 0.5))
def test_fsigma_table_invariants(m, sig):
    tab = build_nonlinearity(PowerLaw(m), sig, table_size=1024)
    u = np.linspace(0, tab.u_max, 3001)
    assert tab.value(0.0) == 0.0
    assert np.all(tab.prime(u) >= -1e-14)
    vals = tab.value(u)
    assert np.all(np.diff(vals) >= -1e-12 * max(1.0, np.abs(vals).max()))
    assert np.all(np.abs(tab.prime(u[u > 2 / sig + 1e-9])) <= 1e-15)


def test_fsigma_rejects_bad_sigma():
    with pytest.raises(DomainError):
        build_nonlinearity(PowerLaw(1), 0.0)


def test_entropy_density_linear_case():
    # h''(u) = f'(u)/u with f(u) = u gives u log u - u + 1 up to an affine gauge; compare second differences
    tab = build_nonlinearity(PowerLaw(1), 0.01)
    u = np.linspace(0.5, 2.0, 7)
    e = 1e-2
    h2 = (tab.entropy_density(u + e) - 2 * tab.entropy_density(u) + tab.entropy_density(u - e)) / e**2
    assert np.allclose(h2, tab.prime(u) / u, rtol=1e-3)
    assert tab.entropy_density(0.0) == 0.0
    assert tab.entropy_density(1.0) == pytest.approx(0.0, abs=1e-12)


def test_nonlinearity_csv(tmp_path):
    tab = build_nonlinearity(PowerLaw(1), 0.1, table_size=512)
    tab.export_csv(tmp_path / "f.csv")
    data = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 4


# ---------------------------------------------------------------- initial data


def test_kappa_decreases_to_one_and_mass_is_exact():
    g = Grid(2, 8.0, 128)
    rho0 = named_density("gaussian", g)
    kap = []
    for sig in (0.8, 0.4, 0.2, 0.1):
        dat = regularize_initial(rho0, sig, g)
        assert dat.mass == pytest.approx(g.integrate(rho0), rel=1e-12)
        kap.append(dat.kappa_sigma)
    gap = [abs(k - 1) for k in kap]
    assert all(b <= a + 1e-12 for a, b in zip(gap, gap[1:]))
    assert kap[0] > 1 + 1e-6 and min(kap) >= 1 - 1e-9


def test_cutoff_inactive_for_compact_bump():
    g = Grid(2, 8.0, 128)
    rho0 = named_density("plateau", g)
    sig = 0.1
    dat = regularize_initial(rho0, sig, g)
    sm = np.maximum(convolve(rho0, MollifierSpec(sig, 2).stencil(g), g), 0)
    inside = g.radius < 1 / sig
    assert np.max(np.abs(dat.rho0_sigma - dat.kappa_sigma * sm)[inside]) < 1e-14
    assert dat.kappa_sigma == pytest.approx(1.0, abs=1e-12)


def test_named_densities_have_unit_mass():
    g = Grid(2, 8.0, 128)
    for name in ("gaussian", "double-bump", "plateau"):
        rho = named_density(name, g)
        assert g.integrate(rho) == pytest.approx(1.0, rel=1e-10)
        assert rho.min() >= 0
    with pytest.raises(ConfigError):
        named_density("nope", g)
