"""Regularized objects: Riesz kernel, mollifiers, cutoffs, smoothed nonlinearity, initial datum."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cache, cached_property
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline, CubicSpline, PchipInterpolator
from scipy.special import gamma, jv, roots_jacobi, roots_legendre

from .errors import ConfigError, DomainError
from .spectral import Grid, convolve

__all__ = [
    "ProblemParams",
    "riesz_constant",
    "RieszKernelSpec",
    "sphere_area",
    "riesz_kernel",
    "bump_profile",
    "bump_constant",
    "bump_cdf",
    "MollifierSpec",
    "eval_mollifier",
    "mollifier_symbol",
    "CutoffSpec",
    "cutoff",
    "truncated_kernel",
    "plateau",
    "RegularizedKernel",
    "build_regularized_kernel",
    "PowerLaw",
    "TabulatedNonlinearity",
    "NonlinearityTable",
    "build_nonlinearity",
    "InitialDatum",
    "regularize_initial",
    "named_density",
]


@dataclass(frozen=True)
class ProblemParams:
    d: int = 2
    s: float = 0.5
    sigma: float = 0.1
    beta: float = 0.5
    zeta: float = 0.5
    n_particles: int = 256

    def __post_init__(self):
        if self.d < 1 or int(self.d) != self.d:
            raise ConfigError(f"d must be a positive integer, got {self.d}")
        if not 0 < self.s < 1:
            raise ConfigError(f"s must lie in (0, 1), got {self.s}")
        if self.d == 1 and not self.s < 0.5:
            raise ConfigError("d = 1 requires s < 1/2")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not self.beta > 0 or not self.zeta > 0:
            raise ConfigError("beta and zeta must be positive")
        if self.n_particles < 2:
            raise ConfigError("need at least two particles")

    @property
    def a(self) -> float:
        return min(1.0, self.d - 2.0 * self.s)

    @property
    def m_moment(self) -> float:
        return 2.0 * self.d / (self.d - 2.0 * self.s)

    def replace(self, **kw) -> "ProblemParams":
        vals = {k: getattr(self, k) for k in ("d", "s", "sigma", "beta", "zeta", "n_particles")}
        vals.update(kw)
        return ProblemParams(**vals)


def riesz_constant(d: int, s: float, kind: str = "minus") -> float:
    """c_{d,-s}, c_{d,s} or c_{d,1-s}."""
    if kind == "one_minus":
        return riesz_constant(d, 1.0 - s, "plus")
    if s <= 0 or s >= 1:
        raise DomainError(f"order must lie in (0, 1), got {s}")
    if kind == "minus":
        if d / 2 - s <= 0:
            raise DomainError("Riesz constant needs d/2 - s > 0")
        return float(gamma(d / 2 - s) / (4**s * math.pi ** (d / 2) * gamma(s)))
    if kind == "plus":
        return float(4**s * gamma(d / 2 + s) / (math.pi ** (d / 2) * abs(gamma(-s))))
    raise DomainError(f"unknown constant kind {kind!r}")


@dataclass(frozen=True)
class RieszKernelSpec:
    d: int
    s: float

    @property
    def c_minus(self) -> float:
        return riesz_constant(self.d, self.s, "minus")

    @property
    def c_plus(self) -> float:
        return riesz_constant(self.d, self.s, "plus")

    @property
    def c_oneminus(self) -> float:
        return riesz_constant(self.d, self.s, "one_minus")


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def riesz_kernel(r, d: int, s: float):
    r = np.asarray(r, dtype=float)
    return riesz_constant(d, s) * r ** (2 * s - d)


# ---------------------------------------------------------------- mollifiers


def bump_profile(r2):
    """Unnormalized exp(-1/(1-|x|^2)) given |x|^2."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    m = r2 < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r2[m]))
    return out


@cache
def bump_constant(d: int) -> float:
    """C with C * bump_profile integrating to one over R^d."""
    val, _ = integrate.quad(
        lambda r: math.exp(-1.0 / (1.0 - r * r)) * r ** (d - 1), 0.0, 1.0, epsabs=1e-16, epsrel=1e-13, limit=200
    )
    return 1.0 / (sphere_area(d) * val)


@cache
def _bump_cdf_spline() -> CubicHermiteSpline:
    # cumulative Gauss-Legendre on fine panels, Hermite interpolation with the exact density
    edges = np.linspace(-1.0, 1.0, 4001)
    xg, wg = roots_legendre(10)
    a, b = edges[:-1, None], edges[1:, None]
    pts = 0.5 * (b - a) * xg + 0.5 * (a + b)
    dens = lambda t: bump_constant(1) * bump_profile(t * t)
    panels = np.sum(0.5 * (b - a) * wg * dens(pts), axis=1)
    cdf = np.concatenate([[0.0], np.cumsum(panels)])
    cdf /= cdf[-1]
    return CubicHermiteSpline(edges, cdf, dens(edges))


def bump_cdf(t):
    """CDF of the normalized one-dimensional bump."""
    t = np.asarray(t, dtype=float)
    return np.where(t <= -1.0, 0.0, np.where(t >= 1.0, 1.0, _bump_cdf_spline()(np.clip(t, -1.0, 1.0))))


def _bump_density_1d(t):
    t = np.asarray(t, dtype=float)
    return bump_constant(1) * bump_profile(t * t)


def _bump_density_1d_prime(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = np.abs(t) < 1
    q = 1.0 - t[m] ** 2
    out[m] = bump_constant(1) * np.exp(-1.0 / q) * (-2.0 * t[m] / q**2)
    return out


def eval_mollifier(x, width: float, d: int | None = None):
    """W_h(x) = h^-d W_1(x/h) for points ``x`` of shape (..., d)."""
    if not width > 0:
        raise DomainError("mollifier width must be positive")
    x = np.asarray(x, dtype=float)
    if d is None:
        d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1) / width**2
    return bump_constant(d) * bump_profile(r2) / width**d


def _phi(t, nu: float):
    """t^-nu J_nu(t), continuous at t = 0."""
    t = np.asarray(t, dtype=float)
    small = t < 1e-8
    tt = np.where(small, 1.0, t)
    out = tt ** (-nu) * jv(nu, tt)
    return np.where(small, 1.0 / (2.0**nu * math.gamma(nu + 1.0)), out)


def _bump_hat(k, d: int):
    """Fourier transform of W_1 at radial wavenumbers ``k``."""
    k = np.asarray(k, dtype=float)
    nu = d / 2 - 1
    nq = int(64 + 2 * np.max(k, initial=0.0))
    x, w = roots_legendre(nq)
    r = 0.5 * (x + 1.0)
    w = 0.5 * w
    prof = bump_constant(d) * bump_profile(r * r) * r ** (d - 1)
    out = np.empty(k.size)
    flat = k.ravel()
    for lo in range(0, flat.size, 4096):
        chunk = flat[lo : lo + 4096]
        out[lo : lo + 4096] = (2 * math.pi) ** (d / 2) * (_phi(np.outer(chunk, r), nu) @ (w * prof))
    return out.reshape(k.shape)


def _radial_symbol(grid: Grid, func) -> np.ndarray:
    """Evaluate a radial function of |k| on the rfft layout, once per distinct |k|^2."""
    dk = math.pi / grid.half_length
    kint = np.rint(grid.k2 / dk**2).astype(np.int64)
    uniq, inv = np.unique(kint, return_inverse=True)
    vals = func(dk * np.sqrt(uniq.astype(float)))
    return vals[inv].reshape(grid.spectral_shape)


@cache
def mollifier_symbol(grid: Grid, width: float) -> np.ndarray:
    """Exact Fourier symbol of W_width on the grid's wavenumbers."""
    sym = _radial_symbol(grid, lambda k: _bump_hat(width * k, grid.d))
    sym.setflags(write=False)
    return sym


@dataclass(frozen=True)
class MollifierSpec:
    width: float
    d: int

    def __post_init__(self):
        if not self.width > 0:
            raise DomainError("mollifier width must be positive")

    def __call__(self, x):
        return eval_mollifier(x, self.width, self.d)

    @property
    def peak(self) -> float:
        return bump_constant(self.d) * math.exp(-1.0) / self.width**self.d

    def stencil(self, grid: Grid, normalize: bool = True) -> np.ndarray:
        """Nodal values in node layout (origin at index n//2).

        With ``normalize`` the discrete integral is exactly one, and a width
        below one spacing collapses to the discrete delta.
        """
        if grid.d != self.d:
            raise DomainError("grid dimension mismatch")
        vals = eval_mollifier(np.stack(grid.coords, axis=-1), self.width, self.d)
        if normalize:
            mass = vals.sum() * grid.cell_volume
            if mass <= 0:
                vals = np.zeros(grid.shape)
                vals[(grid.n // 2,) * grid.d] = 1.0 / grid.cell_volume
            else:
                vals = vals / mass
        return vals

    def symbol(self, grid: Grid) -> np.ndarray:
        return mollifier_symbol(grid, self.width)

    def apply(self, u: np.ndarray, grid: Grid) -> np.ndarray:
        return grid.ifft(grid.fft(u) * self.symbol(grid))


# ---------------------------------------------------------------- cutoffs and kernels


def cutoff(r, zeta: float):
    """Radial ramp: 1 up to 1/zeta, slope -zeta down to 0 at 2/zeta."""
    r = np.asarray(r, dtype=float)
    return np.clip(2.0 - zeta * r, 0.0, 1.0)


@dataclass(frozen=True)
class CutoffSpec:
    zeta: float

    def __call__(self, r):
        return cutoff(r, self.zeta)

    @property
    def lipschitz(self) -> float:
        return self.zeta

    @property
    def support_radius(self) -> float:
        return 2.0 / self.zeta


def truncated_kernel(r, d: int, s: float, zeta: float):
    """K times the cutoff."""
    return riesz_kernel(r, d, s) * cutoff(r, zeta)


def plateau(r):
    """Smooth radial plateau: 1 on |x| <= 1, 0 on |x| >= 2."""
    return 1.0 - bump_cdf(2.0 * np.abs(np.asarray(r, dtype=float)) - 3.0)


def _plateau_prime(r):
    r = np.asarray(r, dtype=float)
    return -2.0 * np.sign(r) * _bump_density_1d(2.0 * np.abs(r) - 3.0)


class _PowerMoments:
    """A_p(X) = int_0^X t^{2s-1+p} phi(t) dt for p in {0, 1} by unit panels."""

    NODES = 20

    def __init__(self, d: int, s: float, xmax: float):
        self.d, self.s, self.nu = d, s, d / 2 - 1
        npan = max(1, int(math.ceil(xmax)))
        xg, wg = roots_legendre(self.NODES)
        self._xg, self._wg = 0.5 * (xg + 1.0), 0.5 * wg
        self._gj = []
        for p in (0, 1):
            beta = 2 * s - 1 + p
            xj, wj = roots_jacobi(self.NODES, 0.0, beta)
            self._gj.append((0.5 * (xj + 1.0), wj / 2.0 ** (beta + 1.0)))
        first = [self._first_panel(np.array([1.0]), p)[0] for p in (0, 1)]
        self.cum = []
        for p in (0, 1):
            c = np.zeros(npan + 1)
            c[1] = first[p]
            if npan > 1:
                a = np.arange(1, npan, dtype=float)[:, None]
                t = a + self._xg
                c[2:] = first[p] + np.cumsum((t ** (2 * s - 1 + p) * _phi(t, self.nu)) @ self._wg)
            self.cum.append(c)

    def _first_panel(self, X, p):
        u, w = self._gj[p]
        return X ** (2 * self.s + p) * (_phi(np.outer(X, u), self.nu) @ w)

    def __call__(self, X, p: int):
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        low = X <= 1.0
        out[low] = self._first_panel(X[low], p)
        hi = ~low
        if np.any(hi):
            Xh = X[hi]
            base = np.floor(Xh)
            frac = Xh - base
            t = base[:, None] + frac[:, None] * self._xg
            part = frac * ((t ** (2 * self.s - 1 + p) * _phi(t, self.nu)) @ self._wg)
            out[hi] = self.cum[p][base.astype(np.int64)] + part
        return out


def _truncated_kernel_hat(k, d: int, s: float, zeta: float, xcap: float = 2.0e5):
    """Fourier transform of K times the cutoff at radial wavenumbers ``k``.

    Beyond ``xcap`` the ramp-averaged tail is below roundoff relevance and the
    untruncated symbol |k|^-2s is used.
    """
    k = np.asarray(k, dtype=float)
    c = riesz_constant(d, s)
    out = np.empty_like(k)
    zero = k == 0
    area = sphere_area(d)
    out[zero] = c * area * zeta ** (-2 * s) * (
        1 / (2 * s) + (2 ** (2 * s) - 1) / s - (2 ** (2 * s + 1) - 1) / (2 * s + 1)
    )
    X = k / zeta
    far = ~zero & (2 * X > xcap)
    out[far] = k[far] ** (-2 * s)
    mid = ~zero & ~far
    if np.any(mid):
        Xm = X[mid]
        mom = _PowerMoments(d, s, 2 * Xm.max())
        bracket = 2 * mom(2 * Xm, 0) - mom(Xm, 0) - (mom(2 * Xm, 1) - mom(Xm, 1)) / Xm
        out[mid] = c * (2 * math.pi) ** (d / 2) * k[mid] ** (-2 * s) * bracket
    return out


def _origin_cell_average(d: int, s: float, h: float) -> float:
    """Mean of c|x|^{2s-d} over the cell [-h/2, h/2]^d."""
    c = riesz_constant(d, s)
    al = 2 * s - d
    if d == 1:
        return c * 2 * (h / 2) ** (al + 1) / (al + 1) / h
    if d == 2:
        # eight congruent triangles, radial part integrated in closed form
        val, _ = integrate.quad(lambda th: (h / (2 * math.cos(th))) ** (al + 2) / (al + 2), 0, math.pi / 4)
        return c * 8 * val / h**2
    if d == 3:
        # 48 congruent simplices of the cube
        def inner(th, ph):
            rmax = (h / 2) / (math.sin(th) * math.cos(ph))
            return rmax ** (al + 3) / (al + 3) * math.sin(th)

        val, _ = integrate.dblquad(
            inner, 0, math.pi / 4, lambda ph: math.atan(1 / math.cos(ph)), lambda ph: math.pi / 2
        )
        return c * 48 * val / h**3
    raise DomainError("origin-cell average implemented for d <= 3")


class RegularizedKernel:
    """K_zeta = (K * cutoff) * W_zeta on a periodic grid.

    ``method="spectral"`` builds the Fourier symbol from the exact radial
    transforms of K times the cutoff and of W_zeta, so K_zeta * g is an exact
    multiplier on the grid's band and tends to |k|^-2s as zeta -> 0.
    ``method="sampled"`` samples K times the cutoff at the nodes (periodic
    images summed, origin cell replaced by its analytic average) and
    convolves with the normalized W_zeta stencil.
    """

    def __init__(self, d: int, s: float, zeta: float, grid: Grid, method: str = "spectral"):
        if grid.d != d:
            raise DomainError("grid dimension mismatch")
        if not zeta > 0:
            raise DomainError("zeta must be positive")
        riesz_constant(d, s)
        self.d, self.s, self.zeta, self.grid, self.method = d, s, zeta, grid, method
        self.support_radius = 2.0 / zeta + zeta
        self.wraps = 2.0 / zeta > grid.half_length
        if method == "spectral":
            self.symbol = self._spectral_symbol()
        elif method == "sampled":
            self.symbol = self._sampled_symbol()
        else:
            raise DomainError(f"unknown kernel method {method!r}")

    def _spectral_symbol(self) -> np.ndarray:
        g = self.grid
        trunc = _radial_symbol(g, lambda k: _truncated_kernel_hat(k, self.d, self.s, self.zeta))
        return trunc * mollifier_symbol(g, self.zeta)

    def _sampled_symbol(self) -> np.ndarray:
        g = self.grid
        period = 2.0 * g.half_length
        m = int(math.ceil((2.0 / self.zeta + g.half_length) / period)) - 1
        if m > 3:
            raise DomainError("sampled kernel needs the cutoff radius within a few box periods")
        vals = np.zeros(g.shape)
        shifts = np.arange(-m, m + 1) * period
        origin = (g.n // 2,) * g.d
        for offs in np.array(np.meshgrid(*([shifts] * g.d), indexing="ij")).reshape(g.d, -1).T:
            r = np.sqrt(sum((c + o) ** 2 for c, o in zip(g.coords, offs)))
            with np.errstate(divide="ignore"):
                part = truncated_kernel(r, self.d, self.s, self.zeta)
            if not np.any(offs):
                part[origin] = _origin_cell_average(self.d, self.s, g.spacing)
            vals += part
        vals = np.fft.ifftshift(vals, axes=tuple(range(g.d)))
        sym = g.fft(vals) * g.cell_volume
        if self.zeta >= g.spacing:
            stencil = MollifierSpec(self.zeta, self.d).stencil(g)
            sym = sym * g.fft(np.fft.ifftshift(stencil)) * g.cell_volume
        return sym.real

    @cached_property
    def values(self) -> np.ndarray:
        g = self.grid
        raw = g.ifft(self.symbol) / g.cell_volume
        return np.fft.fftshift(raw, axes=tuple(range(g.d)))

    @cached_property
    def gradient_values(self) -> np.ndarray:
        g = self.grid
        kd = g.derivative_wavenumbers
        comps = [np.fft.fftshift(g.ifft(1j * kd[a] * self.symbol) / g.cell_volume) for a in range(g.d)]
        return np.stack(comps)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.grid.ifft(self.grid.fft(u) * self.symbol)

    def apply_gradient_hat(self, u_hat: np.ndarray, staggered: bool = False) -> np.ndarray:
        from .spectral import gradient_hat

        return gradient_hat(u_hat * self.symbol, self.grid, staggered)

    def apply_gradient(self, u: np.ndarray, staggered: bool = False) -> np.ndarray:
        return self.apply_gradient_hat(self.grid.fft(u), staggered)

    def export_csv(self, path) -> None:
        """Profile along the positive first axis: |x|, K_zeta, dK/dr, d2K/dr2."""
        g = self.grid
        mid = (slice(None),) + (g.n // 2,) * (g.d - 1)
        kx = g.wavenumbers[0]
        d2 = np.fft.fftshift(g.ifft(-(kx**2) * self.symbol) / g.cell_volume)
        r = g.axis[g.n // 2 :]
        v = self.values[mid][g.n // 2 :]
        dv = self.gradient_values[0][mid][g.n // 2 :]
        d2v = d2[mid][g.n // 2 :]
        with open(path, "w") as fh:
            fh.write("r,value,first_derivative,second_derivative\n")
            for row in zip(r, v, dv, d2v):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


def build_regularized_kernel(params: ProblemParams, grid: Grid, method: str = "spectral") -> RegularizedKernel:
    ker = RegularizedKernel(params.d, params.s, params.zeta, grid, method)
    if ker.wraps:
        warnings.warn(
            f"cutoff radius 2/zeta = {2 / params.zeta:g} exceeds the box half-length {grid.half_length:g}; "
            "the kernel is periodized",
            RuntimeWarning,
            stacklevel=2,
        )
    return ker


# ---------------------------------------------------------------- nonlinearity


@dataclass(frozen=True)
class PowerLaw:
    m: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("power-law exponent must be >= 1")

    def __call__(self, u):
        return np.maximum(np.asarray(u, dtype=float), 0.0) ** self.m

    def prime(self, u):
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        if self.m == 1:
            return np.ones_like(u)
        return self.m * u ** (self.m - 1)


class TabulatedNonlinearity:
    """User-supplied nondecreasing f on [0, u_max] with f(0) = 0, monotone interpolation."""

    def __init__(self, u, f):
        u, f = np.asarray(u, float), np.asarray(f, float)
        if u[0] != 0 or f[0] != 0:
            raise ConfigError("tabulated f must start at (0, 0)")
        if np.any(np.diff(u) <= 0) or np.any(np.diff(f) < 0):
            raise ConfigError("tabulated f must be nondecreasing on an increasing grid")
        self._p = PchipInterpolator(u, f, extrapolate=True)
        self._dp = self._p.derivative()
        self.u_max = float(u[-1])

    def __call__(self, u):
        return self._p(np.clip(u, 0.0, None))

    def prime(self, u):
        return np.maximum(self._dp(np.clip(u, 0.0, None)), 0.0)


_NQ = 64


def _smoothed_derivative(f, sigma: float, w):
    """(Gamma_sigma * (f' 1_{[0,inf)}))(w) and its w-derivative by Gauss-Legendre in t = (w-y)/sigma."""
    w = np.asarray(w, dtype=float)
    x, wq = roots_legendre(_NQ)
    tau = np.clip(w / sigma, -1.0, 1.0)[..., None]
    # t = tau - (1 + tau) q^2 puts w - sigma t ~ q^2, smoothing the kink of f' 1_{[0,inf)} at t = tau
    # (only needed when the kink lies inside the bump support)
    q = 0.5 * (x + 1.0)
    kink = tau < 1.0
    jac = np.where(kink, 2.0 * (1.0 + tau) * q, 1.0 + tau) * (0.5 * wq)
    t = np.where(kink, tau - (1.0 + tau) * q * q, -1.0 + (1.0 + tau) * q)
    fp = f.prime(np.maximum(w[..., None] - sigma * t, 0.0))
    val = np.sum(jac * _bump_density_1d(t) * fp, axis=-1)
    der = np.sum(jac * _bump_density_1d_prime(t) * fp, axis=-1) / sigma
    return val, der


def _monotone_slopes(x, y, m):
    """Fritsch-Carlson limiting of Hermite slopes; untouched wherever the data already allow a monotone cubic."""
    m = np.array(m, dtype=float)
    delta = np.diff(y) / np.diff(x)
    for i in np.flatnonzero(delta <= 0):
        m[i] = m[i + 1] = 0.0
    ok = delta > 0
    a = np.where(ok, m[:-1] / np.where(ok, delta, 1.0), 0.0)
    b = np.where(ok, m[1:] / np.where(ok, delta, 1.0), 0.0)
    r2 = a * a + b * b
    for i in np.flatnonzero(r2 > 9.0):
        tau = 3.0 / math.sqrt(r2[i])
        m[i] = tau * a[i] * delta[i]
        m[i + 1] = tau * b[i] * delta[i]
    return m


@dataclass
class NonlinearityTable:
    """Tables of f_sigma, f_sigma', f_sigma'' on [-sigma, u_max] with cubic interpolation.

    Beyond the table f_sigma is extended by constants: below -sigma it is
    identically f_sigma(-sigma) and above 2/sigma f_sigma' vanishes.
    """

    f: object
    sigma: float
    u: np.ndarray
    f_s: np.ndarray
    df_s: np.ndarray
    d2f_s: np.ndarray
    q_table: np.ndarray
    h3_convex: bool = True
    _splines: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._splines["f"] = CubicHermiteSpline(self.u, self.f_s, _monotone_slopes(self.u, self.f_s, self.df_s))
        self._splines["df"] = CubicHermiteSpline(self.u, self.df_s, self.d2f_s)
        self._splines["d2f"] = CubicSpline(self.u, self.d2f_s)
        pos = self.u >= 0
        up = self.u[pos]
        dq = np.where(up > 0, (self.df_s[pos] - self.df0) / np.where(up > 0, up, 1.0), self.d2f0)
        self._splines["q"] = CubicHermiteSpline(up, self.q_table, dq)
        self._q1 = float(self._splines["q"](1.0)) if self.u[-1] >= 1.0 else float(self._q_direct(1.0))
        self._f1 = float(self.value(1.0))

    @property
    def u_max(self) -> float:
        return float(self.u[-1])

    @property
    def df0(self) -> float:
        return float(_smoothed_derivative(self.f, self.sigma, np.array(0.0))[0])

    @property
    def d2f0(self) -> float:
        v, dv = _smoothed_derivative(self.f, self.sigma, np.array(0.0))
        return float(dv * plateau(0.0) + v * self.sigma * _plateau_prime(0.0))

    def _eval(self, key, u, below, above):
        u = np.asarray(u, dtype=float)
        out = self._splines[key](np.clip(u, self.u[0], self.u[-1]))
        out = np.where(u < self.u[0], below, out)
        if np.any(u > self.u[-1]):
            if self.u[-1] < 2.0 / self.sigma:
                raise DomainError(f"argument {u.max():g} beyond the nonlinearity table (u_max={self.u[-1]:g})")
            out = np.where(u > self.u[-1], above, out)
        return out

    def value(self, u):
        return self._eval("f", u, self.f_s[0], self.f_s[-1])

    def prime(self, u):
        # f_sigma' >= 0 by construction; the clamp only removes interpolation roundoff
        return np.maximum(self._eval("df", u, 0.0, 0.0), 0.0)

    def second(self, u):
        return self._eval("d2f", u, 0.0, 0.0)

    __call__ = value

    def _q_direct(self, u: float) -> float:
        val, _ = integrate.quad(
            lambda w: (float(_fsigma_prime_exact(self.f, self.sigma, np.array(w))) - self.df0) / w, 0, u
        )
        return val

    def entropy_density(self, u):
        """h(u) = h_sigma(u) + f_sigma(1) u with h(0) = h(1) = 0; zero for u <= 0."""
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        m = u > 0
        up = u[m]
        if np.any(up > self.u[-1]):
            raise DomainError("density beyond the entropy table")
        g = self.df0 * np.log(up) + self._splines["q"](up) - self._q1
        out[m] = up * g - self.value(up) + self._f1 * up
        return out

    def export_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("u,value,first_derivative,second_derivative\n")
            for row in zip(self.u, self.f_s, self.df_s, self.d2f_s):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _fsigma_prime_exact(f, sigma, w):
    v, _ = _smoothed_derivative(f, sigma, w)
    return v * plateau(sigma * np.asarray(w, dtype=float))


def build_nonlinearity(f=None, sigma: float = 0.1, u_max: float | None = None, table_size: int = 4096) -> NonlinearityTable:
    """Tabulate f_sigma(u) = int_0^u (Gamma_sigma * (f' 1_{[0,inf)}))(w) Xi(sigma w) dw."""
    if f is None:
        f = PowerLaw(1.0)
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    if u_max is None:
        u_max = 2.0 / sigma + sigma
    if not u_max > 0 or table_size < 16:
        raise DomainError("need u_max > 0 and at least 16 table nodes")
    # graded nodes: the smoothing acts on the scale sigma next to u = 0
    n_neg = max(8, table_size // 64)
    knee = 4.0 * sigma
    if u_max > 2 * knee:
        n_near = table_size // 4
        pos = np.concatenate(
            [np.linspace(0.0, knee, n_near + 1)[:-1], np.geomspace(knee, u_max, table_size - n_neg - n_near)]
        )
    else:
        pos = np.linspace(0.0, u_max, table_size - n_neg)
    u = np.concatenate([np.linspace(-sigma, 0.0, n_neg + 1)[:-1], pos])
    v, dv = _smoothed_derivative(f, sigma, u)
    pl = plateau(sigma * u)
    df = v * pl
    d2f = dv * pl + v * sigma * _plateau_prime(sigma * u)

    xg, wg = roots_legendre(8)

    def panel_integrals(a, b, integrand):
        pts = 0.5 * (b - a)[:, None] * xg + 0.5 * (a + b)[:, None]
        return 0.5 * (b - a) * (integrand(pts) @ wg)

    fp = lambda w: _fsigma_prime_exact(f, sigma, w)
    cum = np.concatenate([[0.0], np.cumsum(panel_integrals(u[:-1], u[1:], fp))])
    f_s = cum - cum[n_neg]

    df0 = float(fp(np.array(0.0)))
    up = u[n_neg:]

    def reg(w):
        return (fp(w) - df0) / w

    q = np.concatenate([[0.0], np.cumsum(panel_integrals(up[:-1], up[1:], reg))])

    if np.any(df < -1e-14):
        raise DomainError("f_sigma' negative on the table")
    if np.any(np.diff(f_s) < -1e-12 * max(1.0, np.abs(f_s).max())):
        raise DomainError("f_sigma not monotone on the table")
    # strict convexity of u f(u) for the raw nonlinearity, checked on the positive nodes
    uu = up[up > 0]
    h3 = bool(np.all(np.diff(np.diff(uu * f(uu)) / np.diff(uu)) > 0)) if uu.size > 2 else True
    if not h3:
        warnings.warn("u f(u) is not strictly convex on the table", RuntimeWarning, stacklevel=2)
    return NonlinearityTable(f, sigma, u, f_s, df, d2f, q, h3)


# ---------------------------------------------------------------- initial data


def named_density(name: str, grid: Grid, **kw) -> np.ndarray:
    """Closed-form initial densities sampled at the nodes."""
    x = grid.coords
    r2 = sum(c * c for c in x)
    d = grid.d
    if name == "gaussian":
        var = kw.get("variance", 0.25)
        mass = kw.get("mass", 1.0)
        return mass * np.exp(-r2 / (2 * var)) / (2 * math.pi * var) ** (d / 2)
    if name == "double-bump":
        sep = kw.get("separation", 1.5)
        var = kw.get("variance", 0.5)
        e = np.zeros(d)
        e[0] = sep
        g = lambda c: np.exp(-sum((xi - ci) ** 2 for xi, ci in zip(x, c)) / (2 * var))
        return 0.5 * (g(e) + g(-e)) / (2 * math.pi * var) ** (d / 2)
    if name == "plateau":
        radius = kw.get("radius", 1.0)
        vals = plateau(np.sqrt(r2) / radius)
        return vals / (vals.sum() * grid.cell_volume)
    if name == "constant":
        return np.full(grid.shape, kw.get("level", 1.0))
    raise ConfigError(f"unknown initial density {name!r}")


@dataclass
class InitialDatum:
    grid: Grid
    sigma: float
    rho0: np.ndarray
    kappa_sigma: float
    rho0_sigma: np.ndarray

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.rho0)


def regularize_initial(rho0: np.ndarray | Callable, sigma: float, grid: Grid) -> InitialDatum:
    """rho0_sigma = kappa_sigma (W_sigma * rho0) Xi(sigma x) with kappa_sigma restoring the mass."""
    if callable(rho0):
        rho0 = np.asarray(rho0(*grid.coords), dtype=float)
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != grid.shape:
        raise DomainError("initial density does not match the grid")
    if np.any(rho0 < 0):
        raise DomainError("initial density must be nonnegative")
    if sigma > 0:
        # nonnegative unit-mass nodal stencil: no ringing, so the cutoff only removes mass and kappa >= 1
        stencil = MollifierSpec(sigma, grid.d).stencil(grid, normalize=True)
        smooth = np.maximum(convolve(rho0, stencil, grid), 0.0) * plateau(sigma * grid.radius)
    else:
        smooth = rho0.copy()
    mass0 = rho0.sum()
    mass1 = smooth.sum()
    if not mass1 > 0:
        raise DomainError("regularized initial datum has zero mass")
    kappa = float(mass0 / mass1)
    return InitialDatum(grid, sigma, rho0, kappa, kappa * smooth)
