"""Periodic-box discretization and Fourier-multiplier fractional calculus.

The whole space is replaced by the torus ``[-L, L)^d`` sampled on ``n`` nodes
per axis.  Node ``j`` sits at ``x_j = -L + j*h`` so the origin is node
``n // 2``.  All multiplier operators act on real arrays of shape
``(n,) * d`` through ``numpy.fft.rfftn``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .errors import DomainError

__all__ = [
    "Grid",
    "Field",
    "inv_frac_laplacian",
    "frac_laplacian",
    "frac_laplacian_pointwise",
    "gradient",
    "pressure_gradient",
    "convolve",
    "dealias_mask",
    "lp_norm",
    "hs_seminorm",
    "dirichlet_form",
    "ProbeReport",
    "inequality_probe",
    "gn2_theta",
    "write_field",
    "read_field",
    "write_field_csv",
]


@dataclass(frozen=True)
class Grid:
    d: int
    half_length: float
    n: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise DomainError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 4 or self.n & (self.n - 1):
            raise DomainError(f"points per dimension must be a power of two >= 4, got {self.n}")
        if not self.half_length > 0:
            raise DomainError("half_length must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_length / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.d

    @property
    def box_volume(self) -> float:
        return (2.0 * self.half_length) ** self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.half_length + self.spacing * np.arange(self.n)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.coords))

    @cached_property
    def _k1d(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Per-axis angular wavenumbers broadcast to the rfftn layout."""
        full = self._k1d
        half = 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.spacing)
        out = []
        for ax in range(self.d):
            k = half if ax == self.d - 1 else full
            shape = [1] * self.d
            shape[ax] = k.size
            out.append(k.reshape(shape))
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(k * k for k in self.wavenumbers) + np.zeros(self.spectral_shape)

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.d - 1) + (self.n // 2 + 1,)

    @cached_property
    def derivative_wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Wavenumbers with the Nyquist entry zeroed, for odd-order derivatives."""
        out = []
        for k in self.wavenumbers:
            k = k.copy()
            k[np.isclose(np.abs(k), np.pi / self.spacing)] = 0.0
            out.append(k)
        return tuple(out)

    def power_symbol(self, p: float) -> np.ndarray:
        """|k|^p with the zero mode set to 0."""
        out = np.zeros(self.spectral_shape)
        nz = self.k2 > 0
        out[nz] = self.k2[nz] ** (0.5 * p)
        return out

    def fft(self, u: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(u, axes=tuple(range(-self.d, 0)))

    def ifft(self, u_hat: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(u_hat, s=self.shape, axes=tuple(range(-self.d, 0)))

    def integrate(self, u: np.ndarray) -> float:
        return float(np.sum(u) * self.cell_volume)

    def check_margin(self, rho: np.ndarray, tol: float = 1e-8) -> float:
        """Fraction of mass outside ``[-L/2, L/2]^d``; raises if above ``tol``."""
        inner = np.ones(self.shape, dtype=bool)
        for c in self.coords:
            inner &= np.abs(c) <= 0.5 * self.half_length
        total = float(np.sum(rho))
        frac = float(np.sum(rho[~inner])) / total if total > 0 else 0.0
        if frac > tol:
            raise DomainError(
                f"{frac:.3e} of the mass lies outside [-L/2, L/2]^d (limit {tol:g}); enlarge the box"
            )
        return frac


@dataclass
class Field:
    """Grid-sampled values; ``values`` has shape ``grid.shape`` or ``(c,) + grid.shape``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-self.grid.d :] != self.grid.shape:
            raise DomainError("field values do not match the grid shape")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field contains non-finite values")


def _check_shape(u: np.ndarray, grid: Grid) -> None:
    if u.shape[-grid.d :] != grid.shape:
        raise DomainError(f"array of shape {u.shape} does not live on grid {grid.shape}")


def inv_frac_laplacian(u: np.ndarray, s: float, grid: Grid) -> np.ndarray:
    """(-Delta)^{-s} u with the zero mode gauged to 0.

    Orders up to ``d/2`` are accepted for experiments beyond the unit interval.
    """
    if not 0 < s < grid.d / 2:
        raise DomainError(f"order s must lie in (0, d/2), got {s}")
    _check_shape(u, grid)
    return grid.ifft(grid.fft(u) * grid.power_symbol(-2.0 * s))


def frac_laplacian(u: np.ndarray, s: float, grid: Grid) -> np.ndarray:
    """(-Delta)^s u via the multiplier |k|^{2s}."""
    if s <= 0:
        raise DomainError("order must be positive")
    _check_shape(u, grid)
    return grid.ifft(grid.fft(u) * grid.power_symbol(2.0 * s))


def frac_laplacian_pointwise(
    u, x, s: float, *, spherical_mean=None, r_max: float = 50.0, r_taylor: float = 1e-2, n_angles: int = 64
) -> float:
    """c_{d,s} PV int (u(x) - u(y)) / |x - y|^{d+2s} dy at one point, by polar quadrature.

    ``u`` maps an (m, d) array of points to values.  The spherical mean of u
    around x is taken by quadrature (or from ``spherical_mean(r)`` when a
    closed form is known); it deviates from u(x) by O(r^2), and inside
    ``r_taylor`` that quadratic term is integrated in closed form.  Beyond ``r_max`` u is assumed negligible
    and the tail u(x) |S| r_max^{-2s} / (2s) is added in closed form.
    """
    from scipy import integrate
    from scipy.special import gamma

    x = np.asarray(x, dtype=float)
    d = x.size
    if not 0 < s < 1:
        raise DomainError("order must lie in (0, 1)")
    area = 2 * math.pi ** (d / 2) / gamma(d / 2)
    c = 4**s * gamma(d / 2 + s) / (math.pi ** (d / 2) * abs(gamma(-s)))
    if d == 1:
        dirs, wts = np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    elif d == 2:
        th = 2 * math.pi * np.arange(n_angles) / n_angles
        dirs, wts = np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n_angles, 2 * math.pi / n_angles)
    elif d == 3:
        zc, zw = np.polynomial.legendre.leggauss(n_angles // 2)
        ph = 2 * math.pi * np.arange(n_angles) / n_angles
        Z, P = np.meshgrid(zc, ph, indexing="ij")
        rr = np.sqrt(1 - Z**2)
        dirs = np.stack([rr * np.cos(P), rr * np.sin(P), Z], axis=-1).reshape(-1, 3)
        wts = (zw[:, None] * np.full(n_angles, 2 * math.pi / n_angles)[None, :]).ravel()
    else:
        raise DomainError("pointwise oracle implemented for d <= 3")
    u0 = float(np.asarray(u(x[None, :]))[0])
    if spherical_mean is None:
        spherical_mean = lambda r: float(wts @ np.asarray(u(x[None, :] + r * dirs)))

    def integrand(r):
        return (area * u0 - spherical_mean(r)) * r ** (-1 - 2 * s)

    # inner ball: quadratic model area*u0 - mean(r) = a r^2 fitted at r_taylor, integrated exactly
    a2 = (area * u0 - spherical_mean(r_taylor)) / r_taylor**2
    val = a2 * r_taylor ** (2 - 2 * s) / (2 - 2 * s)
    cuts = [r_taylor] + [r for r in (0.25, 1.0, 4.0) if r_taylor < r < r_max] + [r_max]
    val += sum(
        integrate.quad(integrand, a, b, limit=500, epsabs=1e-14, epsrel=1e-10)[0] for a, b in zip(cuts, cuts[1:])
    )
    return c * (val + area * u0 * r_max ** (-2 * s) / (2 * s))


def _shift_phase(grid: Grid, axis: int, shift: float) -> np.ndarray | float:
    if shift == 0.0:
        return 1.0
    return np.exp(1j * grid.wavenumbers[axis] * shift * grid.spacing)


def gradient_hat(u_hat: np.ndarray, grid: Grid, staggered: bool = False) -> np.ndarray:
    """Spectral gradient from Fourier coefficients.

    ``staggered`` evaluates component ``i`` at the face ``x + h/2 e_i``.
    """
    kd = grid.derivative_wavenumbers
    shift = 0.5 if staggered else 0.0
    comps = [grid.ifft(1j * kd[ax] * _shift_phase(grid, ax, shift) * u_hat) for ax in range(grid.d)]
    return np.stack(comps)


def gradient(u: np.ndarray, grid: Grid, staggered: bool = False) -> np.ndarray:
    _check_shape(u, grid)
    return gradient_hat(grid.fft(u), grid, staggered)


def pressure_gradient(rho_f: np.ndarray, s: float, grid: Grid, staggered: bool = False) -> np.ndarray:
    """grad (-Delta)^{-s} rho_f, shape ``(d,) + grid.shape``."""
    if not 0 < s < grid.d / 2:
        raise DomainError(f"order s must lie in (0, d/2), got {s}")
    _check_shape(rho_f, grid)
    return gradient_hat(grid.fft(rho_f) * grid.power_symbol(-2.0 * s), grid, staggered)


def convolve(u: np.ndarray, v: np.ndarray, grid: Grid) -> np.ndarray:
    """Periodic convolution ``sum_j u(x_j) v(x - x_j) h^d``.

    Both arrays are in node layout, so ``v`` has its origin at index ``n//2``.
    """
    _check_shape(u, grid)
    _check_shape(v, grid)
    axes = tuple(range(-grid.d, 0))
    v0 = np.fft.ifftshift(v, axes=axes)
    return grid.ifft(grid.fft(u) * grid.fft(v0)) * grid.cell_volume


def dealias_mask(grid: Grid) -> np.ndarray:
    """2/3-rule filter in the rfftn layout: keep |k_a| < (2/3) k_max on every axis."""
    kmax = np.pi / grid.spacing
    keep = np.ones(grid.spectral_shape, dtype=bool)
    for k in grid.wavenumbers:
        keep &= np.abs(k) < (2.0 / 3.0) * kmax
    return keep.astype(float)


def lp_norm(u: np.ndarray, p: float, grid: Grid) -> float:
    if p == np.inf:
        return float(np.max(np.abs(u)))
    if p < 1:
        raise DomainError("p must be in [1, inf]")
    return float((np.sum(np.abs(u) ** p) * grid.cell_volume) ** (1.0 / p))


def hs_seminorm(u: np.ndarray, order: float, grid: Grid) -> float:
    """Homogeneous seminorm (sum |k|^{2 order} |u_k|^2)^{1/2} by Plancherel."""
    _check_shape(u, grid)
    coef = np.fft.fftn(u) / u.size
    k2 = sum(np.meshgrid(*([grid._k1d**2] * grid.d), indexing="ij"))
    return float(np.sqrt(grid.box_volume * np.sum(k2**order * np.abs(coef) ** 2)))


def dirichlet_form(g: np.ndarray, s: float, grid: Grid) -> float:
    """||grad (-Delta)^{-s/2} g||_2^2."""
    return hs_seminorm(g, 1.0 - s, grid) ** 2


def _sum_norm(components, p, grid) -> float:
    return sum(lp_norm(c, p, grid) for c in components)


def _second_derivatives(u: np.ndarray, grid: Grid) -> list[np.ndarray]:
    u_hat = grid.fft(u)
    kd = grid.wavenumbers
    return [grid.ifft(-kd[i] * kd[j] * u_hat) for i, j in combinations_with_replacement(range(grid.d), 2)]


@dataclass(frozen=True)
class ProbeReport:
    which: str
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs


def gn2_theta(d: int, p: float, q: float, s: float) -> float:
    return 1.0 + d / p - d / q - 2.0 * s


def inequality_probe(
    u: np.ndarray,
    which: str,
    grid: Grid,
    *,
    s: float,
    p: float,
    q: float | None = None,
    r: float | None = None,
    v: np.ndarray | None = None,
) -> ProbeReport:
    """Left side, constant-free right side and their ratio for one inequality.

    Derivative norms follow the convention that ``||D^k u||_p`` sums the
    L^p norms of all distinct partial derivatives of order ``k``.
    """
    d = grid.d
    if which == "GN1":
        if not (1 < p < np.inf and 0 < s <= 1):
            raise DomainError("GN1 needs 1 < p < inf and 0 < s <= 1")
        lhs = lp_norm(frac_laplacian(u, s, grid), p, grid)
        if s <= 0.5:
            du = _sum_norm(gradient(u, grid), p, grid)
            rhs = lp_norm(u, p, grid) ** (1 - 2 * s) * du ** (2 * s)
        else:
            d2u = _sum_norm(_second_derivatives(u, grid), p, grid)
            rhs = lp_norm(u, p, grid) ** (1 - s) * d2u**s
    elif which == "GN2":
        if q is None or not (0 < s <= 0.5 and 1 < p < np.inf and p <= q < np.inf):
            raise DomainError("GN2 needs 0 < s <= 1/2, 1 < p < inf and p <= q < inf")
        if p < d / (2 * s) and q > d * p / (d - 2 * s * p) * (1 + 1e-12):
            raise DomainError("GN2 needs q <= dp/(d - 2sp) when p < d/(2s)")
        theta = gn2_theta(d, p, q, s)
        if not -1e-12 <= theta <= 1 + 1e-12:
            raise DomainError(f"GN2 exponent theta={theta} outside [0, 1]")
        grad_u = gradient(u, grid)
        lhs = _sum_norm([inv_frac_laplacian(g, s, grid) for g in grad_u], q, grid)
        rhs = lp_norm(u, p, grid) ** (1 - theta) * _sum_norm(grad_u, p, grid) ** theta
    elif which == "HLS":
        if not (0 < s < 1 and 1 < p < d / (2 * s)):
            raise DomainError("HLS needs 0 < s < 1 and 1 < p < d/(2s)")
        q_hls = d * p / (d - 2 * s * p)
        if q is not None and not math.isclose(1 / p, 1 / q + 2 * s / d, rel_tol=1e-12):
            raise DomainError("HLS needs 1/p = 1/q + 2s/d")
        lhs = lp_norm(inv_frac_laplacian(u, s, grid), q_hls, grid)
        rhs = lp_norm(u, p, grid)
    elif which == "HLS2":
        if v is None or q is None or r is None:
            raise DomainError("HLS2 needs a second field v and exponents q, r")
        if not (0.5 < s < 1 and 1 <= p < q < np.inf):
            raise DomainError("HLS2 needs 1/2 < s < 1 and 1 <= p < q < inf")
        if not math.isclose(1 / q + 1 / r, 1 / p + (2 * s - 1) / d, rel_tol=1e-12):
            raise DomainError("HLS2 needs 1/q + 1/r = 1/p + (2s-1)/d")
        grad_pv = pressure_gradient(v, s, grid)
        lhs = _sum_norm([u * g for g in grad_pv], p, grid)
        rhs = lp_norm(u, q, grid) * lp_norm(v, r, grid)
    else:
        raise DomainError(f"unknown inequality {which!r}")
    return ProbeReport(which, lhs, rhs)


# Binary snapshot: little-endian int64 d, int64 n, float64 L, then row-major float64 values.
_HEADER = struct.Struct("<qqd")


def write_field(path, values: np.ndarray, grid: Grid) -> None:
    _check_shape(values, grid)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(grid.d, grid.n, grid.half_length))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field(path) -> Field:
    raw = Path(path).read_bytes()
    d, n, half_length = _HEADER.unpack_from(raw)
    grid = Grid(d, half_length, n)
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return Field(grid, values.reshape(grid.shape).copy())


def write_field_csv(path, values: np.ndarray, grid: Grid) -> None:
    """One row per node: coordinates then value."""
    _check_shape(values, grid)
    names = ["x", "y", "z"][: grid.d]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names + ["value"]) + "\n")
        flat = [c.ravel() for c in grid.coords] + [values.ravel()]
        for row in zip(*flat):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
