"""Operator test battery shared by the CLI and the test-suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import i0e

from .kernels import MollifierSpec, riesz_constant, sphere_area
from .spectral import (
    Grid,
    convolve,
    dirichlet_form,
    gradient,
    frac_laplacian,
    frac_laplacian_pointwise,
    inequality_probe,
    inv_frac_laplacian,
    lp_norm,
    pressure_gradient,
)

__all__ = ["BatteryItem", "plane_wave_errors", "composition_error", "singular_integral_error",
           "young_ratios", "lattice_dirichlet_form", "gn1_dilation_spread", "smooth_test_fields",
           "mollifier_ratios", "operator_battery"]


@dataclass(frozen=True)
class BatteryItem:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def plane_wave_errors(grid: Grid, s: float, mode=(1, 2, 0)) -> dict:
    """Relative errors of the three multipliers on a single Fourier mode."""
    kvec = [math.pi / grid.half_length * m for m in mode[: grid.d]]
    phase = sum(k * c for k, c in zip(kvec, grid.coords))
    kk = math.sqrt(sum(k * k for k in kvec))
    u = np.cos(phase)
    grad = pressure_gradient(np.sin(phase), s, grid)
    return {
        "inv": _rel(inv_frac_laplacian(u, s, grid), kk ** (-2 * s) * u),
        "frac": _rel(frac_laplacian(u, s, grid), kk ** (2 * s) * u),
        "grad": max(
            _rel(grad[a], k * kk ** (-2 * s) * np.cos(phase)) if k else float(np.max(np.abs(grad[a])))
            for a, k in enumerate(kvec)
        ),
    }


def composition_error(grid: Grid, s: float, seed: int = 0) -> float:
    """(-Delta)^{-s} (-Delta)^{s} on a random mean-zero field."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(grid.shape)
    u -= u.mean()
    return _rel(inv_frac_laplacian(frac_laplacian(u, s, grid), s, grid), u)


def _gaussian_spherical_mean(x, a2):
    rx = float(np.linalg.norm(x))
    return lambda r: 2 * math.pi * math.exp(-(rx * rx + r * r) / (2 * a2) + rx * r / a2) * i0e(rx * r / a2)


def singular_integral_error(grid: Grid, s: float, a2: float = 0.25, radius: float = 2.0, stride: int = 4) -> float:
    """Relative sup difference between the spectral (-Delta)^s and the pointwise singular integral.

    Test function exp(-|x|^2/(2 a2)) in d = 2, probed on interior nodes.
    """
    if grid.d != 2:
        raise ValueError("the closed-form spherical mean is for d = 2")
    u = np.exp(-sum(c * c for c in grid.coords) / (2 * a2))
    spec = frac_laplacian(u, s, grid)
    uf = lambda p: np.exp(-np.sum(p * p, axis=-1) / (2 * a2))
    c0 = grid.n // 2
    span = int(radius / grid.spacing)
    errs, vals = [], []
    for i in range(c0 - span, c0 + span + 1, stride):
        for j in range(c0 - span, c0 + span + 1, stride):
            x = np.array([grid.axis[i], grid.axis[j]])
            ref = frac_laplacian_pointwise(uf, x, s, spherical_mean=_gaussian_spherical_mean(x, a2))
            errs.append(abs(spec[i, j] - ref))
            vals.append(abs(ref))
    return max(errs) / max(vals)


def young_ratios(grid: Grid, seed: int = 0) -> dict:
    """||u*v||_r / (||u||_p ||v||_q) for random nonnegative fields."""
    rng = np.random.default_rng(seed)
    u = rng.random(grid.shape)
    v = rng.random(grid.shape) ** 3
    w = convolve(u, v, grid)
    out = {}
    for p, q, r in ((1, 1, 1), (1, 2, 2), (2, 2, np.inf)):
        out[(p, q, r)] = lp_norm(w, r, grid) / (lp_norm(u, p, grid) * lp_norm(v, q, grid))
    return out


def lattice_dirichlet_form(g: np.ndarray, s: float, grid: Grid, images: int = 6) -> float:
    """(c_{d,1-s}/2) sum_x sum_y (g(x)-g(y))^2 / |x-y|^{d+2(1-s)} h^{2d} over the periodic lattice.

    Shifts up to ``images`` box periods are summed directly, the far tail is
    added in closed form and the excluded diagonal cell uses the quadratic
    Taylor model with centred-difference gradients.
    """
    d, h, n = grid.d, grid.spacing, grid.n
    c = riesz_constant(d, s, "one_minus")
    alpha = d + 2 * (1 - s)
    m = images * n
    rng = np.arange(-m, m + 1)
    Z = np.meshgrid(*([rng] * d), indexing="ij")
    r = h * np.sqrt(sum(z * z for z in Z))
    G = np.fft.fftn(g)
    # shift-structure function: sum_x (g(x+z) - g(x))^2 h^d
    S = 2 * np.sum(g * g) * h**d - 2 * np.real(np.fft.ifftn(np.abs(G) ** 2)) * h**d
    w = np.zeros_like(r)
    inner = (r > 0) & (r <= h * m)
    w[inner] = r[inner] ** (-alpha)
    total = np.sum(S[tuple(np.mod(z, n) for z in Z)] * w) * h**d
    tail = 2 * np.sum((g - g.mean()) ** 2) * h**d * sphere_area(d) * (h * m) ** (2 * s - 2) / (2 - 2 * s)
    grads = sum(((np.roll(g, -1, a) - np.roll(g, 1, a)) / (2 * h)) ** 2 for a in range(d))
    if d == 1:
        cell = 2 * (h / 2) ** (2 * s) / (2 * s)
    elif d == 2:
        cell = 8 * integrate.quad(lambda th: (h / (2 * math.cos(th))) ** (2 * s) / (2 * s), 0, math.pi / 4)[0]
    else:
        raise ValueError("lattice form implemented for d <= 2")
    diag = np.sum(grads) * h**d * cell / d
    return 0.5 * c * (total + tail + diag)


def gn1_dilation_spread(grid: Grid, s: float, p: float, lams=(0.5, 1.0, 2.0)) -> float:
    """Relative spread max/min - 1 of the GN1 ratio over dilations of exp(-2|x|^2)."""
    r2 = sum(c * c for c in grid.coords)
    ratios = [inequality_probe(np.exp(-2 * lam**2 * r2), "GN1", grid, s=s, p=p).ratio for lam in lams]
    return max(ratios) / min(ratios) - 1


def smooth_test_fields(grid: Grid) -> dict:
    """Three smooth fields with different length scales (d = 2)."""
    x, y = grid.coords[0], grid.coords[-1]
    L = grid.half_length
    return {
        "gaussian": np.exp(-(x * x + y * y)),
        "modes": np.cos(math.pi * x / L) * np.sin(2 * math.pi * y / L) + 0.5 * np.cos(3 * math.pi * (x + y) / L),
        "dipole": np.exp(-((x - 1) ** 2 + y * y) / 0.5) - 0.7 * np.exp(-((x + 1.5) ** 2 + (y - 1) ** 2) / 0.3),
    }


def mollifier_ratios(u: np.ndarray, grid: Grid, p: float, betas) -> list:
    """||W_beta * u - u||_p / (beta ||grad u||_p) with the exact bump symbol."""
    gnorm = lp_norm(np.sqrt(sum(c * c for c in gradient(u, grid))), p, grid)
    return [lp_norm(MollifierSpec(b, grid.d).apply(u, grid) - u, p, grid) / (b * gnorm) for b in betas]


def operator_battery(grid: Grid, s: float = 0.5, fast: bool = False) -> list[BatteryItem]:
    items = []
    for sv in sorted({s, 0.25, 0.5, 0.75}):
        pw = plane_wave_errors(grid, sv)
        items += [BatteryItem(f"plane_wave_{k}_s{sv}", v, 1e-12) for k, v in pw.items()]
        items.append(BatteryItem(f"composition_s{sv}", composition_error(grid, sv), 1e-12))
    rng = np.random.default_rng(1)
    u = rng.standard_normal(grid.shape)
    items.append(BatteryItem("fft_round_trip", _rel(grid.ifft(grid.fft(u)), u), 1e-12))
    u -= u.mean()
    items.append(
        BatteryItem(
            "multiplier_commute",
            _rel(inv_frac_laplacian(inv_frac_laplacian(u, 0.3, grid), 0.4, grid), inv_frac_laplacian(u, 0.7, grid)),
            1e-12,
        )
    )
    for key, ratio in young_ratios(grid).items():
        items.append(BatteryItem(f"young_{key[0]}_{key[1]}_{'inf' if key[2] == np.inf else key[2]}", ratio, 1 + 1e-10))
    coarse = Grid(grid.d, grid.half_length, 16)
    if grid.d <= 2:
        x = coarse.coords
        g = np.cos(math.pi * x[0] / coarse.half_length) + 0.3 * np.cos(math.pi * (x[0] + x[-1]) / coarse.half_length)
        spec = dirichlet_form(g, s, coarse)
        items.append(BatteryItem(f"dirichlet_form_s{s}", abs(lattice_dirichlet_form(g, s, coarse) / spec - 1), 0.05))
    if s <= 0.5:
        items.append(BatteryItem(f"gn1_dilation_s{s}", gn1_dilation_spread(grid, s, 2.0), 0.05))
    if grid.d == 2 and not fast:
        g256 = grid if grid.n >= 256 else Grid(2, grid.half_length, 256)
        for sv in (0.25, 0.5, 0.75):
            items.append(BatteryItem(f"singular_integral_s{sv}", singular_integral_error(g256, sv), 1e-2))
    return items
