"""Coupled particle systems: micro (kernel density drift), intermediate and macro (grid drifts)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import DomainError, EscapeError
from .kernels import InitialDatum, MollifierSpec, NonlinearityTable, RegularizedKernel, bump_constant
from .pde import PdeSolver, PdeState
from .spectral import Grid

__all__ = [
    "RngSpec",
    "DriftMode",
    "CoupledEnsemble",
    "morton_order",
    "sample_initial",
    "deposit",
    "gather",
    "kde_grid",
    "drift_micro",
    "drift_micro_bruteforce",
    "drift_from_density",
    "em_step",
    "new_ensemble",
    "write_ensemble",
    "read_ensemble",
    "write_trajectory_csv",
]

NOISE, INIT, RESAMPLE, DIRECTIONS = 0, 1, 2, 3


@dataclass(frozen=True)
class RngSpec:
    """Counter-based streams: key (seed, replica), counter (0, step, purpose, 0).

    Draws for particle i are the i-th row of a row-major block, so they do
    not depend on N, thread count or iteration order.
    """

    seed: int
    replica: int = 0

    def generator(self, step: int, purpose: int = NOISE) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.replica % 2**64], dtype=np.uint64)
        counter = np.array([0, step % 2**64, purpose, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, step: int, n: int, d: int, purpose: int = NOISE) -> np.ndarray:
        return self.generator(step, purpose).standard_normal((n, d))

    def uniforms(self, step: int, n: int, d: int, purpose: int = INIT) -> np.ndarray:
        return self.generator(step, purpose).random((n, d))


@dataclass(frozen=True)
class DriftMode:
    variant: str = "shared"

    def __post_init__(self):
        if self.variant not in ("shared", "exact", "bruteforce"):
            raise DomainError(f"unknown drift mode {self.variant!r}")


@dataclass
class CoupledEnsemble:
    X: np.ndarray
    Xbar: np.ndarray
    Xhat: np.ndarray
    rng: RngSpec
    t: float = 0.0
    step: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------- sampling


def morton_order(grid: Grid) -> np.ndarray:
    """Flat node indices sorted along the Z-order curve."""
    idx = np.indices(grid.shape).reshape(grid.d, -1)
    bits = int(math.log2(grid.n))
    code = np.zeros(idx.shape[1], dtype=np.int64)
    for b in range(bits):
        for a in range(grid.d):
            code |= ((idx[a] >> b) & 1) << (b * grid.d + (grid.d - 1 - a))
    return np.argsort(code, kind="stable")


def sample_initial(density: np.ndarray | InitialDatum, n: int, rng: RngSpec, grid: Grid | None = None) -> np.ndarray:
    """Inverse-CDF sampling of cells in Z-order, uniform jitter inside the cell around each node."""
    if isinstance(density, InitialDatum):
        grid = density.grid
        density = density.rho0_sigma
    if grid is None:
        raise DomainError("a grid is required for array densities")
    w = np.maximum(np.asarray(density, dtype=float), 0.0).ravel()
    order = morton_order(grid)
    cdf = np.cumsum(w[order])
    if not cdf[-1] > 0:
        raise DomainError("cannot sample from a zero-mass density")
    cdf /= cdf[-1]
    u = rng.uniforms(0, n, grid.d + 1, INIT)
    cell = order[np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), cdf.size - 1)]
    nodes = np.stack(np.unravel_index(cell, grid.shape), axis=-1)
    return grid.axis[nodes] + (u[:, 1:] - 0.5) * grid.spacing


# ---------------------------------------------------------------- transfer


def _check_inside(pos: np.ndarray, grid: Grid) -> None:
    L = grid.half_length
    if pos.size and (np.any(pos < -L) or np.any(pos >= L) or not np.all(np.isfinite(pos))):
        raise EscapeError("a particle left the box [-L, L)^d; enlarge half_length")


def deposit(pos: np.ndarray, beta: float, grid: Grid, weight: float = 1.0) -> np.ndarray:
    """sum_j weight * W_beta(x - X_j) at every node (exact nodal values)."""
    pos = np.ascontiguousarray(pos, dtype=float)
    _check_inside(pos, grid)
    scale = weight * bump_constant(grid.d) / beta**grid.d
    return _backend.deposit_bump(pos, beta, grid.half_length, grid.n, scale).reshape(grid.shape)


def gather(values: np.ndarray, pos: np.ndarray, grid: Grid) -> np.ndarray:
    """Multilinear interpolation; ``values`` may carry leading component axes."""
    pos = np.ascontiguousarray(pos, dtype=float)
    _check_inside(pos, grid)
    lead = values.shape[: values.ndim - grid.d]
    flat = values.reshape((-1,) + (grid.n**grid.d,))
    out = np.stack([_backend.gather_linear(np.ascontiguousarray(f), grid.n, grid.half_length, pos) for f in flat])
    return out.reshape(lead + (pos.shape[0],))


def kde_grid(pos: np.ndarray, beta: float, grid: Grid) -> np.ndarray:
    """(1/N) sum_j W_beta(x - X_j)."""
    return deposit(pos, beta, grid, 1.0 / pos.shape[0])


def _check_beta(beta: float, grid: Grid) -> None:
    if beta < 2 * grid.spacing:
        raise DomainError(f"beta={beta:g} is below two grid spacings ({2 * grid.spacing:g}); the density estimate is under-resolved")


def _local_self_correction(pos, kde, beta, kernel: RegularizedKernel, table: NonlinearityTable, grid: Grid):
    """Removes particle i from its own density estimate.

    With D_i = f(kde) - f(kde - W_beta(. - X_i)/N), supported on the beta-ball,
    returns interp(grad K_zeta * D_i)(X_i); nodal convolution with the exact
    nodal kernel gradient matches the spectral convolution to roundoff.
    """
    n, d = pos.shape
    h = grid.spacing
    L = grid.half_length
    R = int(math.ceil(beta / h)) + 1
    rng = np.arange(-R, R + 2)
    offs = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    u = (pos + L) / h
    base = np.floor(u).astype(np.int64)
    frac = u - base
    idx = base[:, None, :] + offs[None, :, :]
    dx = idx * h - (pos + L)[:, None, :]
    w_self = bump_constant(d) / beta**d * _bump_r2(np.sum(dx * dx, axis=-1) / beta**2) / n
    flat = np.zeros(idx.shape[:2], dtype=np.int64)
    for a in range(d):
        flat = flat * grid.n + np.mod(idx[..., a], grid.n)
    k_loc = kde.ravel()[flat]
    delta = table.value(k_loc) - table.value(k_loc - w_self)
    delta[w_self == 0] = 0.0
    # kernel gradient at node differences corner - offset
    gk = kernel.gradient_values
    centre = grid.n // 2
    corners = np.array(np.meshgrid(*([[0, 1]] * d), indexing="ij")).reshape(d, -1).T
    kmat = np.empty((offs.shape[0], corners.shape[0] * d))
    for c, q in enumerate(corners):
        diff = q[None, :] - offs
        sel = tuple(np.mod(centre + diff[:, a], grid.n) for a in range(d))
        for a in range(d):
            kmat[:, c * d + a] = gk[a][sel]
    corr = (delta @ kmat).reshape(n, corners.shape[0], d) * grid.cell_volume
    wts = np.ones((n, corners.shape[0]))
    for c, q in enumerate(corners):
        for a in range(d):
            wts[:, c] *= frac[:, a] if q[a] else 1.0 - frac[:, a]
    return np.einsum("nc,ncd->nd", wts, corr)


def _bump_r2(r2):
    out = np.zeros_like(r2)
    m = r2 < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r2[m]))
    return out


def drift_micro(
    pos: np.ndarray,
    beta: float,
    kernel: RegularizedKernel,
    table: NonlinearityTable,
    grid: Grid,
    mode: DriftMode | str = "shared",
) -> np.ndarray:
    """-(grad K_zeta * f_sigma(kde))(X_i), shape (N, d).

    The order is deposit, then f_sigma on the nodes, then the convolution,
    then interpolation at X_i.  ``shared`` keeps the self term j = i in the
    density estimate, ``exact`` removes it through a local correction and
    ``bruteforce`` rebuilds the field for every particle.
    """
    mode = mode if isinstance(mode, DriftMode) else DriftMode(mode)
    _check_beta(beta, grid)
    if mode.variant == "bruteforce":
        return drift_micro_bruteforce(pos, beta, kernel, table, grid)
    kde = kde_grid(pos, beta, grid)
    field_grad = kernel.apply_gradient(table.value(kde))
    drift = -gather(field_grad, pos, grid).T
    if mode.variant == "exact":
        drift = drift + _local_self_correction(pos, kde, beta, kernel, table, grid)
    return drift


def drift_micro_bruteforce(pos, beta, kernel, table, grid) -> np.ndarray:
    """One full density rebuild and convolution per particle; O(N) transforms."""
    n = pos.shape[0]
    if n > 512:
        raise DomainError("brute-force drift limited to N <= 512")
    out = np.empty_like(pos)
    for i in range(n):
        others = np.delete(pos, i, axis=0)
        kde = deposit(others, beta, grid, 1.0 / n)
        g = kernel.apply_gradient(table.value(kde))
        out[i] = -gather(g, pos[i : i + 1], grid)[:, 0]
    return out


def drift_from_density(pos: np.ndarray, state: PdeState, solver: PdeSolver, t: float | None = None, dt: float | None = None) -> np.ndarray:
    """Grid drift of the matching equation interpolated at ``pos``."""
    if state.which != solver.which:
        raise DomainError("density and solver describe different equations")
    if t is not None and dt is not None and abs(state.t - t) > 0.5 * dt:
        raise DomainError(f"stale density: state time {state.t:g}, ensemble time {t:g}")
    v = solver.velocity(state.rho, staggered=False)
    return gather(v, pos, solver.grid).T


def em_step(ens: CoupledEnsemble, drifts, dt: float, sigma: float, grid: Grid | None = None) -> CoupledEnsemble:
    """Euler-Maruyama with one shared Gaussian increment per particle."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    b_micro, b_bar, b_hat = drifts
    if sigma > 0:
        noise = math.sqrt(2.0 * sigma * dt) * ens.rng.normals(ens.step, ens.n, ens.d, NOISE)
    else:
        noise = np.zeros((ens.n, ens.d))
    X = ens.X + b_micro * dt + noise
    Xbar = ens.Xbar + b_bar * dt + noise
    Xhat = ens.Xhat + b_hat * dt + noise
    if grid is not None:
        for p in (X, Xbar, Xhat):
            _check_inside(p, grid)
    return CoupledEnsemble(X, Xbar, Xhat, ens.rng, ens.t + dt, ens.step + 1)


def new_ensemble(xi: np.ndarray, rng: RngSpec) -> CoupledEnsemble:
    xi = np.asarray(xi, dtype=float)
    return CoupledEnsemble(xi.copy(), xi.copy(), xi.copy(), rng)


def write_ensemble(path, pos: np.ndarray) -> None:
    """Binary dump: little-endian int64 N, int64 d, then row-major float64 positions."""
    pos = np.ascontiguousarray(pos, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(np.array(pos.shape, dtype="<i8").tobytes())
        fh.write(pos.tobytes())


def read_ensemble(path) -> np.ndarray:
    raw = open(path, "rb").read()
    n, d = np.frombuffer(raw[:16], dtype="<i8")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(int(n), int(d)).copy()


def write_trajectory_csv(path, snapshots, indices) -> None:
    """Positions of the particles ``indices`` at each (t, positions) snapshot, one row per particle."""
    indices = np.asarray(indices, dtype=np.int64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = None
        for t, pos in snapshots:
            pos = np.asarray(pos, dtype=float)
            if d is None:
                d = pos.shape[1]
                w.writerow(["t", "particle"] + ["x", "y", "z"][:d])
            for i in indices:
                w.writerow([repr(float(t)), int(i)] + [repr(float(v)) for v in pos[i]])
