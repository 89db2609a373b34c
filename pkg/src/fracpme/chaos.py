"""Pathwise error functionals, parameter schedules, chaos metrics and rate fits."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DomainError
from .kernels import (
    PowerLaw,
    ProblemParams,
    RegularizedKernel,
    build_nonlinearity,
    named_density,
    regularize_initial,
)
from .particles import (
    DIRECTIONS,
    RESAMPLE,
    DriftMode,
    RngSpec,
    drift_micro,
    em_step,
    gather,
    new_ensemble,
    sample_initial,
)
from .pde import PdeSolver
from .spectral import Grid

__all__ = [
    "Schedule",
    "CoupledConfig",
    "ErrorFunctionals",
    "CoupledRun",
    "run_coupled",
    "measure_errors",
    "measure_shared_bias",
    "sliced_w1",
    "ks_per_axis",
    "factorization_defect",
    "iid_floor",
    "chaos_metrics",
    "RateFit",
    "rate_fit",
    "density_gap",
]


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Schedule:
    """beta(N) = (eps log N)^(-1/(3d+7)), zeta(N) = (c1 N^(1/4))^(-1/(2s+1))."""

    n_values: tuple
    d: int = 2
    s: float = 0.5
    eps: float = 1.0
    c1: float = 1.0

    def __post_init__(self):
        if not self.eps > 0 or not self.c1 > 0:
            raise ConfigError("schedule constants must be positive")
        if any(n < 3 for n in self.n_values):
            raise ConfigError("schedule needs N >= 3 so that log N > 1")
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))

    def beta_of_n(self, n: int) -> float:
        return (self.eps * math.log(n)) ** (-1.0 / (3 * self.d + 7))

    def zeta_of_n(self, n: int) -> float:
        return (self.c1 * n**0.25) ** (-1.0 / (2 * self.s + 1))

    @property
    def betas(self) -> list:
        return [self.beta_of_n(n) for n in self.n_values]

    @property
    def zetas(self) -> list:
        return [self.zeta_of_n(n) for n in self.n_values]

    def check(self, n: int, beta: float, zeta: float, rtol: float = 1e-12) -> None:
        """Both rate constraints; violating either is an error."""
        if beta ** (-(3 * self.d + 7)) > self.eps * math.log(n) * (1 + rtol):
            raise ConfigError(f"beta={beta:g} too small for N={n}: beta^-(3d+7) exceeds eps log N")
        if zeta ** (-(2 * self.s + 1)) > self.c1 * n**0.25 * (1 + rtol):
            raise ConfigError(f"zeta={zeta:g} too small for N={n}: zeta^-(2s+1) exceeds c1 N^(1/4)")


# ---------------------------------------------------------------- coupled runs


@dataclass(frozen=True)
class CoupledConfig:
    d: int = 2
    s: float = 0.5
    sigma: float = 0.1
    beta: float = 0.86
    zeta: float = 0.5
    n_particles: int = 256
    half_length: float = 8.0
    n_grid: int = 128
    horizon: float = 0.5
    dt: float = 2e-3
    seed: int = 12345
    m_pow: float = 1.0
    initial: str = "gaussian"
    drift_mode: str = "shared"
    order: int = 2

    @property
    def params(self) -> ProblemParams:
        return ProblemParams(self.d, self.s, self.sigma, self.beta, self.zeta, self.n_particles)

    @property
    def grid(self) -> Grid:
        return Grid(self.d, self.half_length, self.n_grid)

    @property
    def nsteps(self) -> int:
        n = int(round(self.horizon / self.dt))
        if not math.isclose(n * self.dt, self.horizon, rel_tol=1e-9):
            raise ConfigError("horizon must be a multiple of dt")
        return n

    def with_(self, **kw) -> "CoupledConfig":
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return CoupledConfig(**vals)


@dataclass
class ErrorFunctionals:
    """Replica means of running-sup max-over-particle distances, with standard errors."""

    times: np.ndarray
    paths: np.ndarray  # (replicas, times, 3) for (e1, e2, e_total)
    mode: str = "shared"

    @property
    def replicas(self) -> int:
        return self.paths.shape[0]

    def _mean(self, j):
        return self.paths[:, :, j].mean(axis=0)

    def _se(self, j):
        if self.replicas < 2:
            return np.zeros(self.paths.shape[1])
        return self.paths[:, :, j].std(axis=0, ddof=1) / math.sqrt(self.replicas)

    e1 = property(lambda self: self._mean(0))
    e2 = property(lambda self: self._mean(1))
    e_total = property(lambda self: self._mean(2))
    e1_se = property(lambda self: self._se(0))
    e2_se = property(lambda self: self._se(1))
    e_total_se = property(lambda self: self._se(2))

    def at_horizon(self) -> dict:
        return {
            "e1": float(self.e1[-1]),
            "e1_se": float(self.e1_se[-1]),
            "e2": float(self.e2[-1]),
            "e2_se": float(self.e2_se[-1]),
            "e_total": float(self.e_total[-1]),
            "e_total_se": float(self.e_total_se[-1]),
        }


@dataclass
class CoupledRun:
    config: CoupledConfig
    errors: ErrorFunctionals
    ensembles: list = field(repr=False)
    rho_macro: np.ndarray = field(repr=False)
    rho_intermediate: np.ndarray = field(repr=False)


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_coupled(cfg: CoupledConfig, replicas: int = 8, threads: int = 1, force_equal_drifts: bool = False) -> CoupledRun:
    """Simulate ``replicas`` coupled triples (X, Xbar, Xhat) with the two PDEs in lockstep.

    The intermediate and macro densities are deterministic, so they are
    advanced once per step and shared by all replicas.  With
    ``force_equal_drifts`` all three systems receive the macro drift of Xhat.
    """
    grid, params = cfg.grid, cfg.params
    f = PowerLaw(cfg.m_pow)
    table = build_nonlinearity(f, cfg.sigma)
    kernel = RegularizedKernel(cfg.d, cfg.s, cfg.zeta, grid)
    datum = regularize_initial(named_density(cfg.initial, grid), cfg.sigma, grid)
    grid.check_margin(datum.rho0_sigma)
    macro = PdeSolver(grid, params, table, "macro", order=cfg.order)
    inter = PdeSolver(grid, params, table, "intermediate", kernel=kernel, order=cfg.order)
    rho_m = macro.initial_state(datum.rho0_sigma)
    rho_i = inter.initial_state(datum.rho0_sigma)
    rngs = [RngSpec(cfg.seed, r) for r in range(replicas)]
    ens = [new_ensemble(sample_initial(datum, cfg.n_particles, r), r) for r in rngs]
    nsteps = cfg.nsteps
    dist = np.zeros((replicas, nsteps + 1, 3))
    mode = DriftMode(cfg.drift_mode)

    for step in range(nsteps):
        v_i = inter.velocity(rho_i.rho, staggered=False)
        v_m = macro.velocity(rho_m.rho, staggered=False)

        def advance(e):
            b_hat = gather(v_m, e.Xhat, grid).T
            if force_equal_drifts:
                drifts = (b_hat, b_hat, b_hat)
            else:
                b_micro = drift_micro(e.X, cfg.beta, kernel, table, grid, mode)
                b_bar = gather(v_i, e.Xbar, grid).T
                drifts = (b_micro, b_bar, b_hat)
            return em_step(e, drifts, cfg.dt, cfg.sigma, grid)

        ens = _pmap(advance, ens, threads)
        rho_i = inter.step(rho_i, cfg.dt)
        rho_m = macro.step(rho_m, cfg.dt)
        for r, e in enumerate(ens):
            now = (
                np.max(np.linalg.norm(e.X - e.Xbar, axis=1)),
                np.max(np.linalg.norm(e.Xbar - e.Xhat, axis=1)),
                np.max(np.linalg.norm(e.X - e.Xhat, axis=1)),
            )
            dist[r, step + 1] = np.maximum(dist[r, step], now)
    times = cfg.dt * np.arange(nsteps + 1)
    return CoupledRun(cfg, ErrorFunctionals(times, dist, cfg.drift_mode), ens, rho_m.rho, rho_i.rho)


def measure_errors(cfg: CoupledConfig, replicas: int = 8, threads: int = 1) -> ErrorFunctionals:
    if replicas < 4:
        raise ConfigError("at least four replicas are required")
    return run_coupled(cfg, replicas, threads).errors


def measure_shared_bias(cfg: CoupledConfig, replicas: int = 8, threads: int = 1) -> tuple[float, float]:
    """Mean and standard error of sup_t max_i |X_shared - X_exact| under identical noise."""
    grid = cfg.grid
    table = build_nonlinearity(PowerLaw(cfg.m_pow), cfg.sigma)
    kernel = RegularizedKernel(cfg.d, cfg.s, cfg.zeta, grid)
    datum = regularize_initial(named_density(cfg.initial, grid), cfg.sigma, grid)
    rngs = [RngSpec(cfg.seed, r) for r in range(replicas)]

    def one(rng):
        xs = sample_initial(datum, cfg.n_particles, rng)
        xe = xs.copy()
        sup = 0.0
        for step in range(cfg.nsteps):
            noise = math.sqrt(2 * cfg.sigma * cfg.dt) * rng.normals(step, cfg.n_particles, cfg.d)
            xs = xs + cfg.dt * drift_micro(xs, cfg.beta, kernel, table, grid, "shared") + noise
            xe = xe + cfg.dt * drift_micro(xe, cfg.beta, kernel, table, grid, "exact") + noise
            sup = max(sup, float(np.max(np.linalg.norm(xs - xe, axis=1))))
        return sup

    vals = np.array(_pmap(one, rngs, threads))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


# ---------------------------------------------------------------- chaos metrics


def _reference_atoms(rho: np.ndarray, grid: Grid):
    """2^d sub-cell atoms per node carrying the cell mass."""
    w = np.maximum(rho, 0.0).ravel() * grid.cell_volume
    keep = w > w.max() * 1e-14
    nodes = np.stack([c.ravel()[keep] for c in grid.coords], axis=-1)
    corners = np.array(np.meshgrid(*([[-0.25, 0.25]] * grid.d), indexing="ij")).reshape(grid.d, -1).T
    atoms = (nodes[:, None, :] + grid.spacing * corners[None]).reshape(-1, grid.d)
    weights = np.repeat(w[keep] / 2**grid.d, corners.shape[0])
    return atoms, weights / weights.sum()


def sliced_w1(pos: np.ndarray, rho_ref: np.ndarray, grid: Grid, n_dirs: int = 64, seed: int = 0) -> float:
    dirs = RngSpec(seed).normals(0, n_dirs, grid.d, DIRECTIONS)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    atoms, weights = _reference_atoms(rho_ref, grid)
    return float(
        np.mean([stats.wasserstein_distance(pos @ th, atoms @ th, None, weights) for th in dirs])
    )


def ks_per_axis(pos: np.ndarray, rho_ref: np.ndarray, grid: Grid) -> list:
    """Kolmogorov-Smirnov distance per coordinate against the grid marginals (linear within cells)."""
    n = pos.shape[0]
    out = []
    for a in range(grid.d):
        other = tuple(b for b in range(grid.d) if b != a)
        marg = np.maximum(rho_ref, 0.0).sum(axis=other) if other else np.maximum(rho_ref, 0.0)
        edges = np.concatenate([grid.axis - 0.5 * grid.spacing, [grid.axis[-1] + 0.5 * grid.spacing]])
        cdf = np.concatenate([[0.0], np.cumsum(marg)])
        cdf /= cdf[-1]
        x = np.sort(pos[:, a])
        F = np.interp(x, edges, cdf)
        i = np.arange(1, n + 1)
        out.append(float(max(np.max(i / n - F), np.max(F - (i - 1) / n))))
    return out


def _bin_ids(pos: np.ndarray, grid: Grid, bins: int) -> np.ndarray:
    L = grid.half_length
    idx = np.clip(np.floor((pos + L) / (2 * L) * bins).astype(np.int64), 0, bins - 1)
    flat = np.zeros(pos.shape[0], dtype=np.int64)
    for a in range(pos.shape[1]):
        flat = flat * bins + idx[:, a]
    return flat


def factorization_defect(pos: np.ndarray, grid: Grid, bins: int = 16) -> float:
    """L1 distance between the distinct-pair histogram and the product of one-particle histograms."""
    n = pos.shape[0]
    counts = np.bincount(_bin_ids(pos, grid, bins), minlength=bins**grid.d).astype(float)
    pair = (np.outer(counts, counts) - np.diag(counts)) / (n * (n - 1))
    p = counts / n
    return float(np.abs(pair - np.outer(p, p)).sum())


def iid_floor(rho_ref: np.ndarray, grid: Grid, n: int, draws: int = 8, seed: int = 0, bins: int = 16) -> float:
    """Mean factorization defect of i.i.d. samples from the reference density."""
    vals = [
        factorization_defect(sample_initial(rho_ref, n, RngSpec(seed, 1000 + k), grid), grid, bins)
        for k in range(draws)
    ]
    return float(np.mean(vals))


def chaos_metrics(pos: np.ndarray, rho_ref: np.ndarray, grid: Grid, k: int = 1, seed: int = 0) -> dict:
    if k == 1:
        return {"sliced_w1": sliced_w1(pos, rho_ref, grid, seed=seed), "ks": ks_per_axis(pos, rho_ref, grid)}
    if k == 2:
        return {"factorization_defect": factorization_defect(pos, grid)}
    raise DomainError("only k = 1 and k = 2 marginals are supported")


# ---------------------------------------------------------------- rates


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    halfwidth: float


def rate_fit(xs: Sequence[float], ys: Sequence[float]) -> RateFit:
    """Least squares on (log x, log y) with a 95% slope half-width."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size < 3 or xs.size != ys.size:
        raise DomainError("rate fit needs at least three paired points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise DomainError("rate fit needs positive values")
    res = stats.linregress(np.log(xs), np.log(ys))
    hw = float(stats.t.ppf(0.975, xs.size - 2) * res.stderr) if xs.size > 2 else math.inf
    return RateFit(float(res.slope), float(res.intercept), float(res.rvalue**2), hw)


def density_gap(
    grid: Grid,
    params: ProblemParams,
    rho0: np.ndarray,
    horizon: float,
    dt: float,
    *,
    f=None,
    order: int = 2,
    macro_path: list | None = None,
) -> tuple[float, list]:
    """sup_t ||rho_{sigma,beta,zeta} - rho_sigma||_inf from the same regularized datum.

    Returns the gap and the macro path so that sweeps reuse it.
    """
    table = build_nonlinearity(f, params.sigma)
    nsteps = int(round(horizon / dt))
    if macro_path is None:
        macro = PdeSolver(grid, params, table, "macro", order=order)
        st = macro.initial_state(rho0)
        macro_path = [st.rho]
        for _ in range(nsteps):
            st = macro.step(st, dt)
            macro_path.append(st.rho)
    inter = PdeSolver(grid, params, table, "intermediate", order=order)
    st = inter.initial_state(rho0)
    gap = float(np.max(np.abs(st.rho - macro_path[0])))
    for k in range(nsteps):
        st = inter.step(st, dt)
        gap = max(gap, float(np.max(np.abs(st.rho - macro_path[k + 1]))))
    return gap, macro_path
