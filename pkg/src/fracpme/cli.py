"""Command-line experiment runner."""
from __future__ import annotations

import argparse
import csv
import hashlib
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .chaos import (
    CoupledConfig,
    Schedule,
    chaos_metrics,
    density_gap,
    iid_floor,
    measure_shared_bias,
    rate_fit,
    run_coupled,
)
from .config import DIALECT, ExperimentConfig, load_config, with_seed
from .errors import CFLError, ConfigError, DomainError, EscapeError, FracPmeError
from .kernels import (
    PowerLaw,
    TabulatedNonlinearity,
    build_nonlinearity,
    named_density,
    regularize_initial,
)
from .pde import PdeSolver, diagnostics, run_entropy_audit, sigma_continuation
from .spectral import Grid, write_field
from .verify import operator_battery

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 2, 3, 4


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, outputs: list, status: dict) -> None:
    digest = hashlib.sha256(cfg.source_text.encode()).hexdigest()
    lines = [
        "[manifest]",
        f"command = {command}",
        f"package_version = {__version__}",
        f"config_dialect = {DIALECT}",
        f"config_sha256 = {digest}",
        "outputs = " + ", ".join(sorted(outputs)),
    ]
    for k, v in sorted(status.items()):
        lines.append(f"check.{k} = {v}")
    lines.append(f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    lines.append("")
    lines.append("[config]")
    lines += ["    " + ln for ln in cfg.source_text.strip().splitlines()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _nonlinearity(cfg: ExperimentConfig):
    if cfg.f_table:
        data = np.loadtxt(cfg.f_table, delimiter=",", skiprows=1)
        return TabulatedNonlinearity(data[:, 0], data[:, 1])
    return PowerLaw(cfg.m_pow)


def _initial(cfg: ExperimentConfig, grid: Grid) -> np.ndarray:
    rho0 = named_density(cfg.initial, grid, **cfg.initial_kw)
    if cfg.initial != "constant":
        grid.check_margin(rho0)
    return rho0


def _coupled_config(cfg: ExperimentConfig, **kw) -> CoupledConfig:
    p = cfg.problem
    base = CoupledConfig(
        d=p.d, s=p.s, sigma=p.sigma, beta=p.beta, zeta=p.zeta, n_particles=p.n_particles,
        half_length=cfg.half_length, n_grid=cfg.n_grid, horizon=cfg.horizon, dt=cfg.dt, seed=cfg.seed,
        m_pow=cfg.m_pow, initial=cfg.initial, drift_mode=cfg.drift_mode, order=cfg.order,
    )
    return base.with_(**kw)


# ---------------------------------------------------------------- subcommands


def cmd_verify_operators(cfg, out: Path, threads: int):
    items = operator_battery(cfg.grid, cfg.problem.s)
    _write_csv(out / "verify_operators.csv", ["item", "value", "tolerance", "passed"],
               [(it.name, it.value, it.tolerance, it.passed) for it in items])
    return ["verify_operators.csv"], {it.name: it.passed for it in items}


def cmd_solve_pde(cfg, out: Path, threads: int):
    grid, p = cfg.grid, cfg.problem
    rho0 = _initial(cfg, grid)
    f = _nonlinearity(cfg)
    if cfg.which == "limit":
        solver = PdeSolver(grid, p.replace(sigma=0.0), which="limit", f=f, order=cfg.order)
        datum_rho, kappa = rho0, 1.0
        table = build_nonlinearity(f, max(p.sigma, 1e-2))
    else:
        table = build_nonlinearity(f, p.sigma)
        solver = PdeSolver(grid, p, table, cfg.which, order=cfg.order)
        if cfg.initial == "constant":
            # already smooth and periodic; the far-field cutoff would break the fixed point
            datum_rho, kappa = rho0, 1.0
        else:
            datum = regularize_initial(rho0, p.sigma, grid)
            datum_rho, kappa = datum.rho0_sigma, datum.kappa_sigma
    snaps = sorted(set(int(round(t / cfg.dt)) for t in cfg.snapshot_times if 0 <= t <= cfg.horizon + 1e-12))
    written = []

    def snap(state):
        k = int(round(state.t / cfg.dt))
        if k in snaps:
            name = f"rho_step{k:06d}.bin"
            write_field(out / name, state.rho, grid)
            written.append(name)

    state = solver.initial_state(datum_rho)
    snap(state)
    if cfg.which == "limit":
        recs = [diagnostics(state, table, grid)]
        for _ in range(cfg.nsteps):
            state = solver.step(state, cfg.dt)
            recs.append(diagnostics(state, table, grid, recs[-1]))
            snap(state)
        status = {}
    else:
        report = run_entropy_audit(solver, state, cfg.horizon, cfg.dt, kappa_sigma=kappa,
                                   rho0_linf=float(rho0.max()), on_step=lambda st, rec: snap(st))
        recs = report.records
        status = dict(report.passed)
        _write_csv(out / "audit.csv", ["quantity", "value"], [
            ("entropy_slack", report.entropy_slack), ("entropy_initial", report.entropy_initial),
            ("mass_drift", report.mass_drift), ("min_rho", report.min_rho),
            ("linf_bound_ratio", report.linf_bound_ratio), ("l2_max_increase", report.l2_max_increase),
            ("moment_max", report.moment_max), ("kappa_sigma", kappa),
        ])
        written.append("audit.csv")
    header = list(recs[0].as_row().keys())
    _write_csv(out / "diagnostics.csv", header, [list(r.as_row().values()) for r in recs])
    return written + ["diagnostics.csv"], status


def cmd_converge_beta_zeta(cfg, out: Path, threads: int):
    p = cfg.problem
    f = _nonlinearity(cfg)
    rows = []
    grid = cfg.grid
    rho0 = regularize_initial(_initial(cfg, grid), p.sigma, grid).rho0_sigma
    path = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for b in cfg.betas:
            gap, path = density_gap(grid, p.replace(beta=b, zeta=cfg.zeta_fixed), rho0, cfg.horizon, cfg.dt,
                                    f=f, order=cfg.order, macro_path=path)
            rows.append(("beta", b, gap))
        gz = Grid(p.d, cfg.zeta_half_length, cfg.zeta_n)
        rho0z = regularize_initial(_initial(cfg, gz), p.sigma, gz).rho0_sigma
        path = None
        pz = p.replace(s=cfg.zeta_s, beta=cfg.beta_fixed)
        for z in cfg.zetas:
            gap, path = density_gap(gz, pz.replace(zeta=z), rho0z, cfg.horizon, cfg.dt, f=f, order=cfg.order,
                                    macro_path=path)
            rows.append(("zeta", z, gap))
    _write_csv(out / "gaps.csv", ["parameter", "value", "sup_gap"], rows)
    fits = {}
    for kind in ("beta", "zeta"):
        xs = [r[1] for r in rows if r[0] == kind]
        ys = [r[2] for r in rows if r[0] == kind]
        fits[kind] = rate_fit(xs, ys)
    a = min(1.0, p.d - 2 * cfg.zeta_s)
    _write_csv(out / "rates.csv", ["parameter", "slope", "intercept", "r2", "halfwidth", "target_low", "target_high"], [
        ("beta", fits["beta"].slope, fits["beta"].intercept, fits["beta"].r2, fits["beta"].halfwidth, 0.7, 1.3),
        ("zeta", fits["zeta"].slope, fits["zeta"].intercept, fits["zeta"].r2, fits["zeta"].halfwidth, a - 0.3, a + 0.3),
    ])
    status = {"beta_slope": 0.7 <= fits["beta"].slope <= 1.3, "zeta_slope": a - 0.3 <= fits["zeta"].slope <= a + 0.3}
    return ["gaps.csv", "rates.csv"], status


def _n_sweep(cfg, threads):
    sch = Schedule(tuple(cfg.n_values), cfg.problem.d, cfg.problem.s, cfg.eps, cfg.c1)
    runs = []
    for n, b, z in zip(sch.n_values, sch.betas, sch.zetas):
        sch.check(n, b, z)
        runs.append(run_coupled(_coupled_config(cfg, n_particles=n, beta=b, zeta=z), cfg.replicas, threads))
    return sch, runs


def cmd_converge_n(cfg, out: Path, threads: int):
    sch, runs = _n_sweep(cfg, threads)
    rows = []
    for n, b, z, run in zip(sch.n_values, sch.betas, sch.zetas, runs):
        h = run.errors.at_horizon()
        rows.append((n, b, z, h["e1"], h["e1_se"], h["e2"], h["e2_se"], h["e_total"], h["e_total_se"], run.config.drift_mode))
    _write_csv(out / "errors.csv", ["N", "beta", "zeta", "e1", "e1_se", "e2", "e2_se", "e_total", "e_total_se", "mode"], rows)
    et = [r[7] for r in rows]
    se = [r[8] for r in rows]
    fit = rate_fit(sch.n_values, et)
    decreasing = all(a - b > 2 * math.hypot(sa, sb) for a, b, sa, sb in zip(et, et[1:], se, se[1:]))
    status = {"e_total_decreasing": decreasing, "slope_negative": fit.slope < 0}
    out_rows = [("e_total", fit.slope, fit.intercept, fit.r2, fit.halfwidth)]
    if cfg.exact_check:
        c0 = runs[0].config
        bias, bias_se = measure_shared_bias(c0, cfg.replicas, threads)
        status["shared_bias_within_10pct"] = bias <= 0.1 * et[0]
        out_rows.append(("shared_bias_N%d" % c0.n_particles, bias, bias_se, float("nan"), float("nan")))
    _write_csv(out / "rates.csv", ["quantity", "slope_or_value", "intercept_or_se", "r2", "halfwidth"], out_rows)
    return ["errors.csv", "rates.csv"], status


def cmd_chaos_test(cfg, out: Path, threads: int):
    sch, runs = _n_sweep(cfg, threads)
    rows = []
    for n, run in zip(sch.n_values, runs):
        grid = run.config.grid
        w1 = [chaos_metrics(e.X, run.rho_macro, grid, 1, seed=cfg.seed) for e in run.ensembles]
        fd = [chaos_metrics(e.X, run.rho_macro, grid, 2)["factorization_defect"] for e in run.ensembles]
        ks = np.mean([m["ks"] for m in w1], axis=0)
        floor = iid_floor(run.rho_macro, grid, n, seed=cfg.seed)
        rows.append([n, float(np.mean([m["sliced_w1"] for m in w1])), float(np.mean(fd)), floor] + ks.tolist())
    header = ["N", "sliced_w1", "factorization_defect", "iid_floor"] + [f"ks_axis{a}" for a in range(cfg.problem.d)]
    _write_csv(out / "chaos.csv", header, rows)
    w1 = [r[1] for r in rows]
    fd = [r[2] for r in rows]
    status = {
        "w1_decreasing": all(b < a for a, b in zip(w1, w1[1:])),
        "defect_decreasing": all(b < a for a, b in zip(fd, fd[1:])),
        "defect_near_floor": fd[-1] <= 3 * rows[-1][3],
    }
    return ["chaos.csv"], status


def cmd_sigma_limit(cfg, out: Path, threads: int):
    grid = cfg.grid
    rep = sigma_continuation(_initial(cfg, grid), cfg.sigmas, grid, cfg.problem, cfg.horizon, cfg.dt,
                             f=_nonlinearity(cfg), order=cfg.order)
    rows = []
    for i, sig in enumerate(rep.sigmas):
        l1 = rep.l1_differences[i] if i < len(rep.l1_differences) else float("nan")
        weak = rep.weak_differences[i] if i < len(rep.weak_differences) else [float("nan")] * len(rep.weak_differences[0])
        rows.append([sig, rep.kappas[i], rep.masses[i], l1] + list(weak))
    header = ["sigma", "kappa", "mass", "l1_to_next"] + [f"weak_phi{j}" for j in range(len(rep.weak_differences[0]))]
    _write_csv(out / "continuation.csv", header, rows)
    m = rep.masses
    status = {
        "l1_monotone": rep.l1_monotone,
        "kappa_monotone": rep.kappa_monotone,
        "mass_identical": max(m) - min(m) <= 1e-12 * abs(m[0]),
        "weak_monotone": rep.weak_monotone,
    }
    return ["continuation.csv"], status


COMMANDS = {
    "verify-operators": cmd_verify_operators,
    "solve-pde": cmd_solve_pde,
    "converge-beta-zeta": cmd_converge_beta_zeta,
    "converge-n": cmd_converge_n,
    "chaos-test": cmd_chaos_test,
    "sigma-limit": cmd_sigma_limit,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracpme", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=str, default=None, help="INI configuration file (defaults built in)")
    ap.add_argument("--out", type=str, default="out", help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for replicas")
    ap.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed overriding the config")
    ap.add_argument("--strict", action="store_true", help="failed checks give a nonzero exit status")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        outputs, status = COMMANDS[args.command](cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CFLError, EscapeError, DomainError, FracPmeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_manifest(out, cfg, args.command, outputs, status)
    failed = [k for k, v in status.items() if not v]
    for k, v in sorted(status.items()):
        print(f"{'PASS' if v else 'FAIL'} {k}")
    if failed and (args.strict or args.command == "verify-operators"):
        return EXIT_ACCEPTANCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
