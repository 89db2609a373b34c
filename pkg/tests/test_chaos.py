import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracpme.chaos import (
    CoupledConfig,
    ErrorFunctionals,
    Schedule,
    chaos_metrics,
    factorization_defect,
    iid_floor,
    ks_per_axis,
    measure_errors,
    rate_fit,
    run_coupled,
    sliced_w1,
)
from fracpme.errors import ConfigError, DomainError
from fracpme.kernels import named_density
from fracpme.particles import RngSpec, sample_initial
from fracpme.spectral import Grid

TINY = CoupledConfig(n_particles=32, n_grid=64, horizon=0.02, dt=0.005, zeta=0.5, beta=0.86)


def test_schedule_formulas_and_check():
    sch = Schedule((256, 1024), d=2, s=0.5)
    assert sch.betas[0] == pytest.approx(math.log(256) ** (-1 / 13))
    assert sch.zetas[1] == pytest.approx(1024 ** (-1 / 8))
    sch.check(256, sch.betas[0], sch.zetas[0])
    with pytest.raises(ConfigError):
        sch.check(256, 0.5 * sch.betas[0], sch.zetas[0])
    with pytest.raises(ConfigError):
        sch.check(256, sch.betas[0], 0.5 * sch.zetas[0])
    with pytest.raises(ConfigError):
        Schedule((2,))
    with pytest.raises(ConfigError):
        Schedule((256,), eps=0.0)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), c=st.floats(0.1, 10))
def test_rate_fit_recovers_power_law(a, c):
    xs = [1, 2, 4, 8, 16]
    fit = rate_fit(xs, [c * x**a for x in xs])
    assert fit.slope == pytest.approx(a, abs=1e-10)
    assert math.exp(fit.intercept) == pytest.approx(c, rel=1e-10)


def test_rate_fit_errors():
    with pytest.raises(DomainError):
        rate_fit([1, 2], [1, 2])
    with pytest.raises(DomainError):
        rate_fit([1, 2, 4], [1, 0, 2])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 200))
def test_factorization_defect_closed_form(seed, n):
    # for counts c_b: sum |pair - p p^T| = 2 (1 - sum p_b^2) / (N - 1)
    g = Grid(2, 4.0, 16)
    pos = np.random.default_rng(seed).uniform(-4, 4, size=(n, 2))
    bins = 4
    idx = np.clip(np.floor((pos + 4) / 8 * bins).astype(int), 0, bins - 1)
    counts = np.bincount(idx[:, 0] * bins + idx[:, 1], minlength=bins * bins)
    p = counts / n
    assert factorization_defect(pos, g, bins) == pytest.approx(2 * (1 - np.sum(p * p)) / (n - 1), rel=1e-12)


def test_iid_defect_near_floor_and_w1_decreasing():
    g = Grid(2, 8.0, 64)
    rho = named_density("gaussian", g)
    w1 = []
    for n in (128, 2048):
        pos = sample_initial(rho, n, RngSpec(7), g)
        w1.append(sliced_w1(pos, rho, g))
    assert w1[1] < w1[0]
    pos = sample_initial(rho, 1024, RngSpec(9), g)
    floor = iid_floor(rho, g, 1024)
    assert factorization_defect(pos, g) <= 3 * floor
    assert max(ks_per_axis(pos, rho, g)) < 1.63 / math.sqrt(1024)


def test_chaos_metrics_rejects_k3():
    g = Grid(2, 8.0, 64)
    rho = named_density("gaussian", g)
    pos = sample_initial(rho, 64, RngSpec(1), g)
    assert set(chaos_metrics(pos, rho, g, 2)) == {"factorization_defect"}
    with pytest.raises(DomainError):
        chaos_metrics(pos, rho, g, 3)


def test_error_functionals_properties():
    run = run_coupled(TINY, replicas=4)
    ef = run.errors
    assert ef.paths.shape == (4, TINY.nsteps + 1, 3)
    # running sups are nondecreasing and start at zero
    assert np.all(np.diff(ef.paths, axis=1) >= 0)
    assert np.all(ef.paths[:, 0] == 0)
    # triangle inequality holds path by path before the sup
    assert np.all(ef.paths[:, :, 2] <= ef.paths[:, :, 0] + ef.paths[:, :, 1] + 1e-15)
    h = ef.at_horizon()
    assert h["e1"] > 0 and h["e2"] > 0 and h["e1_se"] >= 0


def test_error_functionals_permutation_invariant():
    paths = np.random.default_rng(0).random((5, 3, 3)).cumsum(axis=1)
    a = ErrorFunctionals(np.arange(3.0), paths)
    b = ErrorFunctionals(np.arange(3.0), paths[::-1])
    assert np.allclose(a.e_total, b.e_total, rtol=1e-14)
    assert np.allclose(a.e1_se, b.e1_se, rtol=1e-14)


def test_equal_drifts_give_zero_e1_e2():
    run = run_coupled(TINY, replicas=2, force_equal_drifts=True)
    assert np.all(run.errors.paths == 0.0)


def test_measure_errors_needs_four_replicas():
    with pytest.raises(ConfigError):
        measure_errors(TINY, replicas=3)


def test_coupled_config_horizon_multiple():
    with pytest.raises(ConfigError):
        TINY.with_(horizon=0.0123).nsteps
    assert TINY.with_(seed=3).seed == 3 and TINY.seed == 12345
