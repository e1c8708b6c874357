import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergobsde.bsde import (
    InfeasibleTolerance,
    RegressionBasis,
    RegressionError,
    SolverConfig,
    fresh_path_check,
    residual_diagnostic,
    solve_discounted,
    solve_finite_horizon,
    truncation_horizon,
)
from ergobsde.hamiltonian import constant_driver, linear_z_driver, state_driver
from ergobsde.model import build_ou_model

from helpers import cos_driver, reaction_model

# Gaussian quadrature oracles for dX = -X dt + dW, psi = cos(x), computed with
# scipy.integrate.quad over the transition law N(x e^{-s}, (1 - e^{-2s})/2)
FINITE_T2_X05 = 1.6057957052718548  # int_0^2 E cos(X_s) ds from x = 0.5
DISCOUNTED_A02_X0 = 3.988641872266844  # int_0^inf e^{-0.2 s} E cos(X_s) ds from x = 0


@pytest.fixture(scope="module")
def ou():
    return build_ou_model()


def test_truncation_horizon_discrete_factor():
    T, tail = truncation_horizon(1.0, 0.1, 0.1, 1e-3)
    m = int(round(T / 0.1))
    assert tail == pytest.approx(10 * 1.01 ** (-m))
    assert tail <= 1e-3 < 10 * 1.01 ** (-(m - 1))
    with pytest.raises(InfeasibleTolerance):
        truncation_horizon(1.0, 1e-4, 0.1, 1e-9, cap=100.0)
    assert truncation_horizon(0.0, 0.5, 0.1, 1e-3, min_horizon=1.0) == (pytest.approx(1.0), 0.0)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.01, 2.0), tol=st.floats(1e-8, 1e-1))
def test_truncation_tail_within_tolerance(alpha, tol):
    T, tail = truncation_horizon(2.0, alpha, 0.05, tol)
    assert tail <= tol * (1 + 1e-9)
    assert T > 0


def test_constant_driver_exact():
    m = build_ou_model()
    cfg = SolverConfig(dt=0.1, n_paths=16, tail_tol=1e-7)
    for alpha in (0.4, 0.2, 0.1):
        dv = solve_discounted(m, constant_driver(1.5), alpha, [[0.0], [1.0]], RegressionBasis(degree=2), cfg)
        assert np.all(np.abs(dv.values - 1.5 / alpha) <= 1e-6)


def test_terminal_only_matches_gaussian_second_moment(ou):
    cfg = SolverConfig(dt=0.02, n_paths=20000, seed=3, noise_correction=True)
    sol = solve_finite_horizon(ou, constant_driver(0.0), lambda x: x[..., 0] ** 2, 1.0, 0.0,
                               RegressionBasis(degree=2), cfg, x0=[1.0])
    exact = np.exp(-2.0) + (1 - np.exp(-2.0)) / 2
    assert abs(sol.y0 - exact) <= 4 * sol.y0_stderr


def test_finite_horizon_cos_matches_quadrature(ou):
    cfg = SolverConfig(dt=0.02, n_paths=8000, seed=1, noise_correction=True)
    sol = solve_finite_horizon(ou, cos_driver(), None, 2.0, 0.0, RegressionBasis(degree=4), cfg, x0=[0.5])
    assert abs(sol.y0 - FINITE_T2_X05) <= max(4 * sol.y0_stderr, 5e-3)


def test_linear_z_driver_acts_as_drift_change():
    # psi = c.zeta is a Girsanov drift change of +Q c: Y_0 = E[X_T] under drift -X + c
    m = build_ou_model(sigma=0.7)
    c = 0.6
    cfg = SolverConfig(dt=0.02, n_paths=40000, seed=6, noise_correction=True)
    sol = solve_finite_horizon(m, linear_z_driver([c]), lambda x: x[..., 0], 1.0, 0.0,
                               RegressionBasis(degree=1), cfg, x0=[0.3])
    exact = 0.3 * np.exp(-1.0) + c * (1 - np.exp(-1.0))
    assert abs(sol.y0 - exact) <= 4 * sol.y0_stderr + 2e-3


def test_discounted_cos_matches_quadrature(ou):
    cfg = SolverConfig(dt=0.02, n_paths=4000, seed=7, noise_correction=True, tail_tol=1e-3)
    dv = solve_discounted(ou, cos_driver(), 0.2, [[0.0]], RegressionBasis(degree=4), cfg)
    assert abs(dv.values[0] - DISCOUNTED_A02_X0) <= max(4 * dv.stderr[0], 1e-3) + dv.tail_bound
    assert dv.bound_ok(1.0).all()


def test_same_seed_is_deterministic(ou):
    cfg = SolverConfig(dt=0.05, n_paths=200, seed=4)
    a = solve_finite_horizon(ou, cos_driver(), None, 1.0, 0.1, RegressionBasis(degree=3), cfg)
    b = solve_finite_horizon(ou, cos_driver(), None, 1.0, 0.1, RegressionBasis(degree=3), cfg)
    assert a.y0 == b.y0 and np.array_equal(a.mean_y, b.mean_y)


def test_residual_and_fresh_paths(ou):
    cfg = SolverConfig(dt=0.05, n_paths=2000, seed=4)
    sol = solve_finite_horizon(ou, cos_driver(), None, 2.0, 0.1, RegressionBasis(degree=4), cfg)
    rep = residual_diagnostic(sol)
    assert rep.passed and rep.mean_square < 1e-3
    fresh = fresh_path_check(sol, ou, cos_driver(), cfg, seed=99)
    assert fresh["consistent"]


def test_pooled_representation_has_batches():
    m = reaction_model(3)
    drv = state_driver(lambda x: np.cos(x[..., -1]), 1.0, 1.0, 1, m.d2)
    cfg = SolverConfig(dt=0.05, n_paths=500, seed=1, pool_burn=1.0, pool_width=1.0, pool_batches=5)
    dv = solve_discounted(m, drv, 0.5, [np.zeros(4)], RegressionBasis(degree=2, projection=(0, 3)),
                          cfg, pool=True)
    rep = dv.pooled
    assert rep is not None and rep.n_batches == 5
    x = np.zeros((2, 4))
    assert rep.value(x).shape == (2,)
    assert rep.zeta1(x).shape == (2, 1) and rep.zeta2(x).shape == (2, 3)
    assert rep.shifted(1.0).value(x) == pytest.approx(rep.value(x) - 1.0)


def test_regression_conditioning_guard(ou):
    cfg = SolverConfig(dt=0.1, n_paths=100, cond_max=1.0)
    with pytest.raises(RegressionError):
        solve_finite_horizon(ou, cos_driver(), None, 1.0, 0.1, RegressionBasis(degree=3), cfg)


def test_basis_and_input_validation(ou):
    with pytest.raises(ValueError):
        RegressionBasis(projection=tuple(range(9)))
    with pytest.raises(ValueError):
        RegressionBasis(kind="spline")
    with pytest.raises(ValueError):
        RegressionBasis().check_model(12)
    cfg = SolverConfig(dt=0.1, n_paths=10)
    with pytest.raises(ValueError):
        solve_finite_horizon(ou, cos_driver(), None, -1.0, 0.0, RegressionBasis(), cfg)
    with pytest.raises(ValueError):
        solve_discounted(ou, cos_driver(), 0.0, [[0.0]], RegressionBasis(), cfg)


def test_radial_basis_runs(ou):
    cfg = SolverConfig(dt=0.05, n_paths=500, seed=2)
    sol = solve_finite_horizon(ou, cos_driver(), None, 1.0, 0.0,
                               RegressionBasis(kind="radial", centers=3, width=0.7), cfg, x0=[0.5])
    assert abs(sol.y0 - 0.9) < 0.2


def test_solution_csv(ou, tmp_path):
    sol = solve_finite_horizon(ou, cos_driver(), None, 0.5, 0.0, RegressionBasis(degree=2),
                               SolverConfig(dt=0.1, n_paths=50))
    p = tmp_path / "sol.csv"
    sol.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,mean_y,stderr_y,mean_abs_z,mean_abs_u"
    assert len(lines) == 1 + len(sol.times)
