"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line; the lines are repeated in
the terminal summary.  Run with ``pytest tests/test_acceptance.py -v``.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ergobsde.bsde import RegressionBasis, SolverConfig, solve_discounted
from ergobsde.control import CostConfig, constant_policy, synthesize_feedback, verify_bound_and_gap
from ergobsde.ergodic import lipschitz_uniformity_diag, parabolic_long_time_ratio, vanishing_discount
from ergobsde.forward import SimConfig, estimate_contraction
from ergobsde.hamiltonian import (
    biconjugate,
    build_conjugate_table,
    constant_driver,
    example2_closed_form,
    example2_control_structure,
    grid_tolerance,
    hamiltonian_from_control,
)
from ergobsde.model import build_ou_model, joint_dissipativity_certificate

from helpers import cos_driver, example2_pieces, reaction_model

pytestmark = pytest.mark.acceptance

SCEN = Path(__file__).resolve().parents[1] / "scenarios"
LAMBDA_OU = float(np.exp(-0.25))  # E cos(X_inf), X_inf ~ N(0, 1/2)
OU_SCHEDULE = (0.4, 0.2, 0.1, 0.05, 0.025)
EX2_SCHEDULE = (0.4, 0.2, 0.1, 0.04)
BOUND_ALPHAS = (0.5, 0.2, 0.1, 0.05)
EX2_N = 6


def ou_cfg(n_paths=10_000, seed=11):
    return SolverConfig(dt=0.02, n_paths=n_paths, seed=seed, noise_correction=True, tail_tol=1e-3)


def ex2_cfg(n_paths=4000, seed=5):
    return SolverConfig(dt=0.05, n_paths=n_paths, seed=seed, tail_tol=1e-2)


EX2_BASIS = RegressionBasis(degree=3, projection=(0, 1, EX2_N))


@pytest.fixture(scope="module")
def ou():
    return build_ou_model()


@pytest.fixture(scope="module")
def ou_erg(ou):
    t0 = time.perf_counter()
    erg = vanishing_discount(ou, cos_driver(), OU_SCHEDULE, [0.0], [[1.0]], RegressionBasis(degree=6),
                             ou_cfg(), fit_points=3)
    return erg, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ou_rate(ou):
    return estimate_contraction(ou, np.zeros(1), np.ones(1), SimConfig(0.01, 10.0, 100))


@pytest.fixture(scope="module")
def ex2():
    model = reaction_model(EX2_N)
    _, driver, cs = example2_pieces(model, gamma_points=401)
    return model, driver, cs


@pytest.fixture(scope="module")
def ex2_erg(ex2):
    model, driver, _ = ex2
    x_ref = np.zeros(EX2_N + 1)
    y1 = np.eye(EX2_N + 1)[EX2_N]
    return vanishing_discount(model, driver, EX2_SCHEDULE, x_ref, [y1], EX2_BASIS, ex2_cfg(), fit_points=3)


def test_c1_constant_driver(ou, criterion):
    t0 = time.perf_counter()
    c = 1.5
    drv = constant_driver(c)
    cfg = SolverConfig(dt=0.1, n_paths=16, seed=1, tail_tol=1e-7, pool_burn=1.0, pool_width=1.0)
    errs = []
    for a in (0.4, 0.2, 0.1):
        dv = solve_discounted(ou, drv, a, [[0.0], [1.0]], RegressionBasis(degree=2), cfg)
        errs.append(float(np.max(np.abs(dv.values - c / a))))
    erg = vanishing_discount(ou, drv, (0.4, 0.2, 0.1), [0.0], [[1.0]], RegressionBasis(degree=2), cfg)
    lam_err = abs(erg.lambda_hat - c)
    ratio = parabolic_long_time_ratio(ou, drv, [1.0, 5.0, 10.0], [0.0], RegressionBasis(degree=2), cfg)
    ratio_err = float(np.max(np.abs(np.array(ratio["ratio"]) - c)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-6 and lam_err <= 1e-6 and ratio_err <= 1e-6 and elapsed < 60
    criterion("1", ok, f"max|v^a - c/a|={max(errs):.2e} |lambda-c|={lam_err:.2e} "
                       f"max|v^T/T - c|={ratio_err:.2e} tol=1e-6 runtime={elapsed:.1f}s")
    assert ok


def test_c2_ou_lambda(ou_erg, criterion):
    erg, elapsed = ou_erg
    tol = max(3 * erg.lambda_stderr, 0.01)
    err = abs(erg.lambda_hat - LAMBDA_OU)
    total_paths = 10_000 * len(OU_SCHEDULE) * 2
    ok = err <= tol and erg.lambda_stderr <= 0.01 and total_paths <= 200_000 and elapsed < 600
    criterion("2", ok, f"lambda_hat={erg.lambda_hat:.5f} exact={LAMBDA_OU:.5f} err={err:.2e} "
                       f"tol={tol:.2e} stderr={erg.lambda_stderr:.2e} paths={total_paths} runtime={elapsed:.0f}s")
    assert ok


def test_c3_example2_hamiltonian(criterion):
    cs = example2_control_structure(lambda x: np.zeros(np.shape(x)[:-1]), 2001)
    z = np.linspace(-4.0, 4.0, 401)
    assert np.isclose(z, 2.0).any() and np.isclose(z, -2.0).any()
    h = hamiltonian_from_control(cs, np.zeros((401, 1)), z[:, None], np.zeros((401, 1)))
    # closed form written out independently: -z^2/4 on [-2, 2], 1 - |z| outside
    exact = np.array([-zz * zz / 4 if abs(zz) <= 2 else 1 - abs(zz) for zz in z])
    err = float(np.max(np.abs(h - exact)))
    junction = float(np.max(np.abs(h[np.isclose(np.abs(z), 2.0)] + 1.0)))
    ok = err <= 1e-3 and junction <= 1e-3
    assert np.allclose(example2_closed_form(z), exact, atol=1e-15)
    criterion("3", ok, f"max grid error={err:.2e} junction error={junction:.2e} tol=1e-3 (401 z in [-4,4])")
    assert ok


def test_c4_discounted_bound(ou, ex2, criterion):
    model2, driver2, _ = ex2
    cases = [
        ("constant", ou, constant_driver(1.5), [[0.0], [1.0]], RegressionBasis(degree=2),
         SolverConfig(dt=0.1, n_paths=16, tail_tol=1e-7)),
        ("ou", ou, cos_driver(), [[0.0], [1.0], [2.0]], RegressionBasis(degree=4), ou_cfg(2000, seed=21)),
        ("example2", model2, driver2, [np.zeros(EX2_N + 1), np.eye(EX2_N + 1)[EX2_N]], EX2_BASIS,
         ex2_cfg(1000, seed=22)),
    ]
    worst = []
    ok = True
    for name, m, drv, pts, basis, cfg in cases:
        M = drv.constants.M_psi
        margins = []
        for a in BOUND_ALPHAS:
            dv = solve_discounted(m, drv, a, pts, basis, cfg)
            slack = M / a + dv.tail_bound + 3 * dv.stderr - np.abs(dv.values)
            margins.append(float(slack.min()))
            ok &= bool(dv.bound_ok(M).all())
        worst.append(f"{name}:min slack={min(margins):.3g}")
    criterion("4", ok, "|v^a| <= M/a + tail + 3se for a in {0.5,0.2,0.1,0.05}; " + " ".join(worst))
    assert ok


def test_c5_lipschitz_uniformity(ou_erg, ex2_erg, criterion):
    erg_ou, _ = ou_erg
    d_ou = lipschitz_uniformity_diag(erg_ou, [([0.0], [1.0])])
    x_ref = np.zeros(EX2_N + 1)
    d_ex = lipschitz_uniformity_diag(ex2_erg, [(x_ref, np.eye(EX2_N + 1)[EX2_N])])
    s_ou = d_ou["pairs"][0]["spread"]
    s_ex = d_ex["pairs"][0]["spread"]
    ok = s_ou < 0.3 and s_ex < 0.3
    criterion("5", ok, f"quotient spread ou={s_ou:.3f} (alpha {OU_SCHEDULE[0]}..{OU_SCHEDULE[-1]}) "
                       f"example2={s_ex:.3f} (alpha {EX2_SCHEDULE[0]}..{EX2_SCHEDULE[-1]}) tol<0.30")
    assert ok


def test_c6_long_time_ratio(ou, ou_erg, ou_rate, criterion):
    erg, _ = ou_erg
    T_end = 50.0 / ou_rate.mu_hat
    T_end = round(T_end / 0.02) * 0.02
    out = parabolic_long_time_ratio(ou, cos_driver(), [5.0, 10.0, 20.0, T_end], [0.0],
                                    RegressionBasis(degree=6), ou_cfg(10_000, seed=31), erg.lambda_hat)
    rel = out["rel_error"][-1]
    ok = rel <= 0.05 and out["decreasing"]
    criterion("6", ok, f"v^T/T at T={T_end:.2f}: {out['ratio'][-1]:.5f} vs lambda_hat={erg.lambda_hat:.5f} "
                       f"rel err={rel:.2e} tol=5e-2; errors along T={np.round(out['abs_error'], 5).tolist()}")
    assert ok


def test_c7_control_optimality(ex2, ex2_erg, criterion):
    t0 = time.perf_counter()
    model, _, cs = ex2
    policies = [synthesize_feedback(ex2_erg, cs, model)]
    policies += [constant_policy(cs, g) for g in (-1.0, -0.5, 0.0, 0.5, 1.0)]
    cfg = CostConfig(dt=0.05, horizon=60.0, burn_in=5.0, n_paths=1000, seed=2)
    rep = verify_bound_and_gap(model, cs, ex2_erg, np.zeros(EX2_N + 1), policies, cfg, 0.02)
    elapsed = time.perf_counter() - t0
    fb = rep["rows"][0]
    ok = rep["passed"] and elapsed < 1200
    consts = " ".join(f"{r['j_hat']:.3f}" for r in rep["rows"][1:])
    criterion("7", ok, f"lambda_hat={ex2_erg.lambda_hat:.4f} J(feedback)={fb['j_hat']:.4f} gap={fb['gap']:.4f} "
                       f"allow={3 * fb['combined_stderr'] + 0.02:.4f}; J(const)=[{consts}] runtime={elapsed:.0f}s")
    assert ok


def test_c8_contraction(ex2, ou_rate, criterion):
    model, _, _ = ex2
    cert = joint_dissipativity_certificate(model)
    x0 = np.zeros(EX2_N + 1)
    x0p = np.ones(EX2_N + 1)
    fit = estimate_contraction(model, x0, x0p, SimConfig(0.01, 8.0, 200, seed=1), mu_guess=cert.mu_bar)
    ok_ex = cert.success and fit.mu_hat >= 0.8 * cert.mu_bar
    ok_ou = abs(ou_rate.mu_hat - 1.0) <= 0.02
    criterion("8", ok_ex and ok_ou, f"example2 fitted={fit.mu_hat:.4f} >= 0.8*mu_bar={0.8 * cert.mu_bar:.4f}; "
                                    f"ou fitted={ou_rate.mu_hat:.5f} (a=1, tol 2%)")
    assert ok_ex and ok_ou


def test_c9_lambda_x_independence(ou_erg, ex2_erg, criterion):
    parts = []
    ok = True
    for name, erg in (("ou", ou_erg[0]), ("example2", ex2_erg)):
        lam = erg.lambda_at_points
        se = erg.lambda_at_stderr
        diff = abs(lam[1] - lam[0])
        lim = 3 * float(np.hypot(se[0], se[1]))
        ok &= bool(diff <= lim)
        parts.append(f"{name}: {lam[0]:.5f} vs {lam[1]:.5f} diff={diff:.2e} <= {lim:.2e}")
    criterion("9", ok, "; ".join(parts))
    assert ok


def test_c10_convex_analysis(ex2, criterion):
    model, driver, _ = ex2
    rng = np.random.default_rng(2024)
    xs = rng.standard_normal((10, EX2_N + 1))
    worst_bic = -np.inf
    worst_fy = 0.0
    masks = []
    for k, x in enumerate(xs):
        tab = build_conjugate_table(driver, x, points=201)
        if k < 5:
            masks.append(tab.domain_mask.copy())
        z = rng.uniform(-4, 4, (100, 1))
        u = rng.standard_normal((100, model.d2))
        xx = np.broadcast_to(x, (100, EX2_N + 1))
        excess = np.abs(biconjugate(driver, tab, x, z, u) - driver.psi(xx, z, u)) - grid_tolerance(tab, z, u)
        worst_bic = max(worst_bic, float(excess.max()))
        # Fenchel-Young: psi(z) + z p + psi*(p) <= 0, equality at z = 2p
        p = tab.p_nodes[tab.domain_mask]
        v = tab.values[tab.domain_mask]
        zq = np.concatenate([2 * p, np.linspace(-4, 4, 81)[:, None]])
        uq = np.zeros((len(zq), model.d2))
        psi = driver.psi(np.broadcast_to(x, (len(zq), EX2_N + 1)), zq, uq)
        eq = np.abs(psi[: len(p)] + 2 * p[:, 0] ** 2 + v)
        ineq = psi[len(p):, None] + zq[len(p):] * p[:, 0][None, :] + v[None, :]
        worst_fy = max(worst_fy, float(eq.max()), float(ineq.max()))
    same = all(np.array_equal(masks[0], m) for m in masks[1:])
    ok = worst_bic <= 0 and worst_fy <= 1e-8 and same
    criterion("10", ok, f"max(|psi**-psi| - grid tol)={worst_bic:.2e} over 1000 samples; "
                        f"Fenchel-Young residual={worst_fy:.2e} tol=1e-8; masks identical over 5 x: {same}")
    assert ok


def _run_cli(args, out):
    cmd = [sys.executable, "-m", "ergobsde.cli"] + args + ["--out", str(out)]
    return subprocess.run(cmd, capture_output=True, text=True).returncode


def test_c11_determinism(tmp_path, criterion):
    runs = [
        ["ergodic", str(SCEN / "constant_driver.toml")],
        ["simulate", str(SCEN / "ou_cos.toml"), "--set", "simulate.n_paths=200",
         "--set", "simulate.dump_paths=true"],
        ["control", str(SCEN / "example2.toml"), "--set", "solver.n_paths=200",
         "--set", "solver.alphas=[0.4, 0.2, 0.1]", "--set", "control.n_paths=50",
         "--set", "control.horizon=10.0"],
    ]
    mismatched = []
    n_files = 0
    for k, args in enumerate(runs):
        dirs = [tmp_path / f"{k}_{rep}" for rep in (0, 1)]
        codes = [_run_cli(args, d) for d in dirs]
        if codes != [0, 0]:
            mismatched.append(f"{args[0]}:exit={codes}")
            continue
        a = {p.name: p.read_bytes() for p in dirs[0].iterdir()}
        b = {p.name: p.read_bytes() for p in dirs[1].iterdir()}
        n_files += len(a)
        if a != b:
            mismatched.append(f"{args[0]}:{sorted(n for n in a if a.get(n) != b.get(n))}")
    ok = not mismatched
    criterion("11", ok, f"{n_files} files byte-identical across repeated runs" if ok
              else f"differences: {mismatched}")
    assert ok
