"""Ergodic pair ``(vbar, lambda)`` by vanishing discount, and its checks.

``lambda`` is the intercept of a least-squares line through
``(alpha, alpha v^alpha(x_ref))``; ``vbar(x)`` is the intercept of the line
through ``(alpha, v^alpha(x) - v^alpha(x_ref))``.  All discounted solves
share one seed, so the differences across ``alpha`` and across points are
common-random-number differences.  Off the evaluation points, ``vbar``
and ``zeta = (zeta1, zeta2)`` come from the time-pooled regression of the
smallest-``alpha`` solve.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import (
    PooledRepresentation,
    RegressionBasis,
    SolverConfig,
    solve_discounted,
    solve_finite_horizon,
)
from .forward import PathStream
from .hamiltonian import DriverSpec
from .model import GalerkinModel

__all__ = [
    "AlphaRecord",
    "ErgodicSolution",
    "HjbVerificationReport",
    "extrapolation_weights",
    "vanishing_discount",
    "lipschitz_uniformity_diag",
    "verify_ergodic_bsde_residual",
    "verify_mild_hjb",
    "parabolic_long_time_ratio",
    "gradient_consistency",
    "differentiability_predicate",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AlphaRecord:
    alpha: float
    v_alpha_ref: float
    alpha_v: float
    stderr: float
    lipschitz_probe: float = float("nan")


def extrapolation_weights(alphas, fit_points: int | None = 3) -> np.ndarray:
    """Weights ``w`` with ``intercept = w @ values`` for a linear fit in alpha.

    Only the ``fit_points`` smallest alphas enter the fit (all when
    ``None``); with a single point the last value is returned.
    """
    a = np.asarray(alphas, dtype=float)
    w = np.zeros(len(a))
    k = len(a) if fit_points is None else min(fit_points, len(a))
    if k < 2:
        w[-1] = 1.0
        return w
    sel = np.argsort(a)[:k]
    A = np.vstack([np.ones(k), a[sel]]).T
    w[sel] = np.linalg.pinv(A)[0]
    return w


@dataclass
class ErgodicSolution:
    lambda_hat: float
    lambda_stderr: float
    x_ref: np.ndarray
    eval_points: np.ndarray
    vbar_values: np.ndarray
    vbar_stderr: np.ndarray
    zeta1_values: np.ndarray
    zeta2_values: np.ndarray
    alpha_records: list
    lambda_at_points: np.ndarray
    lambda_at_stderr: np.ndarray
    representation: PooledRepresentation | None
    values_by_alpha: np.ndarray  # (n_alpha, n_points), x_ref first
    stderr_by_alpha: np.ndarray
    schedule: tuple
    seed: int
    warnings: list = field(default_factory=list)
    rep_offset: float = 0.0

    def _index(self, x):
        pts = np.vstack([self.x_ref[None], self.eval_points])
        d = np.linalg.norm(pts - np.asarray(x, dtype=float), axis=1)
        k = int(np.argmin(d))
        if d[k] > 1e-12:
            raise KeyError("state is not an evaluation point")
        return k

    def vbar_at(self, x) -> tuple:
        """``(vbar(x), stderr)`` at ``x_ref`` or an evaluation point."""
        k = self._index(x)
        if k == 0:
            return 0.0, 0.0
        return float(self.vbar_values[k - 1]), float(self.vbar_stderr[k - 1])

    def vbar(self, x):
        """Off-grid ``vbar`` from the pooled representation, pinned at ``x_ref``."""
        if self.representation is None:
            raise RuntimeError("no pooled representation available")
        return self.representation.value(x) - self.rep_offset

    def zeta1(self, x):
        if self.representation is None:
            raise RuntimeError("no pooled representation available")
        return self.representation.zeta1(x)

    def zeta2(self, x):
        if self.representation is None:
            raise RuntimeError("no pooled representation available")
        return self.representation.zeta2(x)

    def alpha_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "v_alpha_ref", "alpha_v", "stderr"])
            for r in self.alpha_records:
                w.writerow([repr(r.alpha), repr(r.v_alpha_ref), repr(r.alpha_v), repr(r.stderr)])

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "lambda_hat": self.lambda_hat,
            "stderr": self.lambda_stderr,
            "schedule": list(self.schedule),
            "seed": self.seed,
            "x_ref": self.x_ref.tolist(),
            "vbar": [
                {"x": p.tolist(), "value": float(v), "stderr": float(s)}
                for p, v, s in zip(self.eval_points, self.vbar_values, self.vbar_stderr)
            ],
            "warnings": list(self.warnings),
        }

    def summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def vanishing_discount(model: GalerkinModel, driver: DriverSpec, alpha_schedule, x_ref,
                       eval_points, basis: RegressionBasis, cfg: SolverConfig,
                       pool: bool = True, fit_points: int | None = 3) -> ErgodicSolution:
    """Discounted solves along a decreasing schedule, then extrapolation to alpha = 0.

    The extrapolation is a least-squares line in alpha through the
    ``fit_points`` smallest alphas, where the expansion
    ``alpha v^alpha = lambda + alpha vbar + O(alpha^2)`` is most nearly linear.
    """
    alphas = np.asarray(alpha_schedule, dtype=float)
    if len(alphas) < 3:
        raise ValueError("alpha_schedule needs at least 3 entries")
    if np.any(np.diff(alphas) >= 0) or np.any(alphas <= 0):
        raise ValueError("alpha_schedule must be positive and strictly decreasing")
    x_ref = model.check_state(x_ref).astype(float)
    pts = np.zeros((0, model.n_modes)) if eval_points is None or len(eval_points) == 0 \
        else np.atleast_2d(model.check_state(eval_points))
    allpts = np.vstack([x_ref[None], pts])
    n_a, n_p = len(alphas), len(allpts)
    vals = np.empty((n_a, n_p))
    ses = np.empty((n_a, n_p))
    diff_se = np.zeros((n_a, n_p))
    rep = None
    for i, a in enumerate(alphas):
        dv = solve_discounted(model, driver, a, allpts, basis, cfg, pool=pool and i == n_a - 1)
        vals[i] = dv.values
        ses[i] = dv.stderr
        for k in range(1, n_p):
            d = dv.targets[k] - dv.targets[0]
            diff_se[i, k] = d.std(ddof=1) / np.sqrt(len(d)) if len(d) > 1 else 0.0
        if dv.pooled is not None:
            rep = dv.pooled

    w = extrapolation_weights(alphas, fit_points)
    av = alphas[:, None] * vals
    lam_pts = w @ av
    lam_se_pts = np.abs(w) @ (alphas[:, None] * ses)
    diffs = vals - vals[:, :1]
    vbar = w @ diffs[:, 1:] if n_p > 1 else np.zeros(0)
    vbar_se = np.abs(w) @ diff_se[:, 1:] if n_p > 1 else np.zeros(0)

    notes = []
    seq = av[:, 0]
    steps = np.diff(seq)
    noise = 3 * np.hypot(alphas[1:] * ses[1:, 0], alphas[:-1] * ses[:-1, 0])
    if np.any(steps > noise) and np.any(steps < -noise):
        msg = "alpha * v_alpha(x_ref) is not monotone in alpha beyond noise"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    records = []
    for i, a in enumerate(alphas):
        probe = float("nan")
        if n_p > 1:
            dx = np.linalg.norm(allpts[1] - allpts[0])
            probe = abs(vals[i, 1] - vals[i, 0]) / dx if dx > 0 else float("nan")
        records.append(AlphaRecord(float(a), float(vals[i, 0]), float(av[i, 0]),
                                   float(alphas[i] * ses[i, 0]), probe))

    if rep is not None:
        z1 = np.atleast_2d(rep.zeta1(pts)) if n_p > 1 else np.zeros((0, model.d1))
        z2 = np.atleast_2d(rep.zeta2(pts)) if n_p > 1 else np.zeros((0, model.d2))
        offset = float(rep.value(x_ref))
    else:
        z1 = np.full((n_p - 1, model.d1), np.nan)
        z2 = np.full((n_p - 1, model.d2), np.nan)
        offset = 0.0
    return ErgodicSolution(
        lambda_hat=float(lam_pts[0]), lambda_stderr=float(lam_se_pts[0]), x_ref=x_ref,
        eval_points=pts, vbar_values=vbar, vbar_stderr=vbar_se, zeta1_values=z1,
        zeta2_values=z2, alpha_records=records, lambda_at_points=lam_pts,
        lambda_at_stderr=lam_se_pts, representation=rep, values_by_alpha=vals,
        stderr_by_alpha=ses, schedule=tuple(float(a) for a in alphas), seed=cfg.seed,
        warnings=notes, rep_offset=offset,
    )


# ---------------------------------------------------------------------------


def lipschitz_uniformity_diag(erg: ErgodicSolution, pair_list, max_spread: float = 0.3) -> dict:
    """Difference quotients ``|v^a(x) - v^a(x')| / |x - x'|`` per alpha and pair.

    ``spread`` is ``(max - min) / max`` of the quotients of a pair; a pair
    is flagged when the spread exceeds ``max_spread`` and the quotient
    grows as alpha decreases.
    """
    if len(erg.schedule) < 2 or len(pair_list) < 1:
        raise ValueError("need at least 2 alphas and 1 pair")
    rows = []
    for x, xp in pair_list:
        i, j = erg._index(x), erg._index(xp)
        dx = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)))
        q = np.abs(erg.values_by_alpha[:, i] - erg.values_by_alpha[:, j]) / dx
        qmax = float(q.max())
        spread = float((qmax - q.min()) / qmax) if qmax > 0 else 0.0
        growing = bool(np.all(np.diff(q) >= 0)) and q[-1] > q[0]
        rows.append({
            "pair": (np.asarray(x).tolist(), np.asarray(xp).tolist()),
            "alphas": list(erg.schedule),
            "quotients": q.tolist(),
            "spread": spread,
            "flagged": bool(spread >= max_spread and growing),
            "uniform": bool(spread < max_spread),
        })
    return {"pairs": rows, "uniform": all(r["uniform"] for r in rows)}


def _ginv_row(model, x, z):
    g = model.g_inv_map(x)
    if model.d1 == 1:
        return z * g[..., 0, :1]
    return np.einsum("...i,...ij->...j", z, g)


@dataclass
class ResidualStats:
    T: float
    mean_residual: float
    mean_residual_stderr: float
    mean_square: float
    interval_mean_square: float
    tolerance: float
    passed: bool
    detected_offset: bool


def verify_ergodic_bsde_residual(model: GalerkinModel, driver: DriverSpec, erg: ErgodicSolution,
                                 T: float, cfg: SolverConfig, x0=None, lambda_offset: float = 0.0,
                                 tolerance: float = 5e-3, seed: int | None = None) -> ResidualStats:
    """Pathwise ergodic BSDE identity on fresh paths.

    ``R = vbar(X_T) - vbar(X_0) + int (psi(X, zeta1 G^-1, zeta2) - lambda) dt
    - int zeta1 dW1 - int zeta2 dW2`` should vanish.  ``mean_square`` is the
    path average of ``(R / T)^2``; ``detected_offset`` is true when
    ``|mean R|`` exceeds three standard errors.
    """
    lam = erg.lambda_hat + lambda_offset
    x0 = erg.x_ref if x0 is None else model.check_state(x0)
    seed = cfg.seed + 7919 if seed is None else seed
    stream = PathStream(model, x0, cfg.sim(T, seed))
    n = cfg.n_paths
    acc = np.zeros(n)
    ims = [0.0]
    count = [0]
    stream.run()
    for b in range(stream.n_blocks):
        i0, states, dW1, dW2 = stream.block(b)
        vx = erg.vbar(states[0])
        for j in range(states.shape[0] - 1):
            x = states[j]
            z1 = erg.zeta1(x)
            z2 = erg.zeta2(x)
            psi = driver.psi(x, _ginv_row(model, x, z1), z2)
            v_next = erg.vbar(states[j + 1])
            r = v_next - vx + stream.dt * (psi - lam) - np.sum(z1 * dW1[j], 1) - np.sum(z2 * dW2[j], 1)
            acc += r
            ims[0] += float(np.mean(r * r))
            count[0] += 1
            vx = v_next
    mean_r = float(acc.mean())
    se = float(acc.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    ms = float(np.mean((acc / T) ** 2))
    return ResidualStats(
        T, mean_r / T, se / T, ms, ims[0] / max(count[0], 1) / stream.dt, tolerance,
        ms <= tolerance, abs(mean_r) > 3 * se,
    )


@dataclass
class HjbVerificationReport:
    rows: list
    n_paths: int

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)


def verify_mild_hjb(model: GalerkinModel, driver: DriverSpec, erg: ErgodicSolution, t_T_pairs,
                    eval_points, cfg: SolverConfig, vbar: Callable | None = None,
                    zeta1: Callable | None = None, zeta2: Callable | None = None,
                    seed: int | None = None) -> HjbVerificationReport:
    """Monte Carlo residual of the mild ergodic HJB identity

        v(x) - P_{T-t}[v](x) - int_t^T (P_{s-t}[psi(., grad v Q G G^-1, grad v D)](x) - lambda) ds

    with ``grad v Q G`` and ``grad v D`` given by ``zeta1`` and ``zeta2``.
    One path bundle per point serves every quadrature node (trapezoid rule
    on the simulation grid).
    """
    vbar = vbar or (erg.vbar if erg.representation is not None else None)
    zeta1 = zeta1 or (erg.zeta1 if erg.representation is not None else None)
    zeta2 = zeta2 or (erg.zeta2 if erg.representation is not None else None)
    if vbar is None or zeta1 is None or zeta2 is None:
        raise ValueError("gradient surrogate unavailable: the ergodic solution has no representation")
    seed = cfg.seed + 104729 if seed is None else seed
    lam = erg.lambda_hat
    rows = []
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    for t, T in t_T_pairs:
        tau = T - t
        if tau <= 0:
            raise ValueError("need t < T")
        for x in pts:
            stream = PathStream(model, x, cfg.sim(tau, seed))
            m = stream.m
            integ = np.zeros(cfg.n_paths)
            last = [None]

            def observe(i, s, xs):
                g = driver.psi(xs, _ginv_row(model, xs, zeta1(xs)), zeta2(xs)) - lam
                wgt = 0.5 if i in (0, m) else 1.0
                integ[:] += wgt * stream.dt * g
                if i == m:
                    last[0] = xs

            stream.run(observer=observe)
            d = float(vbar(x[None])[0]) - vbar(last[0]) - integ
            mean = float(d.mean())
            se = float(d.std(ddof=1) / np.sqrt(len(d)))
            rows.append({"t": float(t), "T": float(T), "x": x.tolist(), "residual": mean,
                         "stderr": se, "passed": bool(abs(mean) <= 3 * se + 1e-12)})
    return HjbVerificationReport(rows, cfg.n_paths)


def parabolic_long_time_ratio(model: GalerkinModel, driver: DriverSpec, T_list, x,
                              basis: RegressionBasis, cfg: SolverConfig,
                              lambda_hat: float | None = None) -> dict:
    """``v^T(0, x) / T`` for the undiscounted problem with zero terminal value."""
    Ts = np.asarray(T_list, dtype=float)
    if np.any(np.diff(Ts) <= 0):
        raise ValueError("T_list must be increasing")
    ratios, ses = [], []
    for T in Ts:
        sol = solve_finite_horizon(model, driver, None, float(T), 0.0, basis, cfg, x0=x)
        ratios.append(sol.y0 / T)
        ses.append(sol.y0_stderr / T)
    ratios = np.array(ratios)
    ses = np.array(ses)
    out = {"T": Ts.tolist(), "ratio": ratios.tolist(), "stderr": ses.tolist()}
    if lambda_hat is not None:
        err = np.abs(ratios - lambda_hat)
        out["abs_error"] = err.tolist()
        out["rel_error"] = (err / abs(lambda_hat) if lambda_hat else err).tolist()
        tol = 3 * ses
        out["decreasing"] = bool(np.all(np.diff(err) <= tol[1:] + tol[:-1]))
    return out


def differentiability_predicate(mu: float, L_z: float, M_Ginv: float, L_u: float) -> dict:
    rhs = 2.0 * (L_z ** 2 * M_Ginv ** 2 + L_u ** 2)
    return {"mu": float(mu), "threshold": float(rhs), "holds": bool(mu > rhs)}


def gradient_consistency(model: GalerkinModel, driver: DriverSpec, erg: ErgodicSolution, eval_points,
                         h_list=(0.1, 0.05), mu_hat: float | None = None, abs_tol: float = 5e-2) -> dict:
    """Finite-difference ``grad vbar`` against the regressed ``zeta``.

    Central differences at each ``h`` are Richardson-combined over
    consecutive steps; standard errors come from the path-batch
    representations.
    """
    rep = erg.representation
    if rep is None:
        raise ValueError("ergodic solution has no representation")
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    hs = sorted(h_list, reverse=True)
    n = model.n_modes

    def grad(value, x):
        ests = []
        for h in hs:
            e = np.eye(n) * h
            vp = value(x[None] + e)
            vm = value(x[None] - e)
            ests.append((vp - vm) / (2 * h))
        g = ests[-1]
        if len(ests) >= 2:
            r = hs[-2] / hs[-1]
            g = (r * r * ests[-1] - ests[-2]) / (r * r - 1)
        return g

    def project(g, x):
        qg = model.q_matrix @ model.g_map(x[None])[0]
        return g @ qg, g @ model.d_matrix

    rows = []
    for x in pts:
        g_full = grad(rep.value, x)
        fd1, fd2 = project(g_full, x)
        z1 = rep.zeta1(x[None])[0]
        z2 = rep.zeta2(x[None])[0]
        b1, b2 = [], []
        for b in range(rep.n_batches):
            gb = grad(lambda y, b=b: rep.value(y, batch=b), x)
            p1, p2 = project(gb, x)
            b1.append(p1 - rep.zeta1(x[None], batch=b)[0])
            b2.append(p2 - rep.zeta2(x[None], batch=b)[0])
        nb = rep.n_batches
        se1 = np.std(b1, axis=0, ddof=1) / np.sqrt(nb) if nb > 1 else np.zeros_like(z1)
        se2 = np.std(b2, axis=0, ddof=1) / np.sqrt(nb) if nb > 1 else np.zeros_like(z2)
        d1 = np.abs(fd1 - z1)
        d2 = np.abs(fd2 - z2)
        tol1 = np.maximum(3 * se1, abs_tol)
        tol2 = np.maximum(3 * se2, abs_tol)
        rows.append({
            "x": x.tolist(), "fd_zeta1": fd1.tolist(), "zeta1": z1.tolist(), "se1": se1.tolist(),
            "fd_zeta2": fd2.tolist(), "zeta2": z2.tolist(), "se2": se2.tolist(),
            "noisy": bool(np.any(se1 > np.abs(fd1)) or np.any(se2 > np.abs(fd2) + 1e-300)),
            "passed": bool(np.all(d1 <= tol1) and np.all(d2 <= tol2)),
        })
    c = driver.constants
    pred = differentiability_predicate(mu_hat if mu_hat is not None else float("nan"),
                                       c.L_z, model.constants.M_Ginv, c.L_u)
    return {"rows": rows, "predicate": pred, "passed": all(r["passed"] for r in rows)}
