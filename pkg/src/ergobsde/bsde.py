"""Backward least-squares Monte Carlo for Markovian BSDEs.

The finite-horizon equation

    -dY = (psi(X, Z G^{-1}(X), U) - alpha Y) dt - Z dW1 - U dW2,  Y_T = h(X_T)

is solved on forward paths with the multistep scheme

    Z_t    ~ E[(Yh_{t+1} - c_t) dW1_t | X_t] / dt       (U_t likewise)
    tgt_t  = (tgt_{t+1} + dt psi(X_t, Z_t G^{-1}, U_t)) / (1 + alpha dt)
    Yh_t   ~ E[tgt_t | X_t]

where ``c_t`` is the regression of ``Yh_{t+1}`` on the features of
``X_t`` (a control variate for the martingale increment).  ``Y_0`` is the
sample mean of ``tgt_0``.  Paths are generated by
:class:`~ergobsde.forward.PathStream` and replayed block by block, so the
memory cost does not grow with the horizon.

The discounted infinite-horizon equation is truncated at the smallest
horizon for which the geometric tail of the implicit scheme,
``(M_psi / alpha) (1 + alpha dt)^{-m}``, falls below ``tail_tol``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .forward import PathStream, SimConfig
from .hamiltonian import DriverSpec
from .model import GalerkinModel

__all__ = [
    "RegressionError",
    "InfeasibleTolerance",
    "RegressionBasis",
    "Standardizer",
    "SolverConfig",
    "PooledRepresentation",
    "BsdeSolution",
    "DiscountedValue",
    "ResidualReport",
    "truncation_horizon",
    "solve_finite_horizon",
    "solve_discounted",
    "residual_diagnostic",
    "fresh_path_check",
]

MAX_FEATURE_DIM = 8


class RegressionError(ArithmeticError):
    def __init__(self, step, cond):
        super().__init__(f"ill-conditioned regression at step {step} (cond={cond:.3g})")
        self.step = step
        self.cond = cond


class InfeasibleTolerance(ValueError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, p: np.ndarray, rel: float = 1e-9) -> "Standardizer":
        mu = p.mean(axis=0)
        sd = p.std(axis=0)
        return cls._build(mu, sd, rel)

    @classmethod
    def from_moments(cls, s1, s2, count, rel: float = 1e-9) -> "Standardizer":
        mu = s1 / count
        sd = np.sqrt(np.maximum(s2 / count - mu * mu, 0.0))
        return cls._build(mu, sd, rel)

    @classmethod
    def _build(cls, mu, sd, rel):
        keep = sd > rel * np.maximum(1.0, np.abs(mu))
        return cls(mu, np.where(keep, sd, 1.0), keep)

    def __call__(self, p):
        return ((p - self.mean) / self.scale)[..., self.keep]


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial (total degree) or Gaussian radial features on a projection.

    ``projection`` lists the state coordinates the features see (``None``
    means all).  Features are built on standardised coordinates and always
    include the constant.
    """

    kind: str = "polynomial"
    degree: int = 3
    projection: tuple | None = None
    centers: int = 0
    width: float = 1.0
    center_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("polynomial", "radial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.projection is not None and len(self.projection) > MAX_FEATURE_DIM:
            raise ValueError(f"projection dimension exceeds {MAX_FEATURE_DIM}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    def check_model(self, n_modes: int) -> None:
        k = n_modes if self.projection is None else len(self.projection)
        if k > MAX_FEATURE_DIM:
            raise ValueError(f"projection dimension {k} exceeds {MAX_FEATURE_DIM}")
        if self.projection is not None and max(self.projection) >= n_modes:
            raise ValueError("projection index out of range")

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.projection is None else x[..., list(self.projection)]

    def _exponents(self, k):
        key = (k, self.degree)
        cache = _EXP_CACHE.get(key)
        if cache is None:
            rows = [e for e in itertools.product(range(self.degree + 1), repeat=k) if sum(e) <= self.degree]
            rows.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
            cache = np.array(rows, dtype=int).reshape(len(rows), k)
            _EXP_CACHE[key] = cache
        return cache

    def _centers(self, k):
        rng = np.random.default_rng([self.center_seed, k])
        return rng.standard_normal((self.centers, k))

    def features(self, x, std: Standardizer) -> np.ndarray:
        s = std(self.project(x))
        lead = s.shape[:-1]
        k = s.shape[-1]
        if self.kind == "polynomial":
            exps = self._exponents(k)
            out = np.ones(lead + (len(exps),))
            if k == 0:
                return out
            pw = [np.ones(lead + (k,)), s]
            for _ in range(2, self.degree + 1):
                pw.append(pw[-1] * s)
            for j, e in enumerate(exps):
                if j == 0:
                    continue
                col = None
                for i, ei in enumerate(e):
                    if ei:
                        col = pw[ei][..., i] if col is None else col * pw[ei][..., i]
                out[..., j] = col
            return out
        cols = [np.ones(lead + (1,)), s]
        if k and self.centers:
            c = self._centers(k)
            d2 = np.sum((s[..., None, :] - c) ** 2, axis=-1)
            cols.append(np.exp(-0.5 * d2 / self.width ** 2))
        return np.concatenate(cols, axis=-1)


_EXP_CACHE: dict = {}


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    n_paths: int
    seed: int = 0
    scheme: str = "exponential_euler"
    noise_correction: bool = False
    tail_tol: float = 1e-3
    min_horizon: float = 0.0
    horizon_cap: float = 5000.0
    ridge: float = 1e-12
    cond_max: float = 1e10
    estimate_z: bool = True
    store_paths: bool | None = None
    pool_burn: float = 5.0
    pool_width: float = 5.0
    pool_batches: int = 5

    def sim(self, horizon: float, seed: int | None = None) -> SimConfig:
        return SimConfig(self.dt, horizon, self.n_paths, self.seed if seed is None else seed,
                         self.scheme, self.noise_correction)

    def with_(self, **kw) -> "SolverConfig":
        return SolverConfig(**{**self.__dict__, **kw})


@dataclass
class StepCoefficients:
    std: Standardizer
    beta_y: np.ndarray
    beta_z: np.ndarray | None
    beta_u: np.ndarray | None


@dataclass
class PooledRepresentation:
    """Time-pooled regression of ``(Y, Z, U)`` on a fixed standardiser.

    ``beta_*`` are full-sample coefficients; ``batch_*`` hold one set per
    path batch and give batch-means standard errors.
    """

    basis: RegressionBasis
    std: Standardizer
    beta_y: np.ndarray
    beta_z: np.ndarray
    beta_u: np.ndarray
    batch_y: np.ndarray
    batch_z: np.ndarray
    batch_u: np.ndarray
    window: tuple

    def value(self, x, batch: int | None = None):
        b = self.beta_y if batch is None else self.batch_y[batch]
        return self.basis.features(x, self.std) @ b

    def zeta1(self, x, batch: int | None = None):
        b = self.beta_z if batch is None else self.batch_z[batch]
        return self.basis.features(x, self.std) @ b

    def zeta2(self, x, batch: int | None = None):
        b = self.beta_u if batch is None else self.batch_u[batch]
        return self.basis.features(x, self.std) @ b

    @property
    def n_batches(self) -> int:
        return len(self.batch_y)

    def shifted(self, offset: float) -> "PooledRepresentation":
        """Same representation with ``value`` shifted by a constant."""
        by = self.beta_y.copy()
        by[0] -= offset
        bb = self.batch_y.copy()
        bb[:, 0] -= offset
        return PooledRepresentation(self.basis, self.std, by, self.beta_z, self.beta_u,
                                    bb, self.batch_z, self.batch_u, self.window)


@dataclass
class ResidualReport:
    mean_square: float
    max_interval_mean_square: float
    per_interval: np.ndarray
    orthogonality: float
    threshold: float
    passed: bool


@dataclass
class BsdeSolution:
    times: np.ndarray
    dt: float
    alpha: float
    y0: float
    y0_stderr: float
    target0: np.ndarray
    mean_y: np.ndarray
    stderr_y: np.ndarray
    mean_abs_z: np.ndarray
    mean_abs_u: np.ndarray
    coeffs: list
    residual_ms: np.ndarray
    residual_orth: np.ndarray
    cond_max: float
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    u2: np.ndarray | None = None
    pooled: PooledRepresentation | None = None
    terminal_values: np.ndarray | None = None
    basis: RegressionBasis | None = None
    seed: int = 0
    x0: np.ndarray | None = None

    @property
    def residual_stats(self) -> dict:
        return {
            "mean_square": float(np.mean(self.residual_ms)) if len(self.residual_ms) else 0.0,
            "max_interval": float(np.max(self.residual_ms)) if len(self.residual_ms) else 0.0,
            "orthogonality": float(np.max(self.residual_orth)) if len(self.residual_orth) else 0.0,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mean_y", "stderr_y", "mean_abs_z", "mean_abs_u"])
            for i, t in enumerate(self.times):
                mz = self.mean_abs_z[i] if i < len(self.mean_abs_z) else 0.0
                mu = self.mean_abs_u[i] if i < len(self.mean_abs_u) else 0.0
                w.writerow([repr(float(t)), repr(float(self.mean_y[i])), repr(float(self.stderr_y[i])),
                            repr(float(mz)), repr(float(mu))])


def _solve_spd(gram, rhs, ridge, cond_max, step):
    k = gram.shape[0]
    w = np.linalg.eigvalsh(gram)
    cond = float(w[-1] / max(w[0], 1e-300)) if w[-1] > 0 else np.inf
    if cond > cond_max:
        raise RegressionError(step, cond)
    g = gram + ridge * (np.trace(gram) / k) * np.eye(k)
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(g, lower=True), rhs), cond


def _row_times_ginv(model, x, z):
    ginv = model.g_inv_map(x)
    if model.d1 == 1:
        return z * ginv[..., 0, :1]
    return np.einsum("...i,...ij->...j", z, ginv)


class _Pool:
    def __init__(self, basis, std, n_batches, n_paths, d1, d2, k):
        self.basis = basis
        self.std = std
        self.nb = max(1, min(n_batches, n_paths))
        self.labels = np.arange(n_paths) % self.nb
        self.gram = np.zeros((self.nb, k, k))
        self.rhs = np.zeros((self.nb, k, 1 + d1 + d2))
        self.d1 = d1
        self.d2 = d2

    def add(self, x, cols):
        phi = self.basis.features(x, self.std)
        for b in range(self.nb):
            sel = self.labels == b
            pb = phi[sel]
            self.gram[b] += pb.T @ pb
            self.rhs[b] += pb.T @ cols[sel]

    def finish(self, ridge, window):
        k = self.gram.shape[1]

        def solve(g, r):
            g = g + ridge * (np.trace(g) / k) * np.eye(k)
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(g, lower=True), r)

        full = solve(self.gram.sum(0), self.rhs.sum(0))
        if self.nb > 1:
            batches = np.stack([solve(self.gram[b], self.rhs[b]) for b in range(self.nb)])
        else:
            batches = full[None]
        d1 = self.d1
        return PooledRepresentation(
            self.basis, self.std, full[:, 0], full[:, 1:1 + d1], full[:, 1 + d1:],
            batches[:, :, 0], batches[:, :, 1:1 + d1], batches[:, :, 1 + d1:], window,
        )


def _backward_sweep(model, driver, x0, horizon, alpha, terminal, basis, cfg: SolverConfig,
                    pool_window=None, seed=None, fixed=None):
    """Core forward/backward pass.  ``fixed`` replays stored coefficients."""
    basis.check_model(model.n_modes)
    seed = cfg.seed if seed is None else seed
    stream = PathStream(model, x0, cfg.sim(horizon, seed))
    m, dt = stream.m, stream.dt
    n_paths = cfg.n_paths
    d1, d2 = model.d1, model.d2
    need_z = (cfg.estimate_z or not driver.zu_free) and fixed is None
    store = cfg.store_paths if cfg.store_paths is not None else (n_paths * (m + 1) <= 2_000_000)

    pool = None
    if pool_window is not None and fixed is None:
        i_lo, i_hi = pool_window
        k_proj = basis.project(stream.x0[:1]).shape[-1]
        s1 = np.zeros(k_proj)
        s2 = np.zeros(k_proj)
        count = [0]

        def observe(i, t, x):
            if i_lo <= i <= i_hi:
                p = basis.project(x)
                s1[:] += p.sum(0)
                s2[:] += (p * p).sum(0)
                count[0] += len(p)

        x_t = stream.run(observer=observe)
        std_pool = Standardizer.from_moments(s1, s2, count[0])
        k_feat = basis.features(stream.x0[:1], std_pool).shape[-1]
        pool = _Pool(basis, std_pool, cfg.pool_batches, n_paths, d1, d2, k_feat)
    else:
        x_t = stream.run()

    disc = 1.0 + alpha * dt
    term = np.asarray(terminal(x_t), dtype=float) * np.ones(n_paths)
    target = term.copy()
    yhat = term.copy()
    mean_y = np.empty(m + 1)
    se_y = np.empty(m + 1)
    mean_y[m] = term.mean()
    se_y[m] = term.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else 0.0
    mz = np.zeros(m)
    mu_ = np.zeros(m)
    res_ms = np.zeros(m)
    res_orth = np.zeros(m)
    coeffs = [None] * m
    y_store = np.empty((n_paths, m + 1)) if store else None
    z_store = np.empty((n_paths, m, d1)) if store else None
    u_store = np.empty((n_paths, m, d2)) if store else None
    if store:
        y_store[:, m] = term
    cond_worst = 1.0
    zeros_z = np.zeros((n_paths, d1))
    zeros_u = np.zeros((n_paths, d2))

    for b in reversed(range(stream.n_blocks)):
        i0, states, dW1, dW2 = stream.block(b)
        for j in reversed(range(states.shape[0] - 1)):
            i = i0 + j
            x = states[j]
            w1 = dW1[j]
            w2 = dW2[j]
            if fixed is not None:
                cf = fixed[i]
                phi = basis.features(x, cf.std)
                z = phi @ cf.beta_z if cf.beta_z is not None else zeros_z
                u = phi @ cf.beta_u if cf.beta_u is not None else zeros_u
                psi = driver.psi(x, _row_times_ginv(model, x, z), u)
                target = (target + dt * psi) / disc
                continue
            std = Standardizer.fit(basis.project(x))
            phi = basis.features(x, std)
            gram = phi.T @ phi / n_paths
            if need_z:
                sol, cond = _solve_spd(gram, phi.T @ yhat / n_paths, cfg.ridge, cfg.cond_max, i)
                cvar = yhat - phi @ sol
                cols = np.concatenate([cvar[:, None] * w1, cvar[:, None] * w2], axis=1) / dt
                bzu, _ = _solve_spd(gram, phi.T @ cols / n_paths, cfg.ridge, np.inf, i)
                beta_z, beta_u = bzu[:, :d1], bzu[:, d1:]
                z = phi @ beta_z
                u = phi @ beta_u
            else:
                cond = 1.0
                beta_z = beta_u = None
                z, u = zeros_z, zeros_u
            psi = driver.psi(x, _row_times_ginv(model, x, z), u)
            target = (target + dt * psi) / disc
            beta_y, cond_y = _solve_spd(gram, phi.T @ target / n_paths, cfg.ridge, cfg.cond_max, i)
            cond_worst = max(cond_worst, cond, cond_y)
            yhat_new = phi @ beta_y
            r = yhat_new * disc - yhat - dt * psi
            if need_z:
                r = r + np.sum(z * w1, axis=1) + np.sum(u * w2, axis=1)
            res_ms[i] = np.mean(r * r)
            res_orth[i] = float(np.max(np.abs(phi.T @ r))) / n_paths
            if pool is not None and pool_window[0] <= i <= pool_window[1]:
                if need_z:
                    pcols = np.concatenate([target[:, None], cols], axis=1)
                else:
                    pcols = np.concatenate([target[:, None], np.zeros((n_paths, d1 + d2))], axis=1)
                pool.add(x, pcols)
            coeffs[i] = StepCoefficients(std, beta_y, beta_z, beta_u)
            mean_y[i] = target.mean()
            se_y[i] = target.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else 0.0
            mz[i] = np.mean(np.linalg.norm(z, axis=1))
            mu_[i] = np.mean(np.linalg.norm(u, axis=1))
            if store:
                y_store[:, i] = yhat_new
                z_store[:, i] = z
                u_store[:, i] = u
            yhat = yhat_new

    if fixed is not None:
        return target
    y0 = float(target.mean())
    se0 = float(target.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    if store:
        # the initial slice is the Monte Carlo value, which is what Y_0 means here
        y_store[:, 0] = yhat
    pooled = pool.finish(cfg.ridge, (pool_window[0] * dt, pool_window[1] * dt)) if pool is not None else None
    return BsdeSolution(
        times=stream.times, dt=dt, alpha=alpha, y0=y0, y0_stderr=se0, target0=target,
        mean_y=mean_y, stderr_y=se_y, mean_abs_z=mz, mean_abs_u=mu_, coeffs=coeffs,
        residual_ms=res_ms, residual_orth=res_orth, cond_max=cond_worst,
        y=y_store, z=z_store, u2=u_store, pooled=pooled, terminal_values=term,
        basis=basis, seed=seed, x0=np.asarray(x0, dtype=float),
    )


def _zero_terminal(x):
    return np.zeros(np.shape(x)[:-1])


def solve_finite_horizon(model: GalerkinModel, driver: DriverSpec, terminal: Callable | None,
                         T: float, alpha: float, basis: RegressionBasis, cfg: SolverConfig,
                         x0=None, pool_window: tuple | None = None) -> BsdeSolution:
    """Solve on ``[0, T]`` from ``x0`` (default: the origin).

    ``pool_window=(t_lo, t_hi)`` additionally fits the time-pooled
    representation over that window.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if driver.d1 != model.d1 or driver.d2 != model.d2:
        raise ValueError("driver and model noise dimensions differ")
    x0 = np.zeros(model.n_modes) if x0 is None else model.check_state(x0)
    terminal = terminal or _zero_terminal
    pw = None
    if pool_window is not None:
        pw = (int(round(pool_window[0] / cfg.dt)), int(round(pool_window[1] / cfg.dt)))
    return _backward_sweep(model, driver, x0, T, alpha, terminal, basis, cfg, pool_window=pw)


def truncation_horizon(M_psi: float, alpha: float, dt: float, tail_tol: float,
                       min_horizon: float = 0.0, cap: float = np.inf) -> tuple:
    """``(T, tail_bound)`` for the implicit discounted scheme.

    ``T`` is the smallest multiple of ``dt`` with
    ``(M_psi/alpha)(1 + alpha dt)^{-T/dt} <= tail_tol``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if M_psi <= 0:
        m = max(1, int(np.ceil(min_horizon / dt - 1e-9)))
        return m * dt, 0.0
    rate = np.log1p(alpha * dt) / dt
    t_need = max(np.log(M_psi / (alpha * tail_tol)) / rate, min_horizon, dt)
    m = int(np.ceil(t_need / dt - 1e-9))
    T = m * dt
    if T > cap:
        raise InfeasibleTolerance(
            f"truncation horizon {T:g} exceeds cap {cap:g} (alpha={alpha:g}, tail_tol={tail_tol:g})"
        )
    return T, (M_psi / alpha) * (1.0 + alpha * dt) ** (-m)


@dataclass
class DiscountedValue:
    alpha: float
    eval_points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    truncation_T: float
    tail_bound: float
    targets: list
    solutions: list
    pooled: PooledRepresentation | None = None

    def v_alpha_at(self, x) -> tuple:
        x = np.asarray(x, dtype=float)
        d = np.linalg.norm(self.eval_points - x, axis=1)
        k = int(np.argmin(d))
        if d[k] > 1e-12:
            raise KeyError("state is not an evaluation point")
        return float(self.values[k]), float(self.stderr[k])

    def bound_ok(self, M_psi: float) -> np.ndarray:
        return np.abs(self.values) <= M_psi / self.alpha + self.tail_bound + 3 * self.stderr


def solve_discounted(model: GalerkinModel, driver: DriverSpec, alpha: float, eval_points,
                     basis: RegressionBasis, cfg: SolverConfig, pool: bool = False,
                     keep_solutions: bool = False) -> DiscountedValue:
    """``v^alpha`` at each evaluation point by horizon truncation.

    Every point is solved on its own paths with the same seed (common
    random numbers), so differences between points carry little noise.
    With ``pool`` the first point also yields a time-pooled representation
    over ``[pool_burn, pool_burn + pool_width]``; the horizon is extended so
    the window sits a full truncation horizon before the end.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    T, tail = truncation_horizon(driver.constants.M_psi, alpha, cfg.dt, cfg.tail_tol,
                                 cfg.min_horizon, cfg.horizon_cap)
    vals, ses, targets, sols = [], [], [], []
    pooled = None
    for k, x in enumerate(pts):
        horizon = T
        pw = None
        if pool and k == 0:
            horizon = cfg.pool_burn + cfg.pool_width + T
            pw = (cfg.pool_burn, cfg.pool_burn + cfg.pool_width)
        sol = solve_finite_horizon(model, driver, None, horizon, alpha, basis, cfg, x0=x, pool_window=pw)
        if pw is not None:
            pooled = sol.pooled
        vals.append(sol.y0)
        ses.append(sol.y0_stderr)
        targets.append(sol.target0)
        if keep_solutions:
            sols.append(sol)
    return DiscountedValue(alpha, pts, np.array(vals), np.array(ses), T, tail, targets, sols, pooled)


def residual_diagnostic(solution: BsdeSolution, model: GalerkinModel | None = None,
                        driver: DriverSpec | None = None, threshold: float = 1e-3) -> ResidualReport:
    """Per-interval mean-square of the discrete BSDE identity.

    The residual on ``[t, t+dt]`` is
    ``Y_t (1 + alpha dt) - Y_{t+dt} - dt psi + Z dW1 + U dW2``.
    """
    per = np.asarray(solution.residual_ms)
    ms = float(per.mean()) if len(per) else 0.0
    orth = float(np.max(solution.residual_orth)) if len(per) else 0.0
    return ResidualReport(ms, float(per.max()) if len(per) else 0.0, per, orth, threshold, ms <= threshold)


def fresh_path_check(solution: BsdeSolution, model: GalerkinModel, driver: DriverSpec,
                     cfg: SolverConfig, seed: int, terminal: Callable | None = None) -> dict:
    """Re-evaluate ``Y_0`` on independent paths with the stored ``Z, U`` coefficients."""
    T = solution.times[-1]
    tgt = _backward_sweep(model, driver, solution.x0, T, solution.alpha, terminal or _zero_terminal,
                          solution.basis, cfg, seed=seed, fixed=solution.coeffs)
    y0 = float(tgt.mean())
    se = float(tgt.std(ddof=1) / np.sqrt(len(tgt)))
    comb = float(np.hypot(se, solution.y0_stderr))
    return {"in_sample": solution.y0, "fresh": y0, "fresh_stderr": se,
            "difference": y0 - solution.y0, "combined_stderr": comb,
            "consistent": abs(y0 - solution.y0) <= 3 * comb}
