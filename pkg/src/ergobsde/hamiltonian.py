"""Concave drivers, their concave conjugates and control-induced Hamiltonians.

Conventions: a driver ``psi(x, z, u)`` is concave in ``(z, u)``; its
conjugate is

    psi*(x, p, q) = inf_{z, u} { -z.p - u.q - psi(x, z, u) }

which is finite only on a set ``D*`` contained in the box
``|p| <= L_z, |q| <= L_u`` and gives back ``psi`` through

    psi(x, z, u) = inf_{(p, q) in D*} { -z.p - u.q - psi*(x, p, q) }.

All driver callables are vectorised: ``x`` has shape ``(..., n)``, ``z``
``(..., d1)`` and ``u`` ``(..., d2)``; the result has the broadcast
leading shape.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize

__all__ = [
    "DriverConstants",
    "DriverSpec",
    "ControlStructure",
    "ConjugateSearch",
    "ConjugateResult",
    "ConjugateTable",
    "constant_driver",
    "state_driver",
    "linear_z_driver",
    "example2_driver",
    "control_driver",
    "example2_control_structure",
    "hamiltonian_from_control",
    "epsilon_argmin_selection",
    "example2_closed_form",
    "conjugate",
    "build_conjugate_table",
    "biconjugate",
    "grid_tolerance",
    "validate_driver",
]


@dataclass(frozen=True)
class DriverConstants:
    L_x: float
    L_z: float
    L_u: float
    M_psi: float


@dataclass(frozen=True, eq=False)
class DriverSpec:
    psi: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    constants: DriverConstants
    d1: int = 1
    d2: int = 1
    concave_in_zu: bool = True
    name: str = "driver"
    control: "ControlStructure | None" = None
    # True when psi does not depend on (z, u); lets solvers skip Z/U work
    zu_free: bool = False

    def __call__(self, x, z, u):
        return self.psi(x, z, u)


def _lead(*arrays):
    return np.broadcast_shapes(*(np.shape(a)[:-1] for a in arrays))


def constant_driver(c: float, d1: int = 1, d2: int = 1) -> DriverSpec:
    def psi(x, z, u):
        return np.full(_lead(x, z, u), float(c))

    return DriverSpec(psi, DriverConstants(0.0, 0.0, 0.0, abs(float(c))), d1, d2,
                      name=f"constant({c:g})", zu_free=True)


def state_driver(ell: Callable, L_x: float, M_psi: float, d1: int = 1, d2: int = 1,
                 name: str = "state") -> DriverSpec:
    """``psi(x, z, u) = ell(x)``."""

    def psi(x, z, u):
        return np.broadcast_to(np.asarray(ell(x), dtype=float), _lead(x, z, u))

    return DriverSpec(psi, DriverConstants(L_x, 0.0, 0.0, M_psi), d1, d2, name=name, zu_free=True)


def linear_z_driver(c, d2: int = 1, ell: Callable | None = None, L_x: float = 0.0,
                    M_psi: float = 0.0) -> DriverSpec:
    """``psi = c.z (+ ell(x))``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))

    def psi(x, z, u):
        out = np.broadcast_to(z @ c, _lead(x, z, u))
        if ell is not None:
            out = out + ell(x)
        return out

    return DriverSpec(psi, DriverConstants(L_x, float(np.linalg.norm(c)), 0.0, M_psi),
                      len(c), d2, name="linear_z")


def example2_closed_form(z):
    """``min_{|g| <= 1} (g^2 + z g)``: ``-z^2/4`` on ``[-2, 2]``, ``1 - |z|`` outside."""
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    return np.where(a <= 2.0, -0.25 * z * z, 1.0 - a)


def example2_driver(ellbar: Callable, L_x: float, M_psi: float, d2: int = 1) -> DriverSpec:
    """Closed-form Hamiltonian ``ellbar(x) + h(z)`` with ``Gamma = [-1, 1]``."""

    def psi(x, z, u):
        return np.broadcast_to(ellbar(x) + example2_closed_form(z[..., 0]), _lead(x, z, u))

    return DriverSpec(psi, DriverConstants(L_x, 1.0, 0.0, M_psi), 1, d2, name="example2")


# ---------------------------------------------------------------------------
# control structures


@dataclass(eq=False)
class ControlStructure:
    """Control data ``(Gamma, R1, R2, L)`` on a finite grid.

    The running cost is either separable, ``state_cost(x) + control_cost(g)``,
    or a general ``running_cost(x, g)`` with broadcasting contract
    ``x (..., n), g (..., k) -> (...)``.
    """

    gamma_grid: np.ndarray
    R1: Callable
    R2: Callable
    d1: int
    d2: int
    running_cost: Callable | None = None
    state_cost: Callable | None = None
    control_cost: Callable | None = None
    bound: float = float("inf")
    r1_grid: np.ndarray = field(init=False, repr=False)
    r2_grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.gamma_grid, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        if g.shape[0] == 0:
            raise ValueError("gamma_grid must be nonempty")
        self.gamma_grid = g
        self.r1_grid = np.asarray(self.R1(g), dtype=float).reshape(len(g), self.d1)
        self.r2_grid = np.asarray(self.R2(g), dtype=float).reshape(len(g), self.d2)
        if self.running_cost is None and self.state_cost is None:
            raise ValueError("a running cost is required")

    @property
    def lz(self) -> float:
        return float(np.max(np.linalg.norm(self.r1_grid, axis=1)))

    @property
    def lu(self) -> float:
        return float(np.max(np.linalg.norm(self.r2_grid, axis=1)))

    def cost(self, x, gamma):
        """``L(x, gamma)`` for matching leading shapes."""
        gamma = np.asarray(gamma, dtype=float)
        if self.running_cost is not None:
            return np.asarray(self.running_cost(x, gamma), dtype=float)
        return self.state_cost(x) + self.control_cost(gamma)

    def cost_on_grid(self, x):
        """``L(x, g_j)`` for every grid point, shape ``(..., n_grid)``."""
        x = np.asarray(x, dtype=float)
        if self.running_cost is not None:
            return np.asarray(self.running_cost(x[..., None, :], self.gamma_grid), dtype=float)
        return np.asarray(self.state_cost(x), dtype=float)[..., None] + self.control_cost(self.gamma_grid)

    def check_bounds(self, xs) -> dict:
        lvals = np.abs(self.cost_on_grid(xs))
        return {
            "R1": self.lz, "R2": self.lu, "L": float(np.max(lvals)),
            "passed": bool(max(self.lz, self.lu, float(np.max(lvals))) <= self.bound),
        }


def _grid_objective(cs: ControlStructure, x, z, u):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    return cs.cost_on_grid(x) + z @ cs.r1_grid.T + u @ cs.r2_grid.T


def hamiltonian_from_control(cs: ControlStructure, x, z, u):
    """``min_g { L(x, g) + z.R1(g) + u.R2(g) }`` over the grid."""
    return np.min(_grid_objective(cs, x, z, u), axis=-1)


def epsilon_argmin_selection(cs: ControlStructure, x, z, u, return_index: bool = False):
    """Grid minimiser of the Hamiltonian objective; ties go to the smallest index."""
    idx = np.argmin(_grid_objective(cs, x, z, u), axis=-1)
    g = cs.gamma_grid[idx]
    return (g, idx) if return_index else g


def control_driver(cs: ControlStructure, L_x: float, M_psi: float | None = None) -> DriverSpec:
    """Driver induced by control data (pointwise infimum of affine maps)."""

    def psi(x, z, u):
        return hamiltonian_from_control(cs, x, z, u)

    if M_psi is None:
        M_psi = cs.bound
    return DriverSpec(psi, DriverConstants(L_x, cs.lz, cs.lu, M_psi), cs.d1, cs.d2,
                      name="control", control=cs)


def example2_control_structure(ellbar: Callable, n_grid: int = 2001, d2: int = 1,
                               bound: float | None = None) -> ControlStructure:
    """``Gamma = [-1, 1]``, ``R1 = g``, ``R2 = 0``, ``L = ellbar(x) + g^2``."""
    grid = np.linspace(-1.0, 1.0, n_grid)
    return ControlStructure(
        grid, R1=lambda g: g[..., :1], R2=lambda g: np.zeros(g.shape[:-1] + (d2,)),
        d1=1, d2=d2, state_cost=ellbar, control_cost=lambda g: g[..., 0] ** 2,
        bound=bound if bound is not None else float("inf"),
    )


# ---------------------------------------------------------------------------
# conjugate


@dataclass(frozen=True)
class ConjugateSearch:
    radius0: float = 1.0
    max_doublings: int = 48
    tol: float = 1e-10
    grid_points: int = 2001
    grid_points_2d: int = 201
    starts: int = 8
    seed: int = 0


@dataclass(frozen=True)
class ConjugateResult:
    value: float
    status: str  # "finite", "minus_infinity", "inconclusive"
    argmin: np.ndarray | None = None
    radius: float = 0.0

    @property
    def finite(self) -> bool:
        return self.status == "finite"


def _box_min(obj, dim, radius, cfg, rng):
    """Minimise a convex function of ``dim`` variables on ``[-R, R]^dim``."""
    if dim == 1:
        t = np.linspace(-radius, radius, cfg.grid_points)
        v = obj(t[:, None])
        k = int(np.argmin(v))
        lo = t[max(k - 1, 0)]
        hi = t[min(k + 1, len(t) - 1)]
        res = scipy.optimize.minimize_scalar(
            lambda s: float(obj(np.array([[s]]))[0]), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-13 * max(1.0, radius)},
        )
        if res.fun < v[k]:
            return float(res.fun), np.array([res.x])
        return float(v[k]), np.array([t[k]])
    if dim == 2:
        t = np.linspace(-radius, radius, cfg.grid_points_2d)
        pts = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
        v = obj(pts)
        k = int(np.argmin(v))
        best_v, best_x = float(v[k]), pts[k]
    else:
        best_v, best_x = float(obj(np.zeros((1, dim)))[0]), np.zeros(dim)
    starts = [best_x] + [rng.uniform(-radius, radius, dim) for _ in range(cfg.starts)]
    for s in starts:
        res = scipy.optimize.minimize(
            lambda w: float(obj(w[None, :])[0]), s, method="Powell",
            bounds=[(-radius, radius)] * dim, options={"xtol": 1e-10, "ftol": 1e-14},
        )
        if res.fun < best_v:
            best_v, best_x = float(res.fun), np.asarray(res.x)
    return best_v, best_x


def conjugate(driver: DriverSpec, x, p, q, search: ConjugateSearch | None = None) -> ConjugateResult:
    """``inf_{z,u} { -z.p - u.q - psi(x, z, u) }`` over an expanding box.

    The infimum is declared ``-inf`` when the running minimum drops by more
    than ``1e3 (L_z + L_u)`` across two box doublings, finite when it
    changes by at most ``tol`` over two doublings.
    """
    cfg = search or ConjugateSearch()
    x = np.asarray(x, dtype=float)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    c = driver.constants
    use_z = c.L_z > 0
    use_u = c.L_u > 0
    # a coordinate block the driver ignores makes the objective affine there
    if (not use_z and np.any(p != 0)) or (not use_u and np.any(q != 0)):
        return ConjugateResult(-np.inf, "minus_infinity")
    d1, d2 = driver.d1, driver.d2
    dim = d1 * use_z + d2 * use_u
    z0 = np.zeros(d1)
    u0 = np.zeros(d2)

    def split(w):
        z = w[:, :d1] if use_z else np.broadcast_to(z0, (len(w), d1))
        u = w[:, d1 * use_z:] if use_u else np.broadcast_to(u0, (len(w), d2))
        return z, u

    def obj(w):
        z, u = split(w)
        xs = np.broadcast_to(x, (len(w),) + x.shape)
        return -(z @ p) - (u @ q) - driver.psi(xs, z, u)

    if dim == 0:
        val = float(obj(np.zeros((1, 0)))[0])
        return ConjugateResult(val, "finite", np.zeros(0), 0.0)

    rng = np.random.default_rng(cfg.seed)
    floor = 1e3 * (c.L_z + c.L_u)
    history = []
    best_v, best_w = np.inf, None
    radius = cfg.radius0
    for _ in range(cfg.max_doublings):
        v, w = _box_min(obj, dim, radius, cfg, rng)
        if v < best_v:
            best_v, best_w = v, w
        history.append(best_v)
        if len(history) >= 3:
            drop = history[-3] - history[-1]
            if drop > floor:
                return ConjugateResult(-np.inf, "minus_infinity", None, radius)
            if drop <= cfg.tol:
                return ConjugateResult(best_v, "finite", best_w, radius)
        radius *= 2.0
    return ConjugateResult(float("nan"), "inconclusive", best_w, radius)


@dataclass
class ConjugateTable:
    x: np.ndarray
    p_nodes: np.ndarray  # (N, d1)
    q_nodes: np.ndarray  # (N, d2)
    values: np.ndarray  # nan where absent
    domain_mask: np.ndarray
    h_p: float
    h_q: float
    inconclusive: int = 0
    box: tuple = (0.0, 0.0)

    def to_csv(self, path) -> None:
        d1 = self.p_nodes.shape[1]
        d2 = self.q_nodes.shape[1]
        pcols = ["p"] if d1 == 1 else [f"p{i + 1}" for i in range(d1)]
        qcols = ["q"] if d2 == 1 else [f"q{i + 1}" for i in range(d2)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(pcols + qcols + ["value", "in_domain"])
            for pn, qn, v, m in zip(self.p_nodes, self.q_nodes, self.values, self.domain_mask):
                w.writerow([repr(float(a)) for a in pn] + [repr(float(a)) for a in qn]
                           + [repr(float(v)) if m else "", int(m)])


def _axis_grid(radius, d, points):
    if radius == 0 or d == 0:
        return np.zeros((1, d)), 0.0
    t = np.linspace(-radius, radius, points)
    h = t[1] - t[0]
    return np.array(list(itertools.product(t, repeat=d))), h


def build_conjugate_table(driver: DriverSpec, x, points: int = 201,
                          search: ConjugateSearch | None = None) -> ConjugateTable:
    """Tabulate ``psi*`` on a uniform grid of the ``L_z``/``L_u`` box."""
    c = driver.constants
    pg, hp = _axis_grid(c.L_z, driver.d1, points)
    qg, hq = _axis_grid(c.L_u, driver.d2, points)
    if len(pg) * len(qg) > 250_000:
        raise ValueError("conjugate grid too large; reduce points or dimensions")
    pn = np.repeat(pg, len(qg), axis=0)
    qn = np.tile(qg, (len(pg), 1))
    vals = np.full(len(pn), np.nan)
    inconclusive = 0
    for i in range(len(pn)):
        r = conjugate(driver, x, pn[i], qn[i], search)
        if r.status == "finite":
            vals[i] = r.value
        elif r.status == "inconclusive":
            inconclusive += 1
    mask = np.isfinite(vals)
    return ConjugateTable(np.asarray(x, dtype=float), pn, qn, vals, mask, hp, hq,
                          inconclusive, (c.L_z, c.L_u))


def biconjugate(driver: DriverSpec, table: ConjugateTable, x, z, u):
    """``min`` over masked nodes of ``-z.p - u.q - psi*(p, q)``; vectorised in ``z, u``."""
    if not np.any(table.domain_mask):
        raise ValueError("conjugate table has an empty domain mask")
    p = table.p_nodes[table.domain_mask]
    q = table.q_nodes[table.domain_mask]
    v = table.values[table.domain_mask]
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.min(-(z @ p.T) - (u @ q.T) - v, axis=-1)


def grid_tolerance(table: ConjugateTable, z, u):
    """Discretisation allowance for :func:`biconjugate` at ``(z, u)``."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.where(table.domain_mask, table.values, np.nan)
    jumps = np.abs(np.diff(v))
    jump = float(np.nanmax(jumps)) if np.any(np.isfinite(jumps)) else 0.0
    return 0.5 * (np.linalg.norm(z, axis=-1) * table.h_p + np.linalg.norm(u, axis=-1) * table.h_q) + 0.5 * jump + 1e-12


# ---------------------------------------------------------------------------
# validation


@dataclass
class DriverReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.checks.values())


def validate_driver(driver: DriverSpec, n_modes: int, sample_count: int = 500, rng_seed: int = 0,
                    scale: float = 2.0, slack: float = 1.05, zu_scale: float = 3.0) -> DriverReport:
    rng = np.random.default_rng(rng_seed)
    c = driver.constants
    d1, d2 = driver.d1, driver.d2
    x = scale * rng.standard_normal((sample_count, n_modes))
    xp = x + scale * rng.standard_normal((sample_count, n_modes)) * rng.choice([1.0, 1e-3], (sample_count, 1))
    z = zu_scale * rng.standard_normal((sample_count, d1))
    zp = zu_scale * rng.standard_normal((sample_count, d1))
    u = zu_scale * rng.standard_normal((sample_count, d2))
    up = zu_scale * rng.standard_normal((sample_count, d2))
    out = {}
    psi0 = np.abs(driver.psi(x, np.zeros_like(z), np.zeros_like(u)))
    out["bounded_psi0"] = dict(observed=float(psi0.max()), bound=c.M_psi,
                               passed=bool(psi0.max() <= c.M_psi * slack + 1e-12))

    def ratio(num, den):
        ok = den > 1e-14
        return float(np.max(np.where(ok, num / np.where(ok, den, 1.0), 0.0)))

    rx = ratio(np.abs(driver.psi(x, z, u) - driver.psi(xp, z, u)), np.linalg.norm(x - xp, axis=1))
    rz = ratio(np.abs(driver.psi(x, z, u) - driver.psi(x, zp, u)), np.linalg.norm(z - zp, axis=1))
    ru = ratio(np.abs(driver.psi(x, z, u) - driver.psi(x, z, up)), np.linalg.norm(u - up, axis=1))
    for key, r, bound in (("lipschitz_x", rx, c.L_x), ("lipschitz_z", rz, c.L_z), ("lipschitz_u", ru, c.L_u)):
        out[key] = dict(observed=r, bound=bound, passed=bool(r <= bound * slack + 1e-10))
    mid = driver.psi(x, 0.5 * (z + zp), 0.5 * (u + up))
    avg = 0.5 * (driver.psi(x, z, u) + driver.psi(x, zp, up))
    gap = float(np.max(avg - mid))
    out["midpoint_concavity"] = dict(observed=gap, bound=1e-10,
                                     passed=bool(gap <= 1e-10) or not driver.concave_in_zu)
    return DriverReport(out)
