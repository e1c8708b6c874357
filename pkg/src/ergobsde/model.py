"""Galerkin-truncated coefficients of the forward evolution equation.

A :class:`GalerkinModel` carries the finite-mode representation of

    dX = (A X + F(X)) dt + Q G(X) dW1 + D dW2

together with the constants that the stability and solvability theory
asks for.  All maps are vectorised over a leading batch axis: states have
shape ``(..., n_modes)``.

Two SPDE builders are provided (boundary-controlled heat equation and a
heat equation with a reaction term driven by a scalar process) plus the
1D/ND Ornstein-Uhlenbeck benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = [
    "AssumptionViolation",
    "ModelConstants",
    "GalerkinModel",
    "CheckResult",
    "ValidationReport",
    "DissipativityCertificate",
    "semigroup_apply",
    "eval_coefficients",
    "validate_standing_assumptions",
    "joint_dissipativity_certificate",
    "fit_semigroup_decay",
    "build_boundary_control_model",
    "build_reaction_model",
    "build_ou_model",
    "boundary_lift_coefficients",
    "field_average",
]

SLACK = 1.05
DEFAULT_S_GRID = tuple(np.logspace(-4, 1, 61))


class AssumptionViolation(ValueError):
    """A standing assumption on the coefficients fails at a concrete state."""


@dataclass(frozen=True)
class ModelConstants:
    L_F: float
    L_G: float
    M_G: float
    M_Ginv: float
    gamma_exponent: float = 0.0
    semigroup_decay_L: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma_exponent < 0.5:
            raise ValueError("gamma_exponent must lie in [0, 1/2)")


@dataclass(frozen=True, eq=False)
class GalerkinModel:
    """Finite-mode forward model.

    ``g_map`` and ``g_inv_map`` take states of shape ``(..., n_modes)`` and
    return ``(..., d1, d1)`` arrays.  ``drift_f`` maps ``(..., n)`` to
    ``(..., n)``.  ``structure`` holds builder metadata (e.g. the scalar
    constants used by the matrix dissipativity certificate, quadrature
    data for field averages).
    """

    a_matrix: np.ndarray
    drift_f: Callable[[np.ndarray], np.ndarray]
    q_matrix: np.ndarray
    g_map: Callable[[np.ndarray], np.ndarray]
    g_inv_map: Callable[[np.ndarray], np.ndarray]
    d_matrix: np.ndarray
    constants: ModelConstants
    a_diagonal: bool = False
    name: str = "model"
    structure: dict = field(default_factory=dict)
    s_grid: tuple = DEFAULT_S_GRID
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n) or n < 1:
            raise ValueError("a_matrix must be square")
        q = np.asarray(self.q_matrix, dtype=float)
        d = np.asarray(self.d_matrix, dtype=float)
        if q.ndim != 2 or q.shape[0] != n or q.shape[1] < 1:
            raise ValueError("q_matrix must be n_modes x d1")
        if d.ndim != 2 or d.shape[0] != n or d.shape[1] < 1:
            raise ValueError("d_matrix must be n_modes x d2")
        if not np.all(np.isfinite(q)):
            raise ValueError("q_matrix must have finite Frobenius norm")
        if self.a_diagonal and np.any(a != np.diag(np.diag(a))):
            raise ValueError("a_diagonal set but a_matrix has off-diagonal entries")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "q_matrix", q)
        object.__setattr__(self, "d_matrix", d)

    @property
    def n_modes(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def d1(self) -> int:
        return self.q_matrix.shape[1]

    @property
    def d2(self) -> int:
        return self.d_matrix.shape[1]

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_modes:
            raise ValueError(
                f"state has {x.shape[-1]} coordinates, model expects {self.n_modes}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("state contains non-finite entries")
        return x

    def expm(self, t: float) -> np.ndarray:
        """Dense ``e^{tA}`` (cached per t)."""
        key = ("expm", float(t))
        if key not in self._cache:
            if self.a_diagonal:
                m = np.diag(np.exp(t * np.diag(self.a_matrix)))
            else:
                m = scipy.linalg.expm(t * self.a_matrix)
            self._cache[key] = m
        return self._cache[key]


def semigroup_apply(model: GalerkinModel, t: float, x) -> np.ndarray:
    """Return ``e^{tA} x`` for a state or a batch of states."""
    if t < 0:
        raise ValueError("t must be non-negative")
    x = model.check_state(x)
    if t == 0:
        return x.copy()
    if model.a_diagonal:
        return x * np.exp(t * np.diag(model.a_matrix))
    return x @ model.expm(t).T


def eval_coefficients(model: GalerkinModel, x, tol: float = 1e-10):
    """Evaluate ``(F(x), Q G(x), G^{-1}(x))``.

    Raises :class:`AssumptionViolation` when ``G^{-1}(x) G(x)`` differs from
    the identity by more than ``tol`` in operator norm.
    """
    x = model.check_state(x)
    g = np.asarray(model.g_map(x), dtype=float)
    g_inv = np.asarray(model.g_inv_map(x), dtype=float)
    eye = np.eye(model.d1)
    err = np.linalg.norm(g_inv @ g - eye, ord=2, axis=(-2, -1))
    if np.any(~np.isfinite(err)) or np.max(err) > tol:
        raise AssumptionViolation(
            f"G(x) not invertible to tolerance {tol:g} (residual {np.max(err):.3g})"
        )
    qg = model.q_matrix @ g
    return np.asarray(model.drift_f(x), dtype=float), qg, g_inv


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    bound: float
    witness: object = None

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.observed = float(self.observed)
        self.bound = float(self.bound)


@dataclass
class ValidationReport:
    model_name: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "model": self.model_name,
            "passed": self.passed,
            "checks": [
                {
                    "name": c.name,
                    "passed": bool(c.passed),
                    "observed": float(c.observed),
                    "bound": float(c.bound),
                }
                for c in self.checks
            ],
        }


def _sample_pairs(model, sample_count, rng, scale):
    n = model.n_modes
    x = scale * rng.standard_normal((sample_count, n))
    far = scale * rng.standard_normal((sample_count, n))
    near = x + 1e-3 * scale * rng.standard_normal((sample_count, n))
    # coordinate-aligned perturbations expose anisotropic constants
    idx = rng.integers(0, n, size=sample_count)
    axis = x.copy()
    axis[np.arange(sample_count), idx] += 1e-2 * scale * rng.choice([-1.0, 1.0], sample_count)
    xs = np.concatenate([x, x, x])
    xps = np.concatenate([far, near, axis])
    return xs, xps


def _worst_ratio(num, den, xs, xps):
    ok = den > 0
    ratios = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    k = int(np.argmax(ratios))
    return float(ratios[k]), (xs[k], xps[k])


def _opnorm(m):
    return np.linalg.norm(m, ord=2, axis=(-2, -1))


def decay_profile(model: GalerkinModel, s_grid=None) -> tuple:
    """Frobenius norms of ``e^{sA} D`` over an s-grid."""
    s_grid = np.asarray(model.s_grid if s_grid is None else s_grid, dtype=float)
    norms = np.array([np.linalg.norm(model.expm(s) @ model.d_matrix) for s in s_grid])
    return s_grid, norms


def fit_semigroup_decay(model: GalerkinModel, gamma: float, s_grid=None) -> float:
    """Smallest L with ``|e^{sA}D|_F <= L (s^-gamma ^ 1)`` on the grid."""
    s, norms = decay_profile(model, s_grid)
    envelope = np.minimum(s ** (-gamma), 1.0)
    return float(np.max(norms / envelope))


def validate_standing_assumptions(
    model: GalerkinModel, sample_count: int = 200, rng_seed: int = 0, scale: float = 2.0,
    slack: float = SLACK,
) -> ValidationReport:
    """Falsification checks of the Lipschitz/boundedness/decay constants.

    Each check compares an empirical worst case against the declared
    constant times ``slack``; failures become report entries.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    c = model.constants
    rng = np.random.default_rng(rng_seed)
    xs, xps = _sample_pairs(model, sample_count, rng, scale)
    dx = np.linalg.norm(xs - xps, axis=-1)
    checks = []

    fx, fxp = model.drift_f(xs), model.drift_f(xps)
    r, w = _worst_ratio(np.linalg.norm(fx - fxp, axis=-1), dx, xs, xps)
    checks.append(CheckResult("lipschitz_F", r <= c.L_F * slack, r, c.L_F, w))

    g, gp = model.g_map(xs), model.g_map(xps)
    gi, gip = model.g_inv_map(xs), model.g_inv_map(xps)
    r, w = _worst_ratio(_opnorm(g - gp), dx, xs, xps)
    checks.append(CheckResult("lipschitz_G", r <= c.L_G * slack, r, c.L_G, w))
    bound_ginv = c.M_Ginv ** 2 * c.L_G
    r, w = _worst_ratio(_opnorm(gi - gip), dx, xs, xps)
    checks.append(CheckResult("lipschitz_Ginv", r <= bound_ginv * slack, r, bound_ginv, w))

    all_x = np.concatenate([xs, xps])
    gn = _opnorm(np.concatenate([g, gp]))
    k = int(np.argmax(gn))
    checks.append(CheckResult("bound_G", gn[k] <= c.M_G * slack, gn[k], c.M_G, all_x[k]))
    gin = _opnorm(np.concatenate([gi, gip]))
    k = int(np.argmax(gin))
    checks.append(
        CheckResult("bound_Ginv", gin[k] <= c.M_Ginv * slack, gin[k], c.M_Ginv, all_x[k])
    )
    inv_err = _opnorm(np.concatenate([gi @ g, gip @ gp]) - np.eye(model.d1))
    k = int(np.argmax(inv_err))
    checks.append(CheckResult("inverse_G", inv_err[k] <= 1e-10, inv_err[k], 1e-10, all_x[k]))

    qf = float(np.linalg.norm(model.q_matrix))
    checks.append(CheckResult("hilbert_schmidt_Q", np.isfinite(qf), qf, np.inf))

    s, norms = decay_profile(model)
    envelope = c.semigroup_decay_L * np.minimum(s ** (-c.gamma_exponent), 1.0)
    ratio = norms / envelope
    k = int(np.argmax(ratio))
    checks.append(
        CheckResult("semigroup_decay_D", ratio[k] <= slack, norms[k], envelope[k], float(s[k]))
    )
    return ValidationReport(model.name, checks)


@dataclass
class DissipativityCertificate:
    mu_bar: float
    method: str
    success: bool
    witness: object = None


def _matrix_certificate(params: dict) -> DissipativityCertificate:
    m = np.array(
        [
            [-params["mu_delta"] - params["mu_f"], 0.5 * params["L_f"]],
            [0.5 * params["L_f"], -params["mu_b"] + 0.5 * params["L_sigma"]],
        ]
    )
    eig = np.linalg.eigvalsh(m)
    lam_max = float(eig[-1])
    ok = lam_max < 0
    return DissipativityCertificate(
        mu_bar=-lam_max if ok else float("nan"),
        method="matrix_inequality",
        success=ok,
        witness={"matrix": m.tolist(), "eigenvalues": eig.tolist()},
    )


def _sampled_certificate(model, sample_count, rng_seed, scale) -> DissipativityCertificate:
    rng = np.random.default_rng(rng_seed)
    n = model.n_modes
    x = scale * rng.standard_normal((sample_count, n))
    xp_far = scale * rng.standard_normal((sample_count, n))
    # axis-aligned differences locate the weakest direction
    eps = 1e-2 * scale
    xs = [x]
    xps = [xp_far]
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        xs.append(x)
        xps.append(x + e)
    xs = np.concatenate(xs)
    xps = np.concatenate(xps)
    diff = xs - xps
    a_term = diff @ model.a_matrix.T
    f_term = model.drift_f(xs) - model.drift_f(xps)
    lhs = 2.0 * np.sum((a_term + f_term) * diff, axis=-1)
    qg_diff = model.q_matrix @ (model.g_map(xs) - model.g_map(xps))
    lhs = lhs + np.sum(qg_diff ** 2, axis=(-2, -1))
    rates = -lhs / np.sum(diff ** 2, axis=-1)
    k = int(np.argmin(rates))
    mu = float(rates[k])
    return DissipativityCertificate(
        mu_bar=mu, method="sampled_inequality", success=mu > 0,
        witness={"x": xs[k].tolist(), "x_prime": xps[k].tolist(), "rate": mu},
    )


def joint_dissipativity_certificate(
    model: GalerkinModel, method: str = "auto", sample_count: int = 500,
    rng_seed: int = 0, scale: float = 2.0,
) -> DissipativityCertificate:
    """Certify the joint dissipativity rate.

    ``matrix_inequality`` is available only for models built with the
    reaction-heat block structure; ``auto`` picks it when present.
    """
    params = model.structure.get("reaction_block")
    if method == "auto":
        method = "matrix_inequality" if params is not None else "sampled_inequality"
    if method == "matrix_inequality":
        if params is None:
            raise ValueError("matrix certificate needs the reaction-heat block structure")
        return _matrix_certificate(params)
    if method == "sampled_inequality":
        return _sampled_certificate(model, sample_count, rng_seed, scale)
    raise ValueError(f"unknown certificate method {method!r}")


def matrix_certificate_from_constants(mu_delta, mu_f, L_f, mu_b, L_sigma) -> DissipativityCertificate:
    return _matrix_certificate(
        dict(mu_delta=mu_delta, mu_f=mu_f, L_f=L_f, mu_b=mu_b, L_sigma=L_sigma)
    )


# ---------------------------------------------------------------------------
# builders


def _scalar_g(sigma):
    def g(x):
        return np.asarray(sigma(x[..., -1]), dtype=float)[..., None, None]

    def g_inv(x):
        return 1.0 / np.asarray(sigma(x[..., -1]), dtype=float)[..., None, None]

    return g, g_inv


def _check_sigma_floor(sigma, delta, probe=np.linspace(-50.0, 50.0, 2001)):
    if delta <= 0:
        raise AssumptionViolation("sigma must be bounded away from zero (delta > 0)")
    vals = np.abs(np.asarray(sigma(probe), dtype=float))
    if np.min(vals) < delta * (1 - 1e-12):
        raise AssumptionViolation(
            f"|sigma| drops to {np.min(vals):.3g} below declared delta {delta:g}"
        )


def _gauss_legendre(n_q, a, b):
    nodes, weights = np.polynomial.legendre.leggauss(n_q)
    return 0.5 * (b - a) * nodes + 0.5 * (b + a), 0.5 * (b - a) * weights


def boundary_lift_coefficients(n_modes: int) -> np.ndarray:
    """Sine coefficients of ``r(xi) = 1 - xi/pi`` on (0, pi).

    With the orthonormal basis ``sqrt(2/pi) sin(k xi)`` the integral
    ``int_0^pi (1 - xi/pi) sin(k xi) dxi`` equals ``1/k``.
    """
    k = np.arange(1, n_modes + 1, dtype=float)
    return np.sqrt(2.0 / np.pi) / k


def build_boundary_control_model(
    n_modes: int, d_profile, b, sigma, rho=None, *, L_b: float, L_sigma: float,
    delta: float, sigma_max: float, gamma_exponent: float = 0.25, quad_points: int | None = None,
) -> GalerkinModel:
    """Heat equation on (0, pi) with Dirichlet boundary value ``y`` at 0.

    State ``(c_1..c_n, y)``: sine coefficients of the heat field followed by
    the scalar boundary process.  The linear part couples the heat modes to
    ``y`` through the lift ``r``; ``D`` multiplies white noise by
    ``d_profile`` on the heat coordinates only.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    _check_sigma_floor(sigma, delta)
    n = n_modes
    k = np.arange(1, n + 1, dtype=float)
    lift = boundary_lift_coefficients(n)
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = np.diag(-(k ** 2))
    a[:n, n] = k ** 2 * lift
    nq = quad_points or max(64, 8 * n)
    xi, w = _gauss_legendre(nq, 0.0, np.pi)
    phi = np.sqrt(2.0 / np.pi) * np.sin(np.outer(xi, k))  # (nq, n)
    dvals = np.asarray(d_profile(xi), dtype=float) * np.ones_like(xi)
    d_heat = phi.T @ (dvals[:, None] * w[:, None] * phi)
    d = np.zeros((n + 1, n))
    d[:n] = d_heat
    q = np.zeros((n + 1, 1))
    q[n, 0] = 1.0

    def drift(x):
        out = np.zeros_like(x)
        out[..., -1] = b(x[..., -1])
        return out

    g, g_inv = _scalar_g(sigma)
    consts = ModelConstants(
        L_F=max(L_b, 1e-12), L_G=max(L_sigma, 1e-12), M_G=sigma_max, M_Ginv=1.0 / delta,
        gamma_exponent=gamma_exponent,
    )
    model = GalerkinModel(
        a, drift, q, g, g_inv, d, consts, a_diagonal=False, name="boundary_control",
        structure={
            "n_heat": n,
            "domain": (0.0, np.pi),
            "quad": (xi, w, phi),
            "rho": rho,
            "lift": lift,
        },
    )
    fitted = fit_semigroup_decay(model, gamma_exponent)
    model = _with_constants(model, semigroup_decay_L=fitted)
    model.structure["fitted_decay_L"] = fitted
    return model


def _with_constants(model: GalerkinModel, **updates) -> GalerkinModel:
    c = model.constants
    new_c = ModelConstants(**{**c.__dict__, **updates})
    return GalerkinModel(
        model.a_matrix, model.drift_f, model.q_matrix, model.g_map, model.g_inv_map,
        model.d_matrix, new_c, a_diagonal=model.a_diagonal, name=model.name,
        structure=model.structure, s_grid=model.s_grid,
    )


def build_reaction_model(
    n_modes: int, f, b, sigma, d_profile, *, L_f: float, mu_f: float, L_b: float,
    mu_b: float, L_sigma: float, delta: float, sigma_max: float,
    gamma_exponent: float = 0.25, quad_points: int | None = None,
) -> GalerkinModel:
    """Dirichlet heat equation on (0, 1) with reaction ``f(x, y)``.

    ``f`` is evaluated pointwise on the field and projected on the sine
    modes ``sqrt(2) sin(k pi xi)`` with Gauss-Legendre quadrature.  The
    declared ``mu_f``, ``mu_b``, ``L_f``, ``L_sigma`` feed the 2x2 matrix
    dissipativity certificate.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    _check_sigma_floor(sigma, delta)
    n = n_modes
    k = np.arange(1, n + 1, dtype=float)
    eig = -((k * np.pi) ** 2)
    a = np.diag(np.concatenate([eig, [0.0]]))
    nq = quad_points or max(32, 4 * n)
    xi, w = _gauss_legendre(nq, 0.0, 1.0)
    phi = np.sqrt(2.0) * np.sin(np.pi * np.outer(xi, k))  # (nq, n)
    phi_w = phi * w[:, None]
    dvals = np.asarray(d_profile(xi), dtype=float) * np.ones_like(xi)
    d = np.zeros((n + 1, n))
    d[:n] = phi.T @ (dvals[:, None] * phi_w)
    q = np.zeros((n + 1, 1))
    q[n, 0] = 1.0

    def drift(x):
        c = x[..., :n]
        y = x[..., n]
        field_vals = c @ phi.T  # (..., nq)
        fv = np.asarray(f(field_vals, y[..., None]), dtype=float) * np.ones_like(field_vals)
        out = np.empty_like(x)
        out[..., :n] = fv @ phi_w
        out[..., n] = b(y)
        return out

    g, g_inv = _scalar_g(sigma)
    consts = ModelConstants(
        L_F=np.sqrt(2.0) * L_f + L_b, L_G=max(L_sigma, 1e-12), M_G=sigma_max,
        M_Ginv=1.0 / delta, gamma_exponent=gamma_exponent,
    )
    model = GalerkinModel(
        a, drift, q, g, g_inv, d, consts, a_diagonal=True, name="reaction",
        structure={
            "n_heat": n,
            "domain": (0.0, 1.0),
            "quad": (xi, w, phi),
            "reaction_block": dict(
                mu_delta=float(np.pi ** 2), mu_f=mu_f, L_f=L_f, mu_b=mu_b, L_sigma=L_sigma
            ),
        },
    )
    fitted = fit_semigroup_decay(model, gamma_exponent)
    model = _with_constants(model, semigroup_decay_L=fitted)
    model.structure["fitted_decay_L"] = fitted
    return model


def build_ou_model(a: float = 1.0, sigma: float = 1.0, dim: int = 1) -> GalerkinModel:
    """``dX = -a X dt + sigma dW1`` in ``dim`` dimensions (no W2 noise)."""
    a_mat = -a * np.eye(dim)
    q = np.eye(dim)

    def g(x):
        return np.broadcast_to(sigma * np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    def g_inv(x):
        return np.broadcast_to(np.eye(dim) / sigma, x.shape[:-1] + (dim, dim)).copy()

    consts = ModelConstants(L_F=1e-12, L_G=1e-12, M_G=abs(sigma), M_Ginv=1.0 / abs(sigma))
    return GalerkinModel(
        a_mat, np.zeros_like, q, g, g_inv, np.zeros((dim, 1)), consts,
        a_diagonal=True, name="ou", structure={"ou": dict(a=a, sigma=sigma)},
    )


def field_average(model: GalerkinModel, ell) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised ``x -> int ell(field(xi), y) dxi`` for the SPDE builders."""
    xi, w, phi = model.structure["quad"]
    n = model.structure["n_heat"]

    def avg(x):
        x = np.asarray(x, dtype=float)
        vals = x[..., :n] @ phi.T
        y = x[..., n][..., None]
        return np.asarray(ell(vals, y), dtype=float) * np.ones_like(vals) @ w

    return avg
