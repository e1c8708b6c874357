"""Path simulation of the (optionally drift-augmented) forward equation.

Time stepping is exponential Euler by default::

    X <- e^{dt A} X + dt phi1(dt A) (F(X) + extra) + N (Q G(X) dW1 + D dW2)

where ``N = e^{dt A}`` (left point) or, for diagonal ``A`` with
``noise_correction``, the per-mode factor that reproduces the exact
variance of the stochastic convolution over one step.  ``euler_maruyama``
uses ``I + dt A``, ``dt I`` and ``I``.

Noise increments are drawn block by block from a generator seeded with
``(seed, block_index)``; a block holds ``BLOCK_STEPS`` steps for every
path, path-major, so path ``i`` sees the same increments whatever the
number of paths or the horizon.  :class:`PathStream` uses this to replay
any block exactly from a stored checkpoint, which lets long backward
sweeps run in memory proportional to one block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .model import GalerkinModel

__all__ = [
    "BLOCK_STEPS",
    "SimulationBlowUp",
    "SimConfig",
    "PathBundle",
    "DriftAugmentation",
    "DecayFit",
    "MomentSeries",
    "PathStream",
    "Stepper",
    "simulate",
    "estimate_contraction",
    "estimate_moment_bound",
    "write_path_bundle",
    "read_path_bundle",
]

BLOCK_STEPS = 128
SCHEMES = ("exponential_euler", "euler_maruyama")


class SimulationBlowUp(FloatingPointError):
    def __init__(self, step_index: int, time: float):
        super().__init__(f"non-finite state at step {step_index} (t={time:g})")
        self.step_index = step_index
        self.time = time


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    n_paths: int
    seed: int = 0
    scheme: str = "exponential_euler"
    noise_correction: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("dt and horizon must be positive")
        if self.dt >= self.horizon + 1e-15 and not np.isclose(self.dt, self.horizon):
            raise ValueError("dt must not exceed horizon")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    def with_(self, **kw) -> "SimConfig":
        return SimConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class PathBundle:
    """Full trajectories; ``states`` is ``(n_paths, m+1, n)``."""

    times: np.ndarray
    states: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray
    dt: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class DriftAugmentation:
    """Extra drift ``Q G(X) p(t, X) + D q(t, X)``."""

    p_process: Callable | None = None
    q_process: Callable | None = None
    enabled: bool = True

    def drift(self, model: GalerkinModel, t: float, x: np.ndarray):
        if not self.enabled:
            return None
        out = np.zeros_like(x)
        if self.p_process is not None:
            p = np.broadcast_to(np.asarray(self.p_process(t, x), dtype=float), x.shape[:-1] + (model.d1,))
            gp = np.einsum("...ij,...j->...i", model.g_map(x), p)
            out = out + gp @ model.q_matrix.T
        if self.q_process is not None:
            q = np.broadcast_to(np.asarray(self.q_process(t, x), dtype=float), x.shape[:-1] + (model.d2,))
            out = out + q @ model.d_matrix.T
        return out


NO_AUGMENTATION = DriftAugmentation(enabled=False)


def _phi1(z):
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    out[nz] = np.expm1(z[nz]) / z[nz]
    return out


class Stepper:
    """One-step map of a scheme for a fixed model and step size."""

    def __init__(self, model: GalerkinModel, dt: float, scheme: str = "exponential_euler",
                 noise_correction: bool = False):
        self.model = model
        self.dt = dt
        self.diagonal = model.a_diagonal
        a = model.a_matrix
        if scheme == "exponential_euler":
            if self.diagonal:
                lam = np.diag(a) * dt
                self.lin = np.exp(lam)
                self.drift_op = dt * _phi1(lam)
                if noise_correction:
                    self.noise_op = np.sqrt(_phi1(2 * lam))
                else:
                    self.noise_op = self.lin.copy()
            else:
                n = model.n_modes
                aug = np.zeros((2 * n, 2 * n))
                aug[:n, :n] = a * dt
                aug[:n, n:] = np.eye(n) * dt
                big = scipy.linalg.expm(aug)
                self.lin = big[:n, :n]
                self.drift_op = big[:n, n:]
                self.noise_op = self.lin.copy()
        elif scheme == "euler_maruyama":
            n = model.n_modes
            if self.diagonal:
                self.lin = 1.0 + dt * np.diag(a)
                self.drift_op = np.full(n, dt)
                self.noise_op = np.ones(n)
            else:
                self.lin = np.eye(n) + dt * a
                self.drift_op = dt * np.eye(n)
                self.noise_op = np.eye(n)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.d_noise = model.d_matrix.T  # (d2, n)
        self.q_t = model.q_matrix.T  # (d1, n)
        self.has_d = bool(np.any(model.d_matrix != 0))

    def _apply(self, op, v):
        return v * op if self.diagonal else v @ op.T

    def diffusion(self, x, dW1, dW2):
        g = self.model.g_map(x)
        if self.model.d1 == 1:
            gw = g[..., 0, 0:1] * dW1
        else:
            gw = np.einsum("...ij,...j->...i", g, dW1)
        out = gw @ self.q_t
        if self.has_d:
            out = out + dW2 @ self.d_noise
        return out

    def advance(self, x, dW1, dW2, extra=None):
        drift = self.model.drift_f(x)
        if extra is not None:
            drift = drift + extra
        return (
            self._apply(self.lin, x)
            + self._apply(self.drift_op, drift)
            + self._apply(self.noise_op, self.diffusion(x, dW1, dW2))
        )


def _block_noise(seed, block, n_paths, n_steps, d1, d2, dt):
    rng = np.random.default_rng([seed, block])
    w = rng.standard_normal((n_paths, n_steps, d1 + d2)) * np.sqrt(dt)
    w = np.ascontiguousarray(w.transpose(1, 0, 2))  # (steps, paths, d)
    return w[..., :d1], w[..., d1:]


def _initial_states(model, x0, n_paths):
    x0 = model.check_state(x0)
    if x0.ndim == 1:
        return np.broadcast_to(x0, (n_paths, model.n_modes)).copy()
    if x0.shape != (n_paths, model.n_modes):
        raise ValueError("per-path initial states must have shape (n_paths, n_modes)")
    return x0.copy()


class PathStream:
    """Forward simulation with block checkpoints.

    ``extra_drift(t, X)`` returns an additional drift (or ``None``).
    ``run`` performs the forward sweep, calling ``observer(i, t, X)`` at
    every grid time; ``block(b)`` replays block ``b`` bit-identically and
    returns ``(i0, states, dW1, dW2)`` with ``states`` of shape
    ``(L+1, n_paths, n)`` covering steps ``i0..i0+L``.
    """

    def __init__(self, model: GalerkinModel, x0, cfg: SimConfig,
                 extra_drift: Callable | None = None, block_steps: int = BLOCK_STEPS):
        self.model = model
        self.cfg = cfg
        self.m = cfg.n_steps
        self.dt = cfg.step
        self.times = np.arange(self.m + 1) * self.dt
        self.stepper = Stepper(model, self.dt, cfg.scheme, cfg.noise_correction)
        self.extra_drift = extra_drift
        self.block_steps = block_steps
        self.n_blocks = -(-self.m // block_steps)
        self.x0 = _initial_states(model, x0, cfg.n_paths)
        self.checkpoints: list | None = None

    def _block_range(self, b):
        i0 = b * self.block_steps
        return i0, min(self.block_steps, self.m - i0)

    def _run_block(self, b, x, keep, observer=None):
        i0, L = self._block_range(b)
        d1, d2 = self.model.d1, self.model.d2
        dW1, dW2 = _block_noise(self.cfg.seed, b, self.cfg.n_paths, L, d1, d2, self.dt)
        states = np.empty((L + 1,) + x.shape) if keep else None
        if keep:
            states[0] = x
        for j in range(L):
            i = i0 + j
            t = self.times[i]
            if observer is not None:
                observer(i, t, x)
            extra = self.extra_drift(t, x) if self.extra_drift is not None else None
            x = self.stepper.advance(x, dW1[j], dW2[j], extra)
            if keep:
                states[j + 1] = x
        if not np.all(np.isfinite(x)):
            bad = i0 + L
            if keep:
                ok = np.all(np.isfinite(states.reshape(L + 1, -1)), axis=1)
                bad = i0 + int(np.argmin(ok))
            raise SimulationBlowUp(bad, bad * self.dt)
        return x, states, dW1, dW2

    def run(self, observer: Callable | None = None):
        """Forward sweep storing one checkpoint per block; returns final states."""
        x = self.x0
        cps = []
        for b in range(self.n_blocks):
            cps.append(x)
            x, _, _, _ = self._run_block(b, x, keep=False, observer=observer)
        if observer is not None:
            observer(self.m, self.times[self.m], x)
        self.checkpoints = cps
        return x

    def block(self, b):
        if self.checkpoints is None:
            raise RuntimeError("run() must be called before replaying blocks")
        i0, _ = self._block_range(b)
        _, states, dW1, dW2 = self._run_block(b, self.checkpoints[b], keep=True)
        return i0, states, dW1, dW2


def simulate(model: GalerkinModel, x0, aug: DriftAugmentation | None, cfg: SimConfig) -> PathBundle:
    """Simulate ``cfg.n_paths`` trajectories and keep all of them."""
    aug = aug or NO_AUGMENTATION
    extra = None
    if aug.enabled:
        def extra(t, x):
            return aug.drift(model, t, x)
    stream = PathStream(model, x0, cfg, extra_drift=extra)
    x = stream.x0
    n = model.n_modes
    states = np.empty((stream.m + 1, cfg.n_paths, n))
    dW1 = np.empty((stream.m, cfg.n_paths, model.d1))
    dW2 = np.empty((stream.m, cfg.n_paths, model.d2))
    for b in range(stream.n_blocks):
        i0, L = stream._block_range(b)
        x, st, w1, w2 = stream._run_block(b, x, keep=True)
        states[i0:i0 + L + 1] = st
        dW1[i0:i0 + L] = w1
        dW2[i0:i0 + L] = w2
    return PathBundle(
        times=stream.times,
        states=states.transpose(1, 0, 2),
        dW1=dW1.transpose(1, 0, 2),
        dW2=dW2.transpose(1, 0, 2),
        dt=stream.dt,
        seed=cfg.seed,
    )


@dataclass
class DecayFit:
    mu_hat: float
    intercept: float
    r_squared: float
    times: np.ndarray
    per_time_means: np.ndarray
    per_time_sq_means: np.ndarray
    degenerate: bool = False
    window: tuple = (0.0, 0.0)


def _linear_fit(t, y):
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return coef[0], coef[1], min(max(r2, 0.0), 1.0)


def estimate_contraction(model: GalerkinModel, x0, x0p, cfg: SimConfig,
                         mu_guess: float = 1.0, floor: float = 1e-14) -> DecayFit:
    """Fit the exponential decay rate of ``E|X^x_t - X^x'_t|``.

    Both initial conditions are driven by identical noise.  The fit window
    starts after one relaxation time ``1/mu_guess``.
    """
    x0 = model.check_state(x0)
    x0p = model.check_state(x0p)
    pair = np.concatenate([
        _initial_states(model, x0, cfg.n_paths), _initial_states(model, x0p, cfg.n_paths)
    ])
    n = cfg.n_paths
    m = cfg.n_steps
    means = np.empty(m + 1)
    sq = np.empty(m + 1)

    # both halves of the batch share increments
    stream = PathStream(model, pair, cfg.with_(n_paths=2 * n))
    x = stream.x0
    for b in range(stream.n_blocks):
        i0, L = stream._block_range(b)
        w1, w2 = _block_noise(cfg.seed, b, n, L, model.d1, model.d2, stream.dt)
        w1 = np.concatenate([w1, w1], axis=1)
        w2 = np.concatenate([w2, w2], axis=1)
        for j in range(L):
            diff = np.linalg.norm(x[:n] - x[n:], axis=-1)
            means[i0 + j] = diff.mean()
            sq[i0 + j] = np.mean(diff ** 2)
            x = stream.stepper.advance(x, w1[j], w2[j])
        if not np.all(np.isfinite(x)):
            raise SimulationBlowUp(i0 + L, (i0 + L) * stream.dt)
    diff = np.linalg.norm(x[:n] - x[n:], axis=-1)
    means[m] = diff.mean()
    sq[m] = np.mean(diff ** 2)
    times = stream.times
    t_start = min(1.0 / mu_guess, 0.5 * cfg.horizon)
    sel = (times >= t_start) & (means > floor)
    if np.count_nonzero(sel) < 2:
        return DecayFit(float("nan"), float("nan"), 0.0, times, means, sq, True, (t_start, cfg.horizon))
    slope, icpt, r2 = _linear_fit(times[sel], np.log(means[sel]))
    return DecayFit(-slope, icpt, r2, times, means, sq, False, (t_start, float(times[sel][-1])))


@dataclass
class MomentSeries:
    times: np.ndarray
    mean_norm: np.ndarray
    stderr: np.ndarray
    running_max: np.ndarray
    tail_slope: float
    tail_slope_stderr: float
    growth_flag: bool


def estimate_moment_bound(model: GalerkinModel, x0, cfg: SimConfig, tail_fraction: float = 1 / 3,
                          aug: DriftAugmentation | None = None) -> MomentSeries:
    """Time series of ``E|X_t|`` with a growth test on the tail window."""
    m = cfg.n_steps
    mean = np.empty(m + 1)
    se = np.empty(m + 1)
    aug = aug or NO_AUGMENTATION
    extra = (lambda t, x: aug.drift(model, t, x)) if aug.enabled else None

    def observe(i, t, x):
        r = np.linalg.norm(x, axis=-1)
        mean[i] = r.mean()
        se[i] = r.std(ddof=1) / np.sqrt(len(r)) if len(r) > 1 else 0.0

    stream = PathStream(model, x0, cfg, extra_drift=extra)
    stream.run(observer=observe)
    times = stream.times
    tail = times >= (1 - tail_fraction) * times[-1]
    slope, _, _ = _linear_fit(times[tail], mean[tail])
    # slope uncertainty from the per-time standard errors (independent-noise bound)
    tt = times[tail] - times[tail].mean()
    slope_se = float(np.sqrt(np.sum((tt / np.sum(tt ** 2)) ** 2 * se[tail] ** 2))) if len(tt) > 1 else 0.0
    growth = bool(slope > 0 and slope > 3 * slope_se)
    return MomentSeries(times, mean, se, np.maximum.accumulate(mean), float(slope), slope_se, growth)


# ---------------------------------------------------------------------------
# binary dump

_MAGIC = b"EBSDPATH"
_VERSION = 1
_HEADER = struct.Struct("<8sHIIIIIdq")


def write_path_bundle(path, bundle: PathBundle) -> None:
    """Little-endian dump: header then times, states, dW1, dW2 as float64.

    Header layout (``<8sHIIIIIdq``): magic ``EBSDPATH``, version, n_paths,
    n_steps, n_modes, d1, d2, dt, seed.
    """
    n_paths, m1, n = bundle.states.shape
    d1 = bundle.dW1.shape[-1]
    d2 = bundle.dW2.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n_paths, m1 - 1, n, d1, d2, bundle.dt, bundle.seed))
        for arr in (bundle.times, bundle.states, bundle.dW1, bundle.dW2):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_path_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_paths, m, n, d1, d2, dt, seed = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError("not a path bundle file")
    if version != _VERSION:
        raise ValueError(f"unsupported path bundle version {version}")
    off = _HEADER.size
    shapes = [(m + 1,), (n_paths, m + 1, n), (n_paths, m, d1), (n_paths, m, d2)]
    arrays = []
    for shp in shapes:
        size = int(np.prod(shp))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shp).copy())
        off += 8 * size
    return PathBundle(arrays[0], arrays[1], arrays[2], arrays[3], dt, seed)
