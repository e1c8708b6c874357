import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergobsde.forward import (
    DriftAugmentation,
    PathStream,
    SimConfig,
    SimulationBlowUp,
    estimate_contraction,
    estimate_moment_bound,
    read_path_bundle,
    simulate,
    write_path_bundle,
)
from ergobsde.model import GalerkinModel, ModelConstants, build_ou_model, joint_dissipativity_certificate

from helpers import reaction_model

# E|N(0, 1/2)| = sqrt(1/pi), stationary law of dX = -X dt + dW
STATIONARY_ABS_MEAN = 0.5641895835477563


def test_ou_mean_matches_exponential_decay():
    m = build_ou_model()
    b = simulate(m, np.array([2.0]), None, SimConfig(0.01, 1.0, 20000, seed=3, noise_correction=True))
    x1 = b.states[:, -1, 0]
    se = x1.std(ddof=1) / np.sqrt(len(x1))
    assert abs(x1.mean() - 2 * np.exp(-1.0)) < 4 * se
    # exact one-step variance with the correction
    var = (1 - np.exp(-2.0)) / 2
    assert x1.var(ddof=1) == pytest.approx(var, rel=0.03)


def test_ou_stationary_absolute_moment():
    m = build_ou_model()
    ms = estimate_moment_bound(m, np.zeros(1), SimConfig(0.05, 10.0, 20000, seed=1, noise_correction=True))
    assert abs(ms.mean_norm[-1] - STATIONARY_ABS_MEAN) < 4 * ms.stderr[-1] + 1e-3
    assert not ms.growth_flag


def test_moment_bound_flags_growth():
    grow = GalerkinModel(np.eye(1) * 0.5, np.zeros_like, np.eye(1),
                         lambda x: np.ones(x.shape[:-1] + (1, 1)), lambda x: np.ones(x.shape[:-1] + (1, 1)),
                         np.zeros((1, 1)), ModelConstants(0, 0, 1, 1), a_diagonal=True)
    ms = estimate_moment_bound(grow, np.ones(1), SimConfig(0.05, 5.0, 200, seed=0))
    assert ms.growth_flag


def test_noise_free_linear_step_is_exact():
    m = build_ou_model(a=2.0, sigma=1e-300)
    b = simulate(m, np.array([1.5]), None, SimConfig(0.1, 1.0, 1))
    assert b.states[0, :, 0] == pytest.approx(1.5 * np.exp(-2.0 * b.times), rel=1e-13)


def test_constant_augmentation_shifts_mean():
    m = build_ou_model(sigma=0.5)
    cfg = SimConfig(0.02, 2.0, 4000, seed=9)
    base = simulate(m, np.zeros(1), None, cfg)
    aug = simulate(m, np.zeros(1), DriftAugmentation(p_process=lambda t, x: 0.8), cfg)
    shift = aug.states[:, -1, 0] - base.states[:, -1, 0]
    # same noise, linear dynamics: shift is deterministic
    assert shift == pytest.approx(np.full(4000, 0.5 * 0.8 * (1 - np.exp(-2.0))), rel=1e-12)


def test_zero_augmentation_is_bit_identical():
    m = reaction_model(3)
    cfg = SimConfig(0.05, 1.0, 10, seed=4)
    a = simulate(m, np.zeros(4), None, cfg)
    zero = DriftAugmentation(lambda t, x: np.zeros(x.shape[:-1] + (1,)),
                             lambda t, x: np.zeros(x.shape[:-1] + (1,)))
    b = simulate(m, np.zeros(4), zero, cfg)
    assert np.array_equal(a.states, b.states)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 6))
def test_path_noise_independent_of_batch_size(seed, n):
    m = reaction_model(2)
    small = simulate(m, np.zeros(3), None, SimConfig(0.1, 15.0, n, seed=seed))
    big = simulate(m, np.zeros(3), None, SimConfig(0.1, 15.0, n + 3, seed=seed))
    assert np.array_equal(small.dW1, big.dW1[:n])
    assert np.array_equal(small.dW2, big.dW2[:n])
    # batched matmuls may round differently with the row count
    assert np.allclose(small.states, big.states[:n], rtol=0, atol=1e-12)


def test_same_seed_bit_identical_and_different_seeds_differ():
    m = reaction_model(2)
    cfg = SimConfig(0.1, 2.0, 5, seed=12)
    assert np.array_equal(simulate(m, np.zeros(3), None, cfg).states, simulate(m, np.zeros(3), None, cfg).states)
    assert not np.array_equal(simulate(m, np.zeros(3), None, cfg).states,
                              simulate(m, np.zeros(3), None, cfg.with_(seed=13)).states)


def test_stream_replay_matches_full_simulation():
    m = reaction_model(2)
    cfg = SimConfig(0.05, 20.0, 7, seed=2)  # 400 steps -> several blocks
    full = simulate(m, np.zeros(3), None, cfg)
    st_ = PathStream(m, np.zeros(3), cfg)
    end = st_.run()
    assert np.array_equal(end, full.states[:, -1])
    for b in (st_.n_blocks - 1, 0, 1):
        i0, states, w1, _ = st_.block(b)
        L = states.shape[0] - 1
        assert np.array_equal(states.transpose(1, 0, 2), full.states[:, i0:i0 + L + 1])
        assert np.array_equal(w1.transpose(1, 0, 2), full.dW1[:, i0:i0 + L])


def test_euler_maruyama_mean():
    m = build_ou_model()
    b = simulate(m, np.array([1.0]), None, SimConfig(0.01, 1.0, 10, scheme="euler_maruyama", seed=0))
    # drift-only recursion of the scheme on the noise-free part
    det = simulate(build_ou_model(sigma=1e-300), np.array([1.0]), None,
                   SimConfig(0.01, 1.0, 1, scheme="euler_maruyama"))
    assert det.states[0, -1, 0] == pytest.approx(0.99 ** 100, rel=1e-12)
    assert b.states.shape == (10, 101, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_raises_with_step():
    bad = GalerkinModel(np.eye(1) * 800.0, np.zeros_like, np.eye(1),
                        lambda x: np.ones(x.shape[:-1] + (1, 1)), lambda x: np.ones(x.shape[:-1] + (1, 1)),
                        np.zeros((1, 1)), ModelConstants(0, 0, 1, 1), a_diagonal=True)
    with pytest.raises(SimulationBlowUp) as ei:
        simulate(bad, np.ones(1), None, SimConfig(0.1, 20.0, 2))
    assert ei.value.step_index > 0


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        SimConfig(0.1, 1.0, 0)
    with pytest.raises(ValueError):
        SimConfig(0.1, 1.0, 1, scheme="rk4")
    with pytest.raises(ValueError):
        simulate(build_ou_model(), np.zeros(2), None, SimConfig(0.1, 1.0, 1))


def test_ou_contraction_rate():
    fit = estimate_contraction(build_ou_model(a=1.0), np.zeros(1), np.ones(1), SimConfig(0.01, 10.0, 50))
    assert fit.mu_hat == pytest.approx(1.0, rel=0.02)
    assert not fit.degenerate


def test_reaction_contraction_exceeds_certificate_fraction():
    m = reaction_model(6)
    mu_bar = joint_dissipativity_certificate(m).mu_bar
    x0 = np.zeros(7)
    x0p = x0.copy()
    x0p[0] = 1.0
    x0p[-1] = 1.0
    fit = estimate_contraction(m, x0, x0p, SimConfig(0.01, 8.0, 100, seed=1), mu_guess=mu_bar)
    assert fit.mu_hat >= 0.8 * mu_bar


def test_identical_starts_are_degenerate():
    fit = estimate_contraction(build_ou_model(), np.ones(1), np.ones(1), SimConfig(0.1, 5.0, 3))
    assert fit.degenerate and np.isnan(fit.mu_hat)


def test_path_bundle_roundtrip(tmp_path):
    m = reaction_model(2)
    b = simulate(m, np.zeros(3), None, SimConfig(0.1, 1.0, 3, seed=5))
    p = tmp_path / "paths.bin"
    write_path_bundle(p, b)
    r = read_path_bundle(p)
    for name in ("times", "states", "dW1", "dW2"):
        assert np.array_equal(getattr(r, name), getattr(b, name))
    assert r.dt == b.dt and r.seed == 5
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(ValueError):
        read_path_bundle(p)
