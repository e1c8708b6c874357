"""Shared model and driver builders for the test-suite."""

import numpy as np

from ergobsde.hamiltonian import example2_control_structure, example2_driver, state_driver
from ergobsde.model import build_boundary_control_model, build_reaction_model, field_average


def ones(s):
    return np.ones_like(np.asarray(s, dtype=float))


def reaction_model(n_modes=6, f_scale=0.5, mu_b=1.0, L_sigma=0.0, sigma=None, delta=1.0, sigma_max=1.0):
    return build_reaction_model(
        n_modes,
        lambda v, y: f_scale * np.sin(y) * np.ones_like(v),
        lambda y: -mu_b * y,
        sigma or ones,
        ones,
        L_f=abs(f_scale), mu_f=0.0, L_b=mu_b, mu_b=mu_b, L_sigma=L_sigma,
        delta=delta, sigma_max=sigma_max,
    )


def boundary_model(n_modes=4, sigma=None, delta=1.0, sigma_max=1.0, L_sigma=0.0):
    return build_boundary_control_model(
        n_modes, ones, lambda y: -y, sigma or ones, L_b=1.0, L_sigma=L_sigma,
        delta=delta, sigma_max=sigma_max,
    )


def bump(v, y):
    return (1.0 - np.exp(-(y - 1.0) ** 2)) + 0.5 * (1.0 - np.exp(-v * v))


# |d/ds (1 - exp(-s^2))| <= sqrt(2/e); the field average is 1-Lipschitz in L2 -> L1
BUMP_LX = 1.5 * np.sqrt(2.0 / np.e)


def example2_pieces(model, gamma_points=2001):
    ellbar = field_average(model, bump)
    driver = example2_driver(ellbar, BUMP_LX, 1.5, model.d2)
    cs = example2_control_structure(ellbar, gamma_points, model.d2, bound=2.5)
    return ellbar, driver, cs


def cos_driver(d1=1, d2=1):
    return state_driver(lambda x: np.cos(x[..., 0]), 1.0, 1.0, d1, d2, name="cos")
