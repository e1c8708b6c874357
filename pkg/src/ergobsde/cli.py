"""Scenario-driven command line runner.

Usage::

    ergobsde <subcommand> <scenario.toml> [--set key=value ...] [--out dir] [--timings]

Subcommands: ``validate``, ``simulate``, ``ergodic``, ``hjb``, ``control``,
``report``.  Exit status is 0 on success, 2 when the scenario or the
model assumptions fail validation, 3 on a numerical fault.

Scenario files are TOML with the sections ``model``, ``driver``,
``solver``, ``simulate``, ``hjb``, ``control`` and ``outputs``; unknown keys
are rejected.  Every run ends by writing ``manifest.json``, which lists
each output file with its SHA-256.  Path dumps (``simulate.dump_paths``)
use the binary layout documented in :func:`ergobsde.forward.write_path_bundle`.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .bsde import InfeasibleTolerance, RegressionBasis, RegressionError, SolverConfig
from .control import (
    CostConfig,
    constant_policy,
    synthesize_feedback,
    verify_bound_and_gap,
    write_policy_csv,
)
from .ergodic import (
    SCHEMA_VERSION,
    lipschitz_uniformity_diag,
    parabolic_long_time_ratio,
    vanishing_discount,
    verify_mild_hjb,
)
from .forward import (
    SimConfig,
    SimulationBlowUp,
    estimate_contraction,
    estimate_moment_bound,
    simulate,
    write_path_bundle,
)
from .hamiltonian import (
    constant_driver,
    example2_control_structure,
    example2_driver,
    state_driver,
)
from .model import (
    AssumptionViolation,
    build_boundary_control_model,
    build_ou_model,
    build_reaction_model,
    field_average,
    joint_dissipativity_certificate,
    validate_standing_assumptions,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
SUBCOMMANDS = ("validate", "simulate", "ergodic", "hjb", "control", "report")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema

_REQUIRED = object()

_FUNC_KEYS = {"kind", "value", "slope", "intercept", "base", "scale", "arg",
              "weight_x", "weight_y", "center_y"}

SCHEMA = {
    "name": _REQUIRED,
    "description": "",
    "model": {
        "builder": _REQUIRED,
        "a": 1.0, "sigma_const": 1.0, "dim": 1,
        "n_modes": 6,
        "f": None, "b": None, "sigma": None, "d": None,
        "L_f": 0.0, "mu_f": 0.0, "L_b": 1.0, "mu_b": 1.0, "L_sigma": 0.0,
        "delta": 1.0, "sigma_max": 1.0, "gamma_exponent": 0.25,
        "validation_samples": 200, "validation_seed": 0,
        "certificate": "auto",
    },
    "driver": {
        "kind": _REQUIRED,
        "c": 0.0, "coordinate": 0, "L_x": None, "M_psi": None,
        "ell": None, "gamma_points": 2001,
    },
    "solver": {
        "dt": 0.02, "n_paths": 2000, "seed": 0, "scheme": "exponential_euler",
        "noise_correction": False, "tail_tol": 1e-3, "min_horizon": 0.0,
        "horizon_cap": 5000.0, "alphas": [0.4, 0.2, 0.1, 0.05, 0.025], "fit_points": 3,
        "x_ref": None, "eval_points": [],
        "basis": {"kind": "polynomial", "degree": 3, "projection": None, "centers": 0, "width": 1.0},
        "pool_burn": 5.0, "pool_width": 5.0, "pool_batches": 5,
    },
    "simulate": {
        "dt": 0.01, "horizon": 10.0, "n_paths": 1000, "seed": 0, "x0": None, "x0p": None,
        "mu_guess": 1.0, "dump_paths": False, "dump_n_paths": 16,
    },
    "hjb": {
        "T_list": [5.0, 10.0, 20.0], "x": None, "t_T_pairs": [[0.0, 1.0]], "points": [],
        "n_paths": None,
    },
    "control": {
        "dt": 0.05, "horizon": 60.0, "burn_in": 5.0, "n_paths": 500, "seed": 1,
        "x0": None, "constant_policies": [-1.0, -0.5, 0.0, 0.5, 1.0],
        "feedback_allowance": 0.02,
    },
    "outputs": {"dir": "out"},
}

_FREEFORM = {("model", "f"), ("model", "b"), ("model", "sigma"), ("model", "d"), ("driver", "ell")}


def _merge(schema, data, path=""):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'scenario'}: expected a table")
    out = {}
    for key in data:
        if key not in schema:
            raise ScenarioError(f"unknown key '{path}{key}'")
    for key, default in schema.items():
        full = f"{path}{key}"
        if isinstance(default, dict) and not (tuple(full.split(".")) in _FREEFORM):
            out[key] = _merge(default, data.get(key, {}), full + ".")
        elif key in data:
            out[key] = data[key]
        elif default is _REQUIRED:
            raise ScenarioError(f"missing required key '{full}'")
        else:
            out[key] = copy.deepcopy(default)
        if tuple(full.split(".")) in _FREEFORM and out[key] is not None:
            if not isinstance(out[key], dict):
                raise ScenarioError(f"'{full}' must be a table")
            for k in out[key]:
                if k not in _FUNC_KEYS:
                    raise ScenarioError(f"unknown key '{full}.{k}'")
    return out


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ScenarioError(f"override '{item}' is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ScenarioError(f"override path '{key}' crosses a value")
        node[parts[-1]] = _parse_value(text.strip())
    return data


def load_scenario(path, overrides=None) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ScenarioError(f"scenario file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc
    return _merge(SCHEMA, apply_overrides(raw, overrides))


def scenario_hash(sc: dict) -> str:
    blob = json.dumps(sc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# builders


def scalar_function(spec, default=None):
    """Vectorised one-argument function from a scenario table."""
    spec = spec or default
    if spec is None:
        raise ScenarioError("missing function specification")
    kind = spec.get("kind")
    if kind == "constant":
        v = float(spec.get("value", 0.0))
        return lambda s: np.full(np.shape(s), v)
    if kind == "linear":
        a, c = float(spec.get("slope", 1.0)), float(spec.get("intercept", 0.0))
        return lambda s: a * np.asarray(s) + c
    if kind == "tanh":
        base, sc = float(spec.get("base", 1.0)), float(spec.get("scale", 0.5))
        return lambda s: base + sc * np.tanh(s)
    if kind == "sin":
        sc = float(spec.get("scale", 1.0))
        return lambda s: sc * np.sin(s)
    raise ScenarioError(f"unknown function kind {kind!r}")


def reaction_function(spec):
    """``f(field, y)`` from a scalar function of either argument."""
    if spec is None:
        return lambda v, y: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(y)))
    arg = spec.get("arg", "y")
    g = scalar_function({k: v for k, v in spec.items() if k != "arg"})
    if arg == "y":
        return lambda v, y: g(y) * np.ones_like(v)
    if arg == "x":
        return lambda v, y: g(v)
    raise ScenarioError("reaction function 'arg' must be 'x' or 'y'")


def bump_cost(spec):
    spec = spec or {}
    if spec.get("kind", "bump") != "bump":
        raise ScenarioError("running cost 'ell' supports kind = 'bump' only")
    wy = float(spec.get("weight_y", 1.0))
    cy = float(spec.get("center_y", 1.0))
    wx = float(spec.get("weight_x", 0.5))

    def ell(v, y):
        return wy * (1.0 - np.exp(-(y - cy) ** 2)) + wx * (1.0 - np.exp(-v * v))

    # |d/ds (1 - e^{-s^2})| <= sqrt(2/e)
    lip = np.sqrt(2.0 / np.e)
    return ell, wy * lip + wx * lip, abs(wy) + abs(wx)


def build_model(sc):
    m = sc["model"]
    kind = m["builder"]
    try:
        if kind == "ou":
            return build_ou_model(m["a"], m["sigma_const"], m["dim"])
        if kind == "reaction":
            return build_reaction_model(
                m["n_modes"], reaction_function(m["f"]),
                scalar_function(m["b"], {"kind": "linear", "slope": -1.0}),
                scalar_function(m["sigma"], {"kind": "constant", "value": 1.0}),
                scalar_function(m["d"], {"kind": "constant", "value": 1.0}),
                L_f=m["L_f"], mu_f=m["mu_f"], L_b=m["L_b"], mu_b=m["mu_b"], L_sigma=m["L_sigma"],
                delta=m["delta"], sigma_max=m["sigma_max"], gamma_exponent=m["gamma_exponent"],
            )
        if kind == "boundary":
            return build_boundary_control_model(
                m["n_modes"], scalar_function(m["d"], {"kind": "constant", "value": 1.0}),
                scalar_function(m["b"], {"kind": "linear", "slope": -1.0}),
                scalar_function(m["sigma"], {"kind": "constant", "value": 1.0}),
                L_b=m["L_b"], L_sigma=m["L_sigma"], delta=m["delta"], sigma_max=m["sigma_max"],
                gamma_exponent=m["gamma_exponent"],
            )
    except AssumptionViolation as exc:
        raise ScenarioError(f"model: {exc}") from exc
    raise ScenarioError(f"unknown model builder {kind!r}")


def build_driver(sc, model):
    d = sc["driver"]
    kind = d["kind"]
    d1, d2 = model.d1, model.d2
    if kind == "constant":
        return constant_driver(d["c"], d1, d2), None
    if kind == "state_cos":
        k = int(d["coordinate"])
        return state_driver(lambda x: np.cos(x[..., k]), 1.0, 1.0, d1, d2, name="cos"), None
    if kind in ("example2", "control_example2"):
        if "quad" not in model.structure:
            raise ScenarioError("example2 drivers need an SPDE model builder")
        ell, lip, bound = bump_cost(d["ell"])
        ellbar = field_average(model, ell)
        L_x = d["L_x"] if d["L_x"] is not None else lip
        M = d["M_psi"] if d["M_psi"] is not None else bound
        cs = example2_control_structure(ellbar, d["gamma_points"], d2, bound=max(M + 1.0, 1.0))
        # the BSDE uses the closed form; feedback uses the grid
        return example2_driver(ellbar, L_x, M, d2), cs
    raise ScenarioError(f"unknown driver kind {kind!r}")


def solver_config(sc):
    s = sc["solver"]
    return SolverConfig(
        dt=s["dt"], n_paths=s["n_paths"], seed=s["seed"], scheme=s["scheme"],
        noise_correction=s["noise_correction"], tail_tol=s["tail_tol"],
        min_horizon=s["min_horizon"], horizon_cap=s["horizon_cap"], pool_burn=s["pool_burn"],
        pool_width=s["pool_width"], pool_batches=s["pool_batches"],
    )


def regression_basis(sc):
    b = dict(sc["solver"]["basis"])
    for k in b:
        if k not in SCHEMA["solver"]["basis"]:
            raise ScenarioError(f"unknown key 'solver.basis.{k}'")
    proj = b.get("projection")
    return RegressionBasis(kind=b.get("kind", "polynomial"), degree=int(b.get("degree", 3)),
                           projection=None if proj is None else tuple(int(i) for i in proj),
                           centers=int(b.get("centers", 0)), width=float(b.get("width", 1.0)))


def _state(model, value, name):
    if value is None:
        return np.zeros(model.n_modes)
    x = np.asarray(value, dtype=float)
    if x.shape != (model.n_modes,):
        raise ScenarioError(f"{name} must have {model.n_modes} entries")
    return x


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_series(path, xs, ys):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in zip(xs, ys):
            fh.write(f"{float(a)!r} {float(b)!r}\n")


def write_manifest(out: Path, sc: dict, timings: dict | None):
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    inventory = [{"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in files]
    manifest = {"schema_version": SCHEMA_VERSION, "artifact_version": __version__,
                "scenario_hash": scenario_hash(sc), "files": inventory}
    if timings is not None:
        manifest["timings"] = timings
    write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# stages


def stage_validate(sc, model, out):
    n = sc["model"]["validation_samples"]
    rep = validate_standing_assumptions(model, sample_count=n, rng_seed=sc["model"]["validation_seed"])
    result = rep.as_dict()
    cert = None
    method = sc["model"]["certificate"]
    if sc["model"]["builder"] != "boundary" or method != "auto":
        cert = joint_dissipativity_certificate(model, method=method)
        result["dissipativity"] = {"mu_bar": cert.mu_bar, "method": cert.method,
                                   "success": cert.success, "witness": cert.witness}
    write_json(out / "validation.json", result)
    return rep.passed and (cert is None or cert.success or sc["model"]["builder"] == "boundary")


def stage_simulate(sc, model, out):
    s = sc["simulate"]
    cfg = SimConfig(s["dt"], s["horizon"], s["n_paths"], s["seed"])
    x0 = _state(model, s["x0"], "simulate.x0")
    x0p = _state(model, s["x0p"], "simulate.x0p") if s["x0p"] is not None else x0 + 1.0
    fit = estimate_contraction(model, x0, x0p, cfg, mu_guess=s["mu_guess"])
    mom = estimate_moment_bound(model, x0, cfg)
    write_series(out / "contraction.dat", fit.times, fit.per_time_means)
    write_series(out / "moments.dat", mom.times, mom.mean_norm)
    write_json(out / "simulate.json", {
        "mu_hat": fit.mu_hat, "intercept": fit.intercept, "r_squared": fit.r_squared,
        "degenerate": fit.degenerate, "window": list(fit.window),
        "moment_sup": float(mom.running_max[-1]), "tail_slope": mom.tail_slope,
        "tail_slope_stderr": mom.tail_slope_stderr, "growth_flag": mom.growth_flag,
    })
    if s["dump_paths"]:
        bundle = simulate(model, x0, None, SimConfig(s["dt"], s["horizon"], s["dump_n_paths"], s["seed"]))
        write_path_bundle(out / "paths.bin", bundle)
    return fit


def stage_ergodic(sc, model, driver, out):
    s = sc["solver"]
    x_ref = _state(model, s["x_ref"], "solver.x_ref")
    pts = [_state(model, p, "solver.eval_points") for p in s["eval_points"]]
    erg = vanishing_discount(model, driver, s["alphas"], x_ref, pts, regression_basis(sc), solver_config(sc),
                             fit_points=s["fit_points"])
    erg.alpha_csv(out / "alpha_sweep.csv")
    erg.summary_json(out / "summary.json")
    write_series(out / "alpha_v.dat", [r.alpha for r in erg.alpha_records], [r.alpha_v for r in erg.alpha_records])
    with open(out / "vbar.csv", "w", encoding="utf-8") as fh:
        fh.write("point,vbar,stderr,lambda_at_point,lambda_stderr\n")
        for k in range(len(pts)):
            fh.write(f"{k},{float(erg.vbar_values[k])!r},{float(erg.vbar_stderr[k])!r},"
                     f"{float(erg.lambda_at_points[k + 1])!r},{float(erg.lambda_at_stderr[k + 1])!r}\n")
    if pts:
        lip = lipschitz_uniformity_diag(erg, [(x_ref, p) for p in pts])
        write_json(out / "lipschitz.json", lip)
    return erg


def stage_hjb(sc, model, driver, erg, out):
    h = sc["hjb"]
    cfg = solver_config(sc)
    if h["n_paths"] is not None:
        cfg = cfg.with_(n_paths=int(h["n_paths"]))
    x = _state(model, h["x"], "hjb.x")
    ratio = parabolic_long_time_ratio(model, driver, h["T_list"], x, regression_basis(sc), cfg, erg.lambda_hat)
    write_series(out / "long_time_ratio.dat", ratio["T"], ratio["ratio"])
    pts = [_state(model, p, "hjb.points") for p in h["points"]] or [erg.x_ref]
    mild = verify_mild_hjb(model, driver, erg, [tuple(p) for p in h["t_T_pairs"]], pts, cfg)
    write_json(out / "hjb.json", {"long_time_ratio": ratio, "mild_identity": mild.rows})
    return ratio, mild


def stage_control(sc, model, cs, erg, out):
    c = sc["control"]
    if cs is None:
        raise ScenarioError("control needs a control-structure driver (example2)")
    cfg = CostConfig(c["dt"], c["horizon"], c["burn_in"], c["n_paths"], c["seed"])
    x0 = _state(model, c["x0"], "control.x0")
    policies = [synthesize_feedback(erg, cs, model)] + [constant_policy(cs, g) for g in c["constant_policies"]]
    rep = verify_bound_and_gap(model, cs, erg, x0, policies, cfg, c["feedback_allowance"])
    write_policy_csv(rep, out / "policies.csv")
    write_json(out / "control.json", rep)
    return rep


def stage_report(out):
    collected = {}
    for name in ("validation.json", "simulate.json", "summary.json", "hjb.json", "control.json", "lipschitz.json"):
        p = out / name
        if p.exists():
            collected[name[:-5]] = json.loads(p.read_text(encoding="utf-8"))
    series = sorted(p.name for p in out.glob("*.dat"))
    write_json(out / "report.json", {"schema_version": SCHEMA_VERSION, "sections": collected, "plot_data": series})
    return collected


# ---------------------------------------------------------------------------


def run(subcommand: str, scenario_path, overrides=None, out_dir=None, timings: bool = False) -> int:
    if subcommand not in SUBCOMMANDS:
        print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_VALIDATION
    clock = {}
    try:
        sc = load_scenario(scenario_path, overrides)
        out = Path(out_dir or sc["outputs"]["dir"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ScenarioError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise ScenarioError(f"output directory {out} is not writable")
        if subcommand == "report":
            stage_report(out)
            write_manifest(out, sc, clock if timings else None)
            return EXIT_OK

        t0 = time.perf_counter()
        model = build_model(sc)
        clock["build"] = time.perf_counter() - t0
        status = EXIT_OK
        if subcommand == "validate":
            t0 = time.perf_counter()
            ok = stage_validate(sc, model, out)
            clock["validate"] = time.perf_counter() - t0
            status = EXIT_OK if ok else EXIT_VALIDATION
        elif subcommand == "simulate":
            t0 = time.perf_counter()
            stage_simulate(sc, model, out)
            clock["simulate"] = time.perf_counter() - t0
        else:
            driver, cs = build_driver(sc, model)
            if subcommand == "control" and cs is None:
                raise ScenarioError("control needs a control-structure driver (example2)")
            t0 = time.perf_counter()
            erg = stage_ergodic(sc, model, driver, out)
            clock["ergodic"] = time.perf_counter() - t0
            if subcommand == "hjb":
                t0 = time.perf_counter()
                stage_hjb(sc, model, driver, erg, out)
                clock["hjb"] = time.perf_counter() - t0
            elif subcommand == "control":
                t0 = time.perf_counter()
                stage_control(sc, model, cs, erg, out)
                clock["control"] = time.perf_counter() - t0
        write_manifest(out, sc, clock if timings else None)
        return status
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SimulationBlowUp, RegressionError, InfeasibleTolerance, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ergobsde", description="Ergodic BSDE experiment runner")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("scenario")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", default=None)
    parser.add_argument("--timings", action="store_true", help="record stage timings in the manifest")
    args = parser.parse_args(argv)
    return run(args.subcommand, args.scenario, args.overrides, args.out, args.timings)


if __name__ == "__main__":
    sys.exit(main())
