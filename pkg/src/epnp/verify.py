"""Property suites run by ``epnp verify`` on a checkpoint.

Structural properties of an energy model (score = gradient of energy,
symmetric Jacobian, path-independent line integrals) hold for any weights,
so they are checked at random inputs. A ReLU energy is piecewise linear and
its finite-difference Jacobian is zero almost everywhere, so those checks
run on a smooth twin: the same weights with softplus activations.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from .baselines import ScoreNet
from .dsm import perturb
from .diffgraph import grad_check
from .energy import EnergyModel, jacobian_symmetry, line_integral_energy, score_gradient_error
from .lipschitz import estimate_L, step_size
from .numerics import make_rng
from .operators import dot_test, identity_op, mask_op, mri_op, synthetic_coil_maps, variable_density_mask
from .solver import DESCENT_VIOLATION, SolveConfig, epnp_gd

LEVELS = {
    "quick": {"points": 3, "coords": 32, "grad_coords": 4, "line_steps": 1024, "smoke_iters": 100},
    "full": {"points": 10, "coords": 64, "grad_coords": 12, "line_steps": 1024, "smoke_iters": 500},
}

SYMMETRY_TOL = 1e-3
GRADIENT_TOL = 1e-5
LINE_TOL = 1e-3
DOT_TOL = 1e-10
PARAM_GRAD_TOL = 1e-4
SPECTRAL_TOL = 1e-2


def smooth_twin(model: EnergyModel) -> EnergyModel:
    if model.config.activation in ("softplus", "silu"):
        return model
    twin = model.copy()
    twin.config = replace(model.config, activation="softplus")
    return twin


def _check(report, name, fn, threshold=None, informational=False):
    t0 = time.perf_counter()
    try:
        value, passed = fn()
        error = None
    except Exception as exc:  # recorded as a failed check
        value, passed, error = None, False, f"{type(exc).__name__}: {exc}"
    entry = {"name": name, "passed": bool(passed), "value": value, "threshold": threshold,
             "seconds": round(time.perf_counter() - t0, 3)}
    if informational:
        entry["informational"] = True
    if error:
        entry["error"] = error
    report["checks"].append(entry)


def _points(shape, n, seed):
    rng = make_rng(seed)
    return [rng.uniform(0.0, 1.0, shape) for _ in range(n)]


def _operator_checks(report, shape, seed):
    c, h, w = shape

    def dots():
        ops = [identity_op(shape), mask_op(make_rng(seed).random(shape) < 0.5)]
        if c == 2:
            ops.append(mri_op(variable_density_mask(h, 2, seed=seed, width=w), synthetic_coil_maps(4, h, w, seed)))
        worst = max(dot_test(op, make_rng(seed + i)) for i, op in enumerate(ops))
        return worst, worst <= DOT_TOL

    _check(report, "adjoint_dot_tests", dots, DOT_TOL)

    def steps():
        exact = step_size(1.0, 0.01, 0.01) == 1.0 / 20000.0
        Ls = [0.0, 0.5, 1.0, 2.0, 10.0]
        g = [step_size(L, 0.01, 0.01) for L in Ls]
        mono = all(a > b for a, b in zip(g, g[1:]))
        mono &= step_size(1.0, 0.02, 0.01) > step_size(1.0, 0.01, 0.01)
        mono &= step_size(1.0, 0.01, 0.02) > step_size(1.0, 0.01, 0.01)
        return step_size(1.0, 0.01, 0.01), bool(exact and mono)

    _check(report, "step_size_rule", steps, 5e-5)


def _param_grad(model, shape, lv, seed):
    m = model.astype(np.float64)
    x = make_rng(seed).uniform(0, 1, (1,) + tuple(shape))
    xn, target = perturb(x, m.sigma, make_rng(seed + 1))
    blocks = [b for b in m.blocks() if not b.name.startswith("decoder.")]

    def build(g):
        diff = g.sub(m.build_score(g, g.constant(xn)), g.constant(target))
        return g.scale(g.sum(g.mul(diff, diff)), 1.0 / diff.value.size)

    err = grad_check(build, blocks, eps=1e-6, max_coords=lv["grad_coords"], rng=make_rng(seed + 2))
    return err, err <= PARAM_GRAD_TOL


def _energy_checks(report, model: EnergyModel, lv, seed):
    twin = smooth_twin(model).astype(np.float64)
    shape = model.config.input_shape
    pts = _points(shape, lv["points"], seed)
    if twin is not model:
        report["smooth_twin"] = True

    def sym():
        worst = max(jacobian_symmetry(twin, p, max_coords=lv["coords"], rng=make_rng(seed + i))
                    for i, p in enumerate(pts))
        return worst, worst <= SYMMETRY_TOL

    def grad():
        worst = max(score_gradient_error(twin, p, max_coords=lv["coords"], rng=make_rng(seed + i))
                    for i, p in enumerate(pts))
        return worst, worst <= GRADIENT_TOL

    def line():
        a, x = pts[0], pts[-1] if len(pts) > 1 else 1.0 - pts[0]
        direct = twin.energy(x) - twin.energy(a)
        s = line_integral_energy(twin, a, x, "straight", lv["line_steps"])
        t = line_integral_energy(twin, a, x, "two-segment", lv["line_steps"], seed=seed)
        scale = max(abs(direct), abs(s), abs(t), 1e-300)
        worst = max(abs(s - direct), abs(t - direct), abs(s - t)) / scale
        return worst, worst <= LINE_TOL

    _check(report, "score_is_energy_gradient", grad, GRADIENT_TOL)
    _check(report, "jacobian_symmetry", sym, SYMMETRY_TOL)
    _check(report, "line_integral_path_independence", line, LINE_TOL)
    _check(report, "parameter_gradients", lambda: _param_grad(model, shape, lv, seed), PARAM_GRAD_TOL)

    def smoke():
        # A ReLU score is discontinuous, so descent is only guaranteed for the twin.
        m = twin.copy() if twin is not model else model.astype(np.float64)
        truth = _points(shape, 1, seed + 11)[0]
        op = identity_op(shape)
        b = truth + 0.01 * make_rng(seed + 12).standard_normal(shape)
        if m.L is None or twin is not model:
            probes = [b, truth] + _points(shape, 8, seed + 7)
            m.lipschitz = estimate_L(m, probes, iters=20, safety_factor=2.0, seed=seed).to_dict()
        _, trace = epnp_gd(m, op, b, SolveConfig(eta=0.01, max_iters=lv["smoke_iters"]))
        costs = trace.costs
        rises = np.diff(costs) > 8 * np.finfo(np.float64).eps * np.abs(costs[:-1])
        return int(rises.sum()), trace.status != DESCENT_VIOLATION and not rises.any()

    _check(report, "monotone_descent_smoke", smoke, 0)


def _scorenet_checks(report, net: ScoreNet, lv, seed):
    shape = net.config.input_shape

    def sn():
        norms = net.layer_spectral_norms(iters=200)
        worst = max(norms)
        return worst, (not net.config.spectral_norm) or worst <= 1 + SPECTRAL_TOL

    _check(report, "layer_spectral_norms", sn, 1 + SPECTRAL_TOL)
    _check(report, "parameter_gradients", lambda: _param_grad(net, shape, lv, seed), PARAM_GRAD_TOL)

    class _AsField:
        dtype = np.dtype(np.float64)

        def __init__(self, n):
            self.n = n.astype(np.float64)

        def astype(self, dtype):
            return self

        def energy_and_score(self, x):
            return None, self.n.noise(x)

    def asym():
        p = _points(shape, 1, seed)[0]
        r = jacobian_symmetry(_AsField(net), p, max_coords=lv["coords"], rng=make_rng(seed))
        return r, True

    # A plain net has no reason to be conservative; reported for comparison only.
    _check(report, "jacobian_symmetry", asym, None, informational=True)


def run_verify(model, level: str = "quick", seed: int = 0) -> dict:
    """Run the property suite for ``model`` and return a JSON-ready report."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    lv = LEVELS[level]
    report = {"level": level, "kind": model.kind, "seed": seed, "checks": []}
    t0 = time.perf_counter()
    _operator_checks(report, model.config.input_shape, seed)
    if isinstance(model, EnergyModel):
        _energy_checks(report, model, lv, seed)
    elif isinstance(model, ScoreNet):
        _scorenet_checks(report, model, lv, seed)
    else:
        raise TypeError(f"cannot verify a {type(model).__name__}")
    report["passed"] = all(c["passed"] for c in report["checks"] if not c.get("informational"))
    report["seconds"] = round(time.perf_counter() - t0, 3)
    for c in report["checks"]:
        if isinstance(c["value"], float) and not math.isfinite(c["value"]):
            c["value"] = repr(c["value"])
    return report
