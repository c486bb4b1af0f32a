"""MAP reconstruction by monotone gradient descent, plus RED and score-PnP baselines.

All solves run in float64 regardless of the precision a model was trained in.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .lipschitz import step_size
from .numerics import NonFiniteError
from .phantoms import magnitude, psnr

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
DESCENT_VIOLATION = "descent_violation"

TRACE_COLUMNS = ("iter", "f", "data_term", "prior_term", "grad_norm", "psnr")


@dataclass
class SolveConfig:
    eta: float = 0.01
    sigma: float | None = None
    gamma: float | str = "auto"
    max_iters: int = 10000
    rel_tol: float = 1e-8
    init: str = "adjoint"
    x0: np.ndarray | None = None
    # Cost increases within this many ulps of |f| are treated as rounding.
    monotone_ulps: float = 8.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.gamma != "auto" and not float(self.gamma) > 0:
            raise ValueError("explicit gamma must be positive")
        if self.init not in ("adjoint", "zeros", "custom"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "custom" and self.x0 is None:
            raise ValueError("init='custom' needs x0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)
    status: str = MAX_ITERS
    gamma: float = float("nan")
    algorithm: str = "epnp-gd"

    @property
    def iterations(self) -> int:
        return self.records[-1]["iter"] if self.records else 0

    def column(self, name) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=np.float64)

    @property
    def costs(self) -> np.ndarray:
        return self.column("f")

    def to_csv(self, path):
        extra = sorted({k for r in self.records for k in r} - set(TRACE_COLUMNS))
        cols = list(TRACE_COLUMNS) + extra
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow(["" if r.get(c) is None else repr(r[c]) for c in cols])


def _sigma(model, cfg):
    sigma = cfg.sigma if cfg.sigma is not None else getattr(model, "sigma", None)
    if sigma is None or sigma <= 0:
        raise ValueError("a positive prior sigma is required")
    return float(sigma)


def _prep(model, b):
    if model is not None and getattr(model, "dtype", np.float64) != np.float64:
        model = model.astype(np.float64)
    return model, np.asarray(b, dtype=np.float64)


def _terms(model, op, b, eta, sigma, x):
    resid = op.apply(x) - b
    psi, h = model.energy_and_score(x)
    data = 0.5 * float(np.sum(resid * resid)) / eta**2
    prior = float(psi) / sigma**2
    grad = op.adjoint(resid) / eta**2 + h / sigma**2
    return data + prior, data, prior, grad


def map_cost(model, op, b, cfg: SolveConfig, x):
    """``(f, data_term, prior_term)`` with ``f = ||Ax - b||^2 / (2 eta^2) + psi(x) / sigma^2``."""
    model, b = _prep(model, b)
    f, data, prior, _ = _terms(model, op, b, cfg.eta, _sigma(model, cfg), np.asarray(x, dtype=np.float64))
    return f, data, prior


def map_grad(model, op, b, cfg: SolveConfig, x):
    """``A^H (Ax - b) / eta^2 + H(x) / sigma^2``."""
    model, b = _prep(model, b)
    return _terms(model, op, b, cfg.eta, _sigma(model, cfg), np.asarray(x, dtype=np.float64))[3]


def initial_image(op, b, cfg: SolveConfig):
    if cfg.init == "adjoint":
        return op.adjoint(b).astype(np.float64)
    if cfg.init == "zeros":
        return np.zeros(op.ishape)
    return np.asarray(cfg.x0, dtype=np.float64).copy()


def resolve_gamma(model, cfg: SolveConfig, sigma: float) -> float:
    if cfg.gamma != "auto":
        return float(cfg.gamma)
    L = getattr(model, "L", None)
    if L is None:
        raise ValueError("gamma='auto' needs a model carrying a Lipschitz estimate")
    return step_size(L, cfg.eta, sigma)


def epnp_gd(model, op, b, cfg: SolveConfig, truth=None):
    """Steepest descent on the MAP objective; returns ``(x, SolveTrace)``.

    Stops when ``|f_{n+1} - f_n| / |f_n| <= rel_tol`` or after
    ``max_iters``. With ``gamma='auto'`` any cost increase beyond rounding
    ends the solve with status ``descent_violation`` (the Lipschitz estimate
    was too small); the returned image is then the last iterate that did not
    increase the cost.
    """
    model, b = _prep(model, b)
    sigma = _sigma(model, cfg)
    gamma = resolve_gamma(model, cfg, sigma)
    guard = cfg.gamma == "auto"
    tiny = cfg.monotone_ulps * np.finfo(np.float64).eps
    ref = None if truth is None else magnitude(truth)

    x = initial_image(op, b, cfg)
    f, data, prior, grad = _terms(model, op, b, cfg.eta, sigma, x)
    trace = SolveTrace(gamma=gamma, algorithm="epnp-gd")

    def record(it, f, data, prior, grad, x):
        if not math.isfinite(f):
            raise NonFiniteError(f"non-finite cost at iteration {it}")
        trace.records.append({
            "iter": it, "f": f, "data_term": data, "prior_term": prior,
            "grad_norm": float(np.linalg.norm(grad)),
            "psnr": None if ref is None else psnr(magnitude(x), ref),
        })

    record(0, f, data, prior, grad, x)
    for it in range(1, cfg.max_iters + 1):
        x_new = x - gamma * grad
        f_new, data_new, prior_new, grad_new = _terms(model, op, b, cfg.eta, sigma, x_new)
        record(it, f_new, data_new, prior_new, grad_new, x_new)
        if f_new - f > tiny * abs(f):
            if guard:
                trace.status = DESCENT_VIOLATION
                logger.warning("cost increased at iteration %d: Lipschitz estimate too small", it)
                return x, trace
        rel = abs(f_new - f) / max(abs(f), np.finfo(np.float64).tiny)
        x, f, grad = x_new, f_new, grad_new
        if rel <= cfg.rel_tol:
            trace.status = CONVERGED
            return x, trace
    trace.status = MAX_ITERS
    return x, trace


def _fixed_point(op, b, cfg, prior_grad, gamma, truth, algorithm):
    ref = None if truth is None else magnitude(truth)
    x = initial_image(op, b, cfg)
    trace = SolveTrace(gamma=gamma, algorithm=algorithm)

    def record(it, x, direction, update_norm):
        resid = op.apply(x) - b
        trace.records.append({
            "iter": it, "f": None, "data_term": 0.5 * float(np.sum(resid * resid)) / cfg.eta**2,
            "prior_term": None, "grad_norm": float(np.linalg.norm(direction)),
            "psnr": None if ref is None else psnr(magnitude(x), ref), "update_norm": update_norm,
        })

    for it in range(1, cfg.max_iters + 1):
        direction = op.adjoint(op.apply(x) - b) / cfg.eta**2 + prior_grad(x)
        if it == 1:
            record(0, x, direction, None)
        step = gamma * direction
        x_new = x - step
        if not np.all(np.isfinite(x_new)):
            raise NonFiniteError(f"non-finite iterate at iteration {it}")
        upd = float(np.linalg.norm(step))
        rel = upd / max(float(np.linalg.norm(x)), np.finfo(np.float64).tiny)
        x = x_new
        if rel <= cfg.rel_tol:
            record(it, x, op.adjoint(op.apply(x) - b) / cfg.eta**2 + prior_grad(x), upd)
            trace.status = CONVERGED
            return x, trace
        record(it, x, direction, upd)
    trace.status = MAX_ITERS
    return x, trace


def red_sd(denoiser, op, b, cfg: SolveConfig, lam: float | None = None, truth=None):
    """RED steepest descent ``x <- x - gamma (A^H(Ax - b)/eta^2 + lam (x - D(x)))``.

    ``lam`` defaults to ``1 / sigma^2``. With ``gamma='auto'`` the step is
    ``1 / (1/eta^2 + 2 lam)``, treating ``x - D(x)`` as 2-Lipschitz for a
    non-expansive ``D``. Stops on relative iterate change ``<= rel_tol``;
    no monotonicity is claimed.
    """
    sigma = cfg.sigma
    if lam is None:
        if sigma is None:
            raise ValueError("RED needs lam or cfg.sigma")
        lam = 1.0 / sigma**2
    b = np.asarray(b, dtype=np.float64)
    gamma = float(cfg.gamma) if cfg.gamma != "auto" else 1.0 / (1.0 / cfg.eta**2 + 2.0 * lam)
    return _fixed_point(op, b, cfg, lambda x: lam * (x - denoiser(x)), gamma, truth, "red-sd")


def score_pnp(net, op, b, cfg: SolveConfig, truth=None):
    """Plug a (non-conservative) noise estimator ``N`` into the EPnP update.

    ``x <- x - gamma (A^H(Ax - b)/eta^2 + N(x)/sigma^2)``; ``gamma='auto'``
    uses the step rule with ``L = 1`` (a spectrally normalised ``N``). No
    cost function exists, so the trace carries update norms only.
    """
    if cfg.sigma is None:
        raise ValueError("score_pnp needs cfg.sigma")
    sigma = cfg.sigma
    b = np.asarray(b, dtype=np.float64)
    gamma = float(cfg.gamma) if cfg.gamma != "auto" else step_size(1.0, cfg.eta, sigma)
    return _fixed_point(op, b, cfg, lambda x: net(x) / sigma**2, gamma, truth, "score-pnp")
