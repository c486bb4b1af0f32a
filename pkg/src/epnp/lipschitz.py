"""Lipschitz constant of the score network and the guaranteed step size.

Because the score of an energy model is a gradient field, its Jacobian is
symmetric, so power iteration with finite-difference Jacobian-vector
products converges to the local operator norm. ``estimate_L`` takes the
maximum over a set of probe points and multiplies by a safety factor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

DEFAULT_SAFETY = 1.1


@dataclass
class LipschitzEstimate:
    L: float
    method: str
    num_probes: int
    safety_factor: float = DEFAULT_SAFETY
    raw_max: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _f64(model):
    return model.astype(np.float64) if getattr(model, "dtype", np.float64) != np.float64 else model


def _score_pair(model, a, b):
    _, h = model.energy_and_score(np.stack([a, b]))
    return h[0], h[1]


def local_spectral_radius(model, x, iters: int = 100, eps: float = 1e-4, seed: int = 0,
                          tol: float = 1e-12) -> float:
    """Dominant ``|eigenvalue|`` of the score Jacobian at ``x``.

    Jacobian-vector products are central differences
    ``(H(x + eps v) - H(x - eps v)) / (2 eps)`` with ``||v|| = 1``.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    model = _f64(model)
    x = np.asarray(x, dtype=np.float64)
    if eps <= np.finfo(np.float64).eps * max(1.0, float(np.max(np.abs(x)))) * 16:
        raise ValueError("eps is too small for the precision of x")
    v = make_rng(seed).standard_normal(x.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hp, hm = _score_pair(model, x + eps * v, x - eps * v)
        jv = (hp - hm) / (2 * eps)
        new = float(np.linalg.norm(jv))
        if new == 0.0:
            return 0.0
        v = jv / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    return lam


def _ratio(model, x1, x2, min_sep):
    h1, h2 = _score_pair(model, x1, x2)
    return float(np.linalg.norm(h1 - h2) / max(np.linalg.norm(x1 - x2), min_sep))


def pairwise_ascent(model, x1, x2, steps: int = 200, seed: int = 0, min_sep: float = 1e-6) -> float:
    """Largest ``||H(x1) - H(x2)|| / ||x1 - x2||`` found by random local search.

    Each step perturbs both points along random directions (step length
    relative to their separation) or pulls ``x2`` halfway towards ``x1``;
    moves that raise the ratio are kept and the step length adapts.
    """
    model = _f64(model)
    rng = make_rng(seed)
    x1 = np.asarray(x1, dtype=np.float64).copy()
    x2 = np.asarray(x2, dtype=np.float64).copy()
    sep = np.linalg.norm(x1 - x2)
    if sep < min_sep:
        d = rng.standard_normal(x1.shape)
        x2 = x1 + min_sep * d / np.linalg.norm(d)
    best = _ratio(model, x1, x2, min_sep)
    step = 0.3
    for _ in range(steps):
        sep = max(np.linalg.norm(x1 - x2), min_sep)
        if rng.random() < 0.25:
            c1, c2 = x1, x1 + 0.5 * (x2 - x1)
            if np.linalg.norm(c2 - c1) < min_sep:
                continue
        else:
            d1 = rng.standard_normal(x1.shape)
            d2 = rng.standard_normal(x1.shape)
            scale = step * sep / math.sqrt(x1.size)
            c1, c2 = x1 + scale * d1, x2 + scale * d2
        r = _ratio(model, c1, c2, min_sep)
        if r > best:
            best, x1, x2 = r, c1, c2
            step = min(step * 1.5, 2.0)
        else:
            step = max(step * 0.7, 1e-3)
    return best


def make_probes(images, n: int = 20, sigma: float = 0.01, seed: int = 0):
    """Half training images plus ``sigma`` noise, half uniform ``[0, 1]`` images."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("need at least one image to shape the probes")
    rng = make_rng(seed)
    probes = []
    for i in range(n):
        if i % 2 == 0:
            base = images[rng.integers(len(images))]
            probes.append(base + sigma * rng.standard_normal(base.shape))
        else:
            probes.append(rng.uniform(0.0, 1.0, images[0].shape))
    return probes


def estimate_L(model, probes, iters: int = 100, eps: float = 1e-4, safety_factor: float = DEFAULT_SAFETY,
               seed: int = 0) -> LipschitzEstimate:
    """``safety_factor * max`` local spectral radius over ``probes``.

    No clamping is applied: values above one are reported as found.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("empty probe set")
    if len(probes) < 10:
        logger.warning("only %d Lipschitz probes (>= 10 recommended)", len(probes))
    model = _f64(model)
    radii = [local_spectral_radius(model, p, iters=iters, eps=eps, seed=seed + i) for i, p in enumerate(probes)]
    raw = max(radii)
    return LipschitzEstimate(safety_factor * raw, "jacobian-power", len(probes), safety_factor, raw)


def step_size(L: float, eta: float, sigma: float) -> float:
    """``1 / (1 / eta^2 + L / sigma^2)``, the reciprocal of the MAP gradient's Lipschitz bound."""
    if eta <= 0 or sigma <= 0:
        raise ValueError("eta and sigma must be positive")
    if L < 0:
        raise ValueError("L must be non-negative")
    return 1.0 / (1.0 / eta**2 + L / sigma**2)
