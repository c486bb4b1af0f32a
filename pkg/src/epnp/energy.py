"""Scalar energy network and its shared-weight gradient network.

The energy ``psi(x)`` is a stack of ``conv -> activation`` layers followed by
a head that reduces the features to one number per image. The score
``H(x) = grad_x psi(x)`` is *not* obtained by running autodiff at solve time:
:meth:`EnergyModel.build` walks the recorded layer list backwards and emits
``head^T -> activation' gate -> conv^T`` for each layer, reusing the very same
parameter blocks. The result is an explicit first-order graph whose output is
a conservative vector field by construction, and which can itself be
differentiated for training.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from .diffgraph import ACTIVATIONS, Graph, ParamBlock
from .numerics import make_rng


@dataclass
class EnergyNetConfig:
    in_channels: int = 1
    height: int = 32
    width: int = 32
    num_conv_layers: int = 5
    channels: int = 64
    kernel_size: int = 3
    activation: str = "relu"
    head: str = "dense"
    strides: tuple = ()
    pool_after: tuple = ()

    def __post_init__(self):
        self.strides = tuple(self.strides) or (1,) * self.num_conv_layers
        self.pool_after = tuple(self.pool_after)
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("dense", "sum"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.num_conv_layers < 1:
            raise ValueError("need at least one conv layer")
        if len(self.strides) != self.num_conv_layers:
            raise ValueError("strides must list one entry per conv layer")
        if any(i < 0 or i >= self.num_conv_layers for i in self.pool_after):
            raise ValueError("pool_after indexes a missing conv layer")

    def feature_shape(self) -> tuple[int, int, int]:
        """Shape of the features entering the head."""
        h, w = self.height, self.width
        for i, s in enumerate(self.strides):
            h, w = -(-h // s), -(-w // s)
            if i in self.pool_after:
                if h % 2 or w % 2:
                    raise ValueError("average pooling needs even feature sizes")
                h, w = h // 2, w // 2
        return self.channels, h, w

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.in_channels, self.height, self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["pool_after"] = list(self.pool_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyNetConfig":
        return cls(**d)


def init_params(config: EnergyNetConfig, rng: np.random.Generator, dtype=np.float32,
                head_scale: float = 1.0) -> dict[str, ParamBlock]:
    """He-initialised convs; head weights drawn at ``1/sqrt(fan_in)`` times ``head_scale``."""
    params = {}
    c_in = config.in_channels
    k = config.kernel_size
    for i in range(config.num_conv_layers):
        fan_in = c_in * k * k
        w = rng.standard_normal((config.channels, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        params[f"conv{i}.weight"] = ParamBlock(f"conv{i}.weight", w.astype(dtype))
        params[f"conv{i}.bias"] = ParamBlock(f"conv{i}.bias", np.zeros(config.channels, dtype=dtype))
        c_in = config.channels
    c, h, w_ = config.feature_shape()
    if config.head == "dense":
        fan_in = c * h * w_
        hw = rng.standard_normal((1, fan_in)) / np.sqrt(fan_in)
    else:
        hw = rng.standard_normal((1, c, 1, 1)) / np.sqrt(c)
    params["head.weight"] = ParamBlock("head.weight", (head_scale * hw).astype(dtype))
    params["head.bias"] = ParamBlock("head.bias", np.zeros(1, dtype=dtype))
    return params


@dataclass
class _LayerRecord:
    kind: str
    index: int
    pre: object = None
    in_hw: tuple = ()


class EnergyModel:
    """Energy network ``psi_theta`` with training noise level ``sigma``.

    ``decoder`` is empty for every legitimate model. It exists so tests and
    ``verify`` can build a deliberately broken model whose gradient network
    uses its own copy of the conv/head weights.
    """

    kind = "energy"

    def __init__(self, config: EnergyNetConfig, params: dict[str, ParamBlock], sigma: float,
                 lipschitz: dict | None = None, metadata: dict | None = None,
                 decoder: dict[str, ParamBlock] | None = None):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.config = config
        self.params = params
        self.sigma = float(sigma)
        self.lipschitz = lipschitz
        self.metadata = metadata or {}
        self.decoder = decoder or {}

    @classmethod
    def init(cls, config: EnergyNetConfig, sigma: float, seed: int = 0, dtype=np.float32,
             head_scale: float = 1.0) -> "EnergyModel":
        """Random weights; ``head_scale=0`` starts training from ``H == 0``."""
        return cls(config, init_params(config, make_rng(seed), dtype, head_scale), sigma)

    @classmethod
    def zeros(cls, config: EnergyNetConfig, sigma: float, head_bias: float = 0.0, dtype=np.float64) -> "EnergyModel":
        params = init_params(config, make_rng(0), dtype)
        for p in params.values():
            p.value[...] = 0
        params["head.bias"].value[...] = head_bias
        return cls(config, params, sigma)

    # ------------------------------------------------------------------ plumbing

    @property
    def dtype(self):
        return self.params["conv0.weight"].value.dtype

    @property
    def L(self) -> float | None:
        return None if self.lipschitz is None else self.lipschitz["L"]

    def blocks(self) -> list[ParamBlock]:
        """Every stored block in declaration order, decoder copies last."""
        return list(self.params.values()) + list(self.decoder.values())

    def astype(self, dtype) -> "EnergyModel":
        out = copy.copy(self)
        out.params = {k: ParamBlock(k, v.value.astype(dtype)) for k, v in self.params.items()}
        out.decoder = {k: ParamBlock(k, v.value.astype(dtype)) for k, v in self.decoder.items()}
        return out

    def copy(self) -> "EnergyModel":
        out = self.astype(self.dtype)
        out.metadata = copy.deepcopy(self.metadata)
        out.lipschitz = copy.deepcopy(self.lipschitz)
        return out

    def decoupled(self, seed: int = 1, scale: float = 1.0) -> "EnergyModel":
        """Copy whose gradient network uses independently drawn weights."""
        rng = make_rng(seed)
        out = self.copy()
        out.decoder = {}
        for name, block in self.params.items():
            if name.endswith(".weight"):
                w = block.value
                fresh = rng.standard_normal(w.shape) * (np.std(w) + 1e-12) * scale
                out.decoder[name] = ParamBlock("decoder." + name, fresh.astype(w.dtype))
        return out

    def _layers(self):
        for i in range(self.config.num_conv_layers):
            yield "conv", i
            if i in self.config.pool_after:
                yield "pool", i

    def _as_batch(self, x):
        x = np.asarray(x)
        single = x.ndim == 3
        if x.ndim == 2 and self.config.in_channels == 1:
            x, single = x[None], True
        if single:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.config.input_shape}")
        return x.astype(self.dtype, copy=False), single

    # -------------------------------------------------------------------- graphs

    def build(self, graph: Graph, x, with_score: bool = True):
        """Add ``psi`` and (optionally) ``H`` for the batch ``x`` to ``graph``.

        Returns ``(energy_node [N], score_node [N, C, H, W] or None)``.
        """
        act = self.config.activation
        p = {k: graph.param(v) for k, v in self.params.items()}
        dec = {k: graph.param(v) for k, v in self.decoder.items()}
        records = []
        h = x
        for kind, i in self._layers():
            if kind == "conv":
                in_hw = h.shape[2:]
                stride = self.config.strides[i]
                pre = graph.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride)
                h = graph.pointwise(pre, act)
                records.append(_LayerRecord("conv", i, pre, in_hw))
            else:
                h = graph.avg_pool(h)
                records.append(_LayerRecord("pool", i))
        n = h.shape[0]
        feat_shape = h.shape
        hw = p["head.weight"]
        if self.config.head == "dense":
            e = graph.linear(graph.reshape(h, (n, -1)), hw, p["head.bias"])
            energy = graph.reshape(e, (n,))
        else:
            e = graph.conv2d(h, hw, p["head.bias"], pad=0)
            energy = graph.sum(e, axis=(1, 2, 3))
        if not with_score:
            return energy, None

        # Adjoint chain, mechanically mirrored from the records above.
        hw_t = dec.get("head.weight", hw)
        dtype = h.value.dtype
        if self.config.head == "dense":
            ones = graph.constant(np.ones((n, 1), dtype=dtype))
            g = graph.reshape(graph.linear(ones, hw_t, transpose=True), feat_shape)
        else:
            ones = graph.constant(np.ones((n, 1) + feat_shape[2:], dtype=dtype))
            g = graph.conv2d_transpose(ones, hw_t, pad=0)
        for rec in reversed(records):
            if rec.kind == "conv":
                i = rec.index
                g = graph.mul(g, graph.pointwise_deriv(rec.pre, act))
                w = dec.get(f"conv{i}.weight", p[f"conv{i}.weight"])
                g = graph.conv2d_transpose(g, w, stride=self.config.strides[i], out_hw=rec.in_hw)
            else:
                g = graph.avg_pool_transpose(g)
        return energy, g

    def build_score(self, graph: Graph, x):
        return self.build(graph, x)[1]

    # ---------------------------------------------------------------- evaluation

    def energy_and_score(self, x):
        xb, single = self._as_batch(x)
        g = Graph()
        e, s = self.build(g, g.constant(xb))
        if single:
            return float(e.value[0]), s.value[0]
        return e.value, s.value

    def energy(self, x):
        xb, single = self._as_batch(x)
        g = Graph()
        e, _ = self.build(g, g.constant(xb), with_score=False)
        return float(e.value[0]) if single else e.value

    def score(self, x):
        return self.energy_and_score(x)[1]

    def denoise(self, x_noisy):
        return np.asarray(x_noisy) - self.score(x_noisy)

    def __repr__(self):
        c = self.config
        return (f"EnergyModel({c.num_conv_layers}x{c.channels}ch k{c.kernel_size} {c.activation}, "
                f"head={c.head}, sigma={self.sigma})")


class QuadraticEnergy:
    """Stub energy ``psi(x) = 0.5 <x, S x> + offset``.

    ``S`` is a scalar or per-pixel array (a diagonal operator); ``matrix``
    instead gives a full matrix acting on the flattened image. A
    non-symmetric matrix yields a score ``S x`` that is deliberately not a
    gradient field.
    """

    kind = "quadratic"

    def __init__(self, shape, S=1.0, matrix=None, offset: float = 0.0, sigma: float = 1.0,
                 L: float | None = None):
        self.shape = tuple(shape)
        self.S = np.asarray(S, dtype=np.float64)
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=np.float64)
        self.offset = offset
        self.sigma = sigma
        self.lipschitz = None if L is None else {"L": L}
        self.dtype = np.dtype(np.float64)
        self.config = None

    @property
    def L(self):
        return None if self.lipschitz is None else self.lipschitz["L"]

    def astype(self, dtype):
        return self

    def _apply(self, xb):
        if self.matrix is not None:
            return (xb.reshape(xb.shape[0], -1) @ self.matrix.T).reshape(xb.shape)
        return xb * self.S

    def energy_and_score(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.shape
        xb = x[None] if single else x
        s = self._apply(xb)
        e = 0.5 * np.sum((xb * s).reshape(xb.shape[0], -1), axis=1) + self.offset
        if single:
            return float(e[0]), s[0]
        return e, s

    def energy(self, x):
        return self.energy_and_score(x)[0]

    def score(self, x):
        return self.energy_and_score(x)[1]

    def denoise(self, x):
        return np.asarray(x) - self.score(x)


# ----------------------------------------------------------- verification ops


def _f64(model):
    return model.astype(np.float64) if getattr(model, "dtype", np.float64) != np.float64 else model


def _batched_score(model, xs: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [model.energy_and_score(xs[i : i + chunk])[1] for i in range(0, len(xs), chunk)]
    return np.concatenate(out)


def jacobian_symmetry(model, x, eps: float = 1e-5, max_coords: int = 64, rng=None) -> float:
    """``max |J - J^T| / max |J|`` of the score Jacobian on a coordinate subset.

    Columns come from central differences of the score in float64. With
    ``J == 0`` the ratio is reported as 0.
    """
    model = _f64(model)
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    rng = rng if rng is not None else np.random.default_rng(0)
    coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
    k = len(coords)
    probes = np.repeat(x[None], 2 * k, axis=0).reshape(2 * k, -1)
    probes[np.arange(k), coords] += eps
    probes[k + np.arange(k), coords] -= eps
    h = _batched_score(model, probes.reshape((2 * k,) + x.shape)).reshape(2 * k, -1)
    cols = (h[:k] - h[k:]) / (2 * eps)  # cols[j] = dH / dx_{coords[j]}
    J = cols[:, coords].T  # J[i, j] = dH_i / dx_j on the subset
    scale = np.max(np.abs(J))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(J - J.T)) / scale)


def _segment_integral(model, a, b, steps):
    t = np.linspace(0.0, 1.0, steps + 1)
    d = b - a
    pts = a[None] + t.reshape((-1,) + (1,) * a.ndim) * d[None]
    h = _batched_score(model, pts)
    vals = np.sum((h * d[None]).reshape(steps + 1, -1), axis=1)
    return float(np.sum(vals[1:] + vals[:-1]) / (2 * steps))


def line_integral_energy(model, a, x, path: str = "straight", steps: int = 1024,
                         offset=None, seed: int = 0) -> float:
    """Trapezoid estimate of the score's line integral from ``a`` to ``x``.

    ``path="two-segment"`` goes through the midpoint displaced by ``offset``
    (default: a random direction with half the length of ``x - a``), using
    ``steps // 2`` intervals per leg. For a gradient field both paths
    estimate ``psi(x) - psi(a)``.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    model = _f64(model)
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if path == "straight":
        return _segment_integral(model, a, x, steps)
    if path not in ("two-segment", "two-segment-via-midpoint-offset"):
        raise ValueError(f"unknown path {path!r}")
    if offset is None:
        d = make_rng(seed).standard_normal(a.shape)
        offset = d / np.linalg.norm(d) * 0.5 * np.linalg.norm(x - a)
    mid = 0.5 * (a + x) + offset
    half = max(steps // 2, 1)
    return _segment_integral(model, a, mid, half) + _segment_integral(model, mid, x, half)


def score_gradient_error(model, x, eps: float = 1e-6, max_coords: int | None = None, rng=None) -> float:
    """Relative L2 error between the score and central differences of the energy."""
    model = _f64(model)
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    rng = rng if rng is not None else np.random.default_rng(0)
    coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
    k = len(coords)
    probes = np.repeat(x[None], 2 * k, axis=0).reshape(2 * k, -1)
    probes[np.arange(k), coords] += eps
    probes[k + np.arange(k), coords] -= eps
    e = np.concatenate([np.atleast_1d(model.energy_and_score(probes[i : i + 64].reshape((-1,) + x.shape))[0])
                        for i in range(0, 2 * k, 64)])
    fd = (e[:k] - e[k:]) / (2 * eps)
    h = np.asarray(model.score(x)).reshape(-1)[coords]
    denom = np.linalg.norm(fd)
    return float(np.linalg.norm(h - fd) / denom) if denom > 0 else float(np.linalg.norm(h))


__all__ = [
    "EnergyNetConfig",
    "EnergyModel",
    "QuadraticEnergy",
    "init_params",
    "jacobian_symmetry",
    "line_integral_energy",
    "score_gradient_error",
]
