"""Plain convolutional noise estimator used by the RED and score-PnP baselines.

Unlike :class:`~epnp.energy.EnergyModel` this network has no energy: its
output is a free vector field. With ``spectral_norm=True`` each conv layer
is projected after every optimiser step so that its operator norm stays at
most one, which makes the whole network non-expansive (ReLU is 1-Lipschitz).

The network output is the noise estimate ``N(x)``, trained with the DSM
loss; the matching denoiser is ``D(x) = x - N(x)``. With
``spectral_norm=False`` the same network serves as the unconstrained RED
denoiser. The last layer starts at zero so training begins from ``N == 0``;
with a random last layer the output is dominated by image content and the
optimiser settles on ``N ~ 0`` anyway, after a long detour.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from .diffgraph import Graph, ParamBlock, conv2d_kernel, conv2d_transpose_kernel
from .numerics import make_rng


@dataclass
class ScoreNetConfig:
    in_channels: int = 1
    height: int = 32
    width: int = 32
    num_layers: int = 10
    channels: int = 64
    kernel_size: int = 3
    activation: str = "relu"
    spectral_norm: bool = True
    sn_iters: int = 2

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("need at least two layers")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def input_shape(self):
        return self.in_channels, self.height, self.width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv_spectral_norm(w, hw, iters: int = 100, u=None, seed: int = 0, tol: float = 0.0):
    """Operator norm of the zero-padded stride-1 conv with kernel ``w`` on ``hw`` images.

    Returns ``(norm, u)`` where ``u`` is the current right singular vector
    estimate, usable as a warm start.
    """
    if u is None:
        u = make_rng(seed).standard_normal((1, w.shape[1]) + tuple(hw))
    u = u / np.linalg.norm(u)
    s = 0.0
    for _ in range(iters):
        v = conv2d_transpose_kernel(conv2d_kernel(u, w), w, out_hw=hw)
        nv = float(np.linalg.norm(v))
        if nv == 0:
            return 0.0, u
        u = v / nv
        new = np.sqrt(nv)
        if tol and abs(new - s) <= tol * new:
            s = new
            break
        s = new
    return float(np.linalg.norm(conv2d_kernel(u, w))), u


class ScoreNet:
    kind = "scorenet"

    def __init__(self, config: ScoreNetConfig, params: dict[str, ParamBlock], sigma: float = 0.01,
                 metadata: dict | None = None):
        self.config = config
        self.params = params
        self.sigma = float(sigma)
        self.metadata = metadata or {}
        self.lipschitz = None
        self._u = {}

    @classmethod
    def init(cls, config: ScoreNetConfig, sigma: float = 0.01, seed: int = 0, dtype=np.float32) -> "ScoreNet":
        rng = make_rng(seed)
        params = {}
        c_in, k = config.in_channels, config.kernel_size
        for i in range(config.num_layers):
            c_out = config.in_channels if i == config.num_layers - 1 else config.channels
            w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
            if i == config.num_layers - 1:
                w[...] = 0.0
            params[f"conv{i}.weight"] = ParamBlock(f"conv{i}.weight", w.astype(dtype))
            params[f"conv{i}.bias"] = ParamBlock(f"conv{i}.bias", np.zeros(c_out, dtype=dtype))
            c_in = c_out
        net = cls(config, params, sigma)
        if config.spectral_norm:
            net.project(iters=50)
        return net

    @property
    def dtype(self):
        return self.params["conv0.weight"].value.dtype

    def blocks(self):
        return list(self.params.values())

    def astype(self, dtype) -> "ScoreNet":
        out = copy.copy(self)
        out.params = {k: ParamBlock(k, v.value.astype(dtype)) for k, v in self.params.items()}
        out._u = dict(self._u)
        return out

    def copy(self) -> "ScoreNet":
        out = self.astype(self.dtype)
        out.metadata = copy.deepcopy(self.metadata)
        return out

    # ----------------------------------------------------------- normalisation

    def project(self, iters: int | None = None, margin: float = 0.0):
        """Scale every conv kernel so its estimated operator norm is ``<= 1``."""
        iters = self.config.sn_iters if iters is None else iters
        hw = (self.config.height, self.config.width)
        for i in range(self.config.num_layers):
            block = self.params[f"conv{i}.weight"]
            w = block.value.astype(np.float64)
            s, u = conv_spectral_norm(w, hw, iters, self._u.get(i), seed=i)
            self._u[i] = u
            s *= 1 + margin
            if s > 1:
                block.value[...] = (w / s).astype(block.value.dtype)

    def after_step(self):
        if self.config.spectral_norm:
            self.project()

    def finalize(self):
        if self.config.spectral_norm:
            self.project(iters=200, margin=1e-3)

    def layer_spectral_norms(self, iters: int = 200) -> list[float]:
        hw = (self.config.height, self.config.width)
        return [conv_spectral_norm(self.params[f"conv{i}.weight"].value.astype(np.float64), hw, iters, seed=100 + i)[0]
                for i in range(self.config.num_layers)]

    # ------------------------------------------------------------------ graphs

    def build_score(self, graph: Graph, x):
        p = {k: graph.param(v) for k, v in self.params.items()}
        h = x
        last = self.config.num_layers - 1
        for i in range(self.config.num_layers):
            h = graph.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            if i < last:
                h = graph.pointwise(h, self.config.activation)
        return h

    def noise(self, x):
        """Noise estimate ``N(x)`` for one ``[C, H, W]`` image or a batch."""
        x = np.asarray(x)
        single = x.ndim == 3
        xb = (x[None] if single else x).astype(self.dtype, copy=False)
        g = Graph()
        out = self.build_score(g, g.constant(xb)).value
        out = out.astype(np.result_type(x.dtype, out.dtype), copy=False)
        return out[0] if single else out

    def denoise(self, x):
        return np.asarray(x) - self.noise(x)

    def __call__(self, x):
        return self.noise(x)

    def __repr__(self):
        c = self.config
        return f"ScoreNet({c.num_layers}x{c.channels}ch, sn={c.spectral_norm})"
