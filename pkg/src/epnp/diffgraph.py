"""A small reverse-mode tape over a fixed set of array ops.

The op set is exactly what the energy network, its explicit gradient network
and the DSM loss need: 2-D convolution and its adjoint, dense layers,
pointwise activations and their derivatives, and a little glue. Second
derivatives are never taken by the tape itself; ``pointwise_deriv`` is an op
in its own right whose vector-Jacobian product uses the activation's second
derivative, which keeps a gradient network first-order.

Arrays inside a graph are batched: images are ``[N, C, H, W]``.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "softplus", "silu", "identity")


# --------------------------------------------------------------------- kernels


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(x, k, stride, pad):
    """``[N, C, Ho, Wo, k, k]`` strided view of the zero-padded input."""
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _check_conv(x, w, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x [N,C,H,W] and w [O,C,k,k]")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ValueError("kernels must be square with odd size")
    return k, (k // 2 if pad is None else pad)


def conv2d_kernel(x, w, bias=None, stride=1, pad=None):
    """Cross-correlation with zero padding; ``pad=None`` means ``k // 2``."""
    k, pad = _check_conv(x, w, pad)
    win = _windows(x, k, stride, pad)
    out = np.tensordot(w, win, axes=([1, 2, 3], [1, 4, 5]))  # [O, N, Ho, Wo]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def transpose_out_size(n_out, k, stride, pad):
    """Input size of the forward conv that a transpose conv is consistent with."""
    return (n_out - 1) * stride + k - 2 * pad + (stride - 1)


def conv2d_transpose_kernel(y, w, stride=1, pad=None, out_hw=None):
    """Exact adjoint of :func:`conv2d_kernel` (without bias) in the ``<.,.>`` sense.

    ``out_hw`` defaults to ``stride * (Ho, Wo)`` shifted by the padding, which
    for odd ``k`` with ``pad = k // 2`` is the size a stride-``s`` forward conv
    maps onto ``(Ho, Wo)``.
    """
    if y.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d_transpose expects y [N,O,Ho,Wo] and w [O,C,k,k]")
    if y.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {y.shape[1]}, kernel emits {w.shape[0]}")
    k = w.shape[2]
    pad = k // 2 if pad is None else pad
    n, _, ho, wo = y.shape
    if out_hw is None:
        out_hw = (transpose_out_size(ho, k, stride, pad), transpose_out_size(wo, k, stride, pad))
    h, wd = out_hw
    if _out_size(h, k, stride, pad) != ho or _out_size(wd, k, stride, pad) != wo:
        raise ValueError(f"output size {out_hw} is inconsistent with input {(ho, wo)} at stride {stride}")
    cols = np.tensordot(y, w, axes=([1], [0]))  # [N, Ho, Wo, C, k, k]
    c = w.shape[1]
    hp, wp = h + 2 * pad, wd + 2 * pad
    # Room for windows that would run past the padded edge when stride > 1.
    acc = np.zeros((n, c, hp + stride, wp + stride), dtype=np.result_type(y, w))
    for i, j in itertools.product(range(k), range(k)):
        acc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(acc[:, :, pad : pad + h, pad : pad + wd])


def conv2d_weight_grad(x, gy, k, stride=1, pad=None):
    """``d<conv2d(x, w), gy> / dw`` for a ``k x k`` kernel."""
    pad = k // 2 if pad is None else pad
    win = _windows(x, k, stride, pad)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]


def avg_pool_kernel(x, factor=2):
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError("pooling factor must divide the spatial size")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def avg_pool_transpose_kernel(y, factor=2):
    return np.repeat(np.repeat(y, factor, axis=2), factor, axis=3) / factor**2


def activation(x, kind):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "softplus":
        return np.logaddexp(0, x)
    if kind == "silu":
        return x * _sigmoid(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_deriv(x, kind):
    """First derivative; the ReLU derivative at exactly 0 is taken as 0."""
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "softplus":
        return _sigmoid(x)
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1 + x * (1 - s))
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_deriv2(x, kind):
    if kind in ("relu", "identity"):
        # ReLU gate is locally constant almost everywhere.
        return np.zeros_like(x)
    if kind == "softplus":
        s = _sigmoid(x)
        return s * (1 - s)
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1 - s) * (2 + x * (1 - 2 * s))
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid(x):
    # Stable for both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


# ----------------------------------------------------------------------- graph


class ParamBlock:
    """A named trainable array with its gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "vjp", "block")

    def __init__(self, id, op, inputs, value, requires_grad, vjp=None, block=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.vjp = vjp
        self.block = block

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


class Graph:
    """Eagerly evaluated computation graph recorded for one reverse pass.

    Nodes are appended in evaluation order, so the node list is already a
    topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def _add(self, op, inputs, value, vjp=None, block=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), value, requires_grad, vjp if requires_grad else None, block)
        self.nodes.append(node)
        return node

    # leaves

    def input(self, value, requires_grad=True) -> Node:
        return self._add("input", (), np.asarray(value), requires_grad=requires_grad)

    def constant(self, value) -> Node:
        return self.input(value, requires_grad=False)

    def param(self, block: ParamBlock) -> Node:
        """Leaf for a parameter block; repeated calls reuse one node."""
        node = self._param_nodes.get(id(block))
        if node is None:
            node = self._add("param", (), block.value, block=block, requires_grad=True)
            self._param_nodes[id(block)] = node
        return node

    # ops

    def conv2d(self, x: Node, w: Node, b: Node | None = None, stride=1, pad=None) -> Node:
        k = w.value.shape[2]
        pad_ = k // 2 if pad is None else pad
        out = conv2d_kernel(x.value, w.value, None if b is None else b.value, stride, pad)
        in_hw = x.value.shape[2:]

        def vjp(g):
            gx = conv2d_transpose_kernel(g, w.value, stride, pad_, in_hw)
            gw = conv2d_weight_grad(x.value, g, k, stride, pad_)
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        inputs = (x, w) if b is None else (x, w, b)
        return self._add("conv2d", inputs, out, vjp)

    def conv2d_transpose(self, y: Node, w: Node, stride=1, pad=None, out_hw=None) -> Node:
        k = w.value.shape[2]
        pad_ = k // 2 if pad is None else pad
        out = conv2d_transpose_kernel(y.value, w.value, stride, pad_, out_hw)

        def vjp(g):
            gy = conv2d_kernel(g, w.value, None, stride, pad_)
            # <convT(y, w), g> = <y, conv(g, w)>: the weight gradient swaps roles.
            gw = conv2d_weight_grad(g, y.value, k, stride, pad_)
            return gy, gw

        return self._add("conv2d_transpose", (y, w), out, vjp)

    def linear(self, x: Node, W: Node, b: Node | None = None, transpose=False) -> Node:
        """``x @ W.T + b`` on ``[N, in]`` rows, or ``x @ W`` when ``transpose``."""
        xv, Wv = x.value, W.value
        n_in = Wv.shape[0] if transpose else Wv.shape[1]
        if xv.ndim != 2 or xv.shape[1] != n_in:
            raise ValueError(f"linear: expected [N, {n_in}] input, got {xv.shape}")
        out = xv @ Wv if transpose else xv @ Wv.T
        if b is not None:
            out = out + b.value

        def vjp(g):
            if transpose:
                gx, gW = g @ Wv.T, xv.T @ g
            else:
                gx, gW = g @ Wv, g.T @ xv
            if b is None:
                return gx, gW
            return gx, gW, g.sum(axis=0)

        inputs = (x, W) if b is None else (x, W, b)
        return self._add("linear", inputs, out, vjp)

    def pointwise(self, x: Node, kind: str) -> Node:
        out = activation(x.value, kind)
        return self._add("pointwise", (x,), out, lambda g: (g * activation_deriv(x.value, kind),))

    def pointwise_deriv(self, x: Node, kind: str) -> Node:
        out = activation_deriv(x.value, kind)
        return self._add("pointwise_deriv", (x,), out, lambda g: (g * activation_deriv2(x.value, kind),))

    def avg_pool(self, x: Node, factor=2) -> Node:
        out = avg_pool_kernel(x.value, factor)
        return self._add("avg_pool", (x,), out, lambda g: (avg_pool_transpose_kernel(g, factor),))

    def avg_pool_transpose(self, y: Node, factor=2) -> Node:
        out = avg_pool_transpose_kernel(y.value, factor)
        return self._add("avg_pool_transpose", (y,), out, lambda g: (avg_pool_kernel(g, factor),))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self._add("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
        return self._add("add", (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        return self._add("mul", (a, b), a.value * b.value, lambda g: (g * b.value, g * a.value))

    def scale(self, x: Node, c: float) -> Node:
        return self._add("mul", (x,), x.value * c, lambda g: (g * c,))

    def sum(self, x: Node, axis=None) -> Node:
        """Sum over ``axis`` (all axes if ``None``); output keeps no singleton dims."""
        shape = x.value.shape
        out = x.value.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            axes = (axis,) if isinstance(axis, int) else axis
            return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

        return self._add("sum", (x,), np.asarray(out), vjp)

    def reshape(self, x: Node, shape) -> Node:
        old = x.value.shape
        return self._add("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))

    def slice(self, x: Node, index) -> Node:
        shape, dtype = x.value.shape, x.value.dtype

        def vjp(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[index] = g
            return (gx,)

        return self._add("slice", (x,), x.value[index], vjp)

    # reverse pass

    def backward(self, output: Node, seed=None) -> dict[Node, np.ndarray]:
        """Accumulate ``seed``-weighted gradients into every leaf.

        Parameter gradients are *added* to their blocks' ``grad`` arrays;
        the returned mapping holds the gradient of every reached leaf node
        (inputs and parameters).
        """
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output {output.value.shape}")
        grads: dict[int, np.ndarray] = {output.id: seed}
        leaves: dict[Node, np.ndarray] = {}
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.vjp is None:
                leaves[node] = g
                if node.block is not None:
                    node.block.grad += g
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        return leaves


def backward(graph: Graph, output: Node, seed=None) -> dict[Node, np.ndarray]:
    return graph.backward(output, seed)


def grad_check(
    build: Callable[[Graph], Node],
    params: list[ParamBlock],
    eps: float = 1e-5,
    max_coords: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct a scalar-output graph from ``graph.param`` leaves.
    Blocks larger than ``max_coords`` are checked on a random coordinate
    subset. Relative error per coordinate is ``|ga - gfd| / max(|ga|, |gfd|)``,
    with coordinates whose gradients are both negligible skipped.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    g = Graph()
    out = build(g)
    if out.value.size != 1:
        raise ValueError("grad_check needs a scalar output")
    g.backward(out)
    analytic = {id(p): p.grad.copy() for p in params}

    scale = 0.0
    pairs = []
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(build(Graph()).value)
            flat[c] = orig - eps
            fm = float(build(Graph()).value)
            flat[c] = orig
            fd = (fp - fm) / (2 * eps)
            ga = float(analytic[id(p)].reshape(-1)[c])
            pairs.append((ga, fd))
            scale = max(scale, abs(ga), abs(fd))
    worst = 0.0
    floor = 1e-12 * max(scale, 1e-300)
    for ga, fd in pairs:
        denom = max(abs(ga), abs(fd))
        if denom <= floor:
            continue
        worst = max(worst, abs(ga - fd) / denom)
    return worst
