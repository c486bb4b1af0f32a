"""Linear measurement operators with exact adjoints, masks and coil maps.

Images enter every operator as real arrays ``[C, H, W]``. The multicoil
Fourier operator takes ``C = 2`` (real, imaginary) and works in complex
arithmetic internally; its measurements are the sampled k-space lines of
every coil, again split into real and imaginary channels.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .numerics import channels_to_complex, complex_to_channels, gaussian, make_rng

CENTER_FRACTION = 0.04


class LinearOperator:
    """A forward map with its adjoint on real arrays.

    Subclasses implement ``_apply`` and ``_adjoint``; ``scale`` multiplies
    both, which is how :func:`normalize` rescales an operator.
    """

    name = "linear"

    def __init__(self, ishape, oshape, scale: float = 1.0):
        self.ishape = tuple(ishape)
        self.oshape = tuple(oshape)
        self.scale = float(scale)
        self._norm = None

    def apply(self, x):
        x = np.asarray(x)
        if x.shape != self.ishape:
            raise ValueError(f"{self.name}: expected input {self.ishape}, got {x.shape}")
        y = self._apply(x)
        return y if self.scale == 1.0 else y * self.scale

    def adjoint(self, y):
        y = np.asarray(y)
        if y.shape != self.oshape:
            raise ValueError(f"{self.name}: expected measurement {self.oshape}, got {y.shape}")
        x = self._adjoint(y)
        return x if self.scale == 1.0 else x * self.scale

    def normal(self, x):
        return self.adjoint(self.apply(x))

    @property
    def norm(self) -> float:
        if self._norm is None:
            self._norm = operator_norm(self)
        return self._norm

    def scaled(self, factor: float) -> "LinearOperator":
        out = copy.copy(self)
        out.scale = self.scale * factor
        out._norm = None if self._norm is None else self._norm * abs(factor)
        return out

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError


class IdentityOp(LinearOperator):
    name = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)
        self._norm = 1.0

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class MaskOp(LinearOperator):
    """Pixelwise projection onto the observed pixels (inpainting)."""

    name = "mask"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        super().__init__(mask.shape, mask.shape)
        self.mask = mask
        self.empty = not mask.any()
        self._norm = 0.0 if self.empty else 1.0

    def _apply(self, x):
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def _adjoint(self, y):
        return np.where(self.mask, y, 0.0).astype(y.dtype, copy=False)


class MatrixOp(LinearOperator):
    """Dense matrix on the flattened input; handy for tests and oracles."""

    name = "matrix"

    def __init__(self, matrix, ishape=None):
        matrix = np.asarray(matrix, dtype=np.float64)
        ishape = (matrix.shape[1],) if ishape is None else tuple(ishape)
        super().__init__(ishape, (matrix.shape[0],))
        self.matrix = matrix

    def _apply(self, x):
        return self.matrix @ x.reshape(-1)

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.ishape)


@dataclass
class SamplingMask:
    """Cartesian k-space mask: ``lines[k]`` keeps the whole row ``k``.

    Row indices are in centred k-space order (DC at ``H // 2``).
    """

    lines: np.ndarray
    width: int
    accel: float
    seed: int | None = None

    @property
    def height(self) -> int:
        return len(self.lines)

    @property
    def array(self) -> np.ndarray:
        """Boolean ``[H, W]`` mask."""
        return np.repeat(self.lines[:, None], self.width, axis=1)

    @property
    def num_lines(self) -> int:
        return int(self.lines.sum())

    @classmethod
    def from_array(cls, mask, accel=None, seed=None) -> "SamplingMask":
        mask = np.asarray(mask) != 0
        lines = mask.any(axis=1)
        if not np.array_equal(mask, np.repeat(lines[:, None], mask.shape[1], axis=1)):
            raise ValueError("mask is not Cartesian (rows must be all-or-nothing)")
        accel = mask.shape[0] / max(lines.sum(), 1) if accel is None else accel
        return cls(lines, mask.shape[1], accel, seed)


def center_lines(height: int) -> np.ndarray:
    n = math.ceil(CENTER_FRACTION * height)
    start = height // 2 - n // 2
    return np.arange(start, start + n)


def variable_density_mask(height: int, accel: float, seed: int = 0, width: int | None = None,
                          density_width: float = 0.25) -> SamplingMask:
    """Random Cartesian line mask with ``ceil(height / accel)`` lines.

    The central ``ceil(4% * height)`` lines are always kept. The remaining
    lines are drawn without replacement with probability proportional to
    ``exp(-d**2 / (2 * (density_width * height)**2))``, ``d`` being the
    distance to the k-space centre.
    """
    if accel < 1:
        raise ValueError("acceleration must be >= 1")
    if accel > height:
        raise ValueError("acceleration exceeds the number of lines")
    width = height if width is None else width
    target = math.ceil(height / accel)
    lines = np.zeros(height, dtype=bool)
    center = center_lines(height)[:target]
    lines[center] = True
    remaining = target - len(center)
    if remaining > 0:
        rng = make_rng(seed)
        cand = np.flatnonzero(~lines)
        d = cand - height // 2
        p = np.exp(-(d**2) / (2 * (density_width * height) ** 2))
        pick = rng.choice(cand, size=remaining, replace=False, p=p / p.sum())
        lines[pick] = True
    return SamplingMask(lines, width, accel, seed)


def synthetic_coil_maps(ncoils: int, height: int, width: int, seed: int = 0, spread: float = 0.6) -> np.ndarray:
    """Smooth complex coil sensitivities, ``[ncoils, H, W]``, with ``sum |c|^2 = 1``.

    Each coil is a Gaussian bump centred on a ring around the image with a
    slowly varying linear phase.
    """
    rng = make_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    maps = []
    for c in range(ncoils):
        angle = 2 * np.pi * c / ncoils + rng.uniform(-0.2, 0.2)
        cy, cx = 1.2 * np.sin(angle), 1.2 * np.cos(angle)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread**2))
        ky, kx = rng.uniform(-1.0, 1.0, size=2)
        phase = ky * yy + kx * xx + rng.uniform(0, 2 * np.pi)
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))


class MRIOp(LinearOperator):
    """``A = S F C``: coil weighting, unitary 2-D FFT, Cartesian line selection.

    Input ``[2, H, W]``; output ``[ncoils, 2, n_lines, W]`` holding only the
    sampled rows. With normalised coil maps ``A^H A`` has its spectrum in
    ``[0, 1]``.
    """

    name = "mri"

    def __init__(self, mask: SamplingMask, csm: np.ndarray, tol: float = 1e-6):
        csm = np.asarray(csm, dtype=np.complex128)
        if csm.ndim == 2:
            csm = csm[None]
        ncoils, h, w = csm.shape
        if (mask.height, mask.width) != (h, w):
            raise ValueError(f"mask {(mask.height, mask.width)} and coil maps {(h, w)} disagree")
        energy = np.sum(np.abs(csm) ** 2, axis=0)
        if np.max(np.abs(energy - 1)) > tol:
            raise ValueError("coil maps are not normalised (sum |c|^2 != 1)")
        # Rows in uncentred FFT order.
        rows = np.flatnonzero(np.fft.ifftshift(mask.lines))
        super().__init__((2, h, w), (ncoils, 2, len(rows), w))
        self.mask = mask
        self.csm = csm
        self.rows = rows

    def _apply(self, x):
        z = channels_to_complex(x)
        k = np.fft.fft2(self.csm * z, norm="ortho")[:, self.rows, :]
        return complex_to_channels(k, x.dtype)

    def _adjoint(self, y):
        ncoils, _, _, w = self.oshape
        h = self.ishape[1]
        full = np.zeros((ncoils, h, w), dtype=np.complex128)
        full[:, self.rows, :] = channels_to_complex(y)
        img = np.sum(np.conj(self.csm) * np.fft.ifft2(full, norm="ortho"), axis=0)
        return complex_to_channels(img, y.dtype)


def identity_op(shape) -> IdentityOp:
    return IdentityOp(shape)


def mask_op(mask) -> MaskOp:
    return MaskOp(mask)


def mri_op(mask: SamplingMask, csm) -> MRIOp:
    return MRIOp(mask, csm)


def operator_norm(op: LinearOperator, iters: int = 100, seed: int = 0, tol: float = 1e-10) -> float:
    """Largest singular value of ``op`` by power iteration on ``A^H A``."""
    if iters < 1:
        raise ValueError("iters must be positive")
    rng = make_rng(seed)
    x = rng.standard_normal(op.ishape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op.normal(x)
        new = float(np.linalg.norm(y))
        if new == 0:
            return 0.0
        x = y / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam)


def normalize(op: LinearOperator, iters: int = 200) -> LinearOperator:
    """Rescale ``op`` so that ``||A|| <= 1``.

    Operators already within ``1 + 1e-3`` are returned unchanged, so
    projections and the multicoil operator keep their natural scale.
    """
    n = operator_norm(op, iters)
    if n == 0:
        raise ValueError("cannot normalise the zero operator")
    op._norm = n
    if n <= 1 + 1e-3:
        return op
    return op.scaled(1.0 / n)


def dot_test(op: LinearOperator, rng=None, dtype=np.float64) -> float:
    """Relative mismatch ``|<Ax, y> - <x, A^H y>| / (|<Ax, y>| + |<x, A^H y>|)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = rng.standard_normal(op.ishape).astype(dtype)
    y = rng.standard_normal(op.oshape).astype(dtype)
    lhs = float(np.sum(op.apply(x) * y))
    rhs = float(np.sum(x * op.adjoint(y)))
    denom = abs(lhs) + abs(rhs)
    return 0.0 if denom == 0 else abs(lhs - rhs) / denom


def simulate(op: LinearOperator, x_true, eta: float, rng: np.random.Generator):
    """``b = A x + n`` with i.i.d. ``N(0, eta^2)`` noise on every real component."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    b = op.apply(np.asarray(x_true, dtype=np.float64))
    return b + gaussian(b.shape, eta, rng)
