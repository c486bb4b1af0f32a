"""Synthetic images, an analytic oracle distribution and image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng


@dataclass
class Phantom:
    image: np.ndarray
    kind: str
    seed: int


class Dataset:
    """Clean training images plus a seed-derived shuffling order."""

    def __init__(self, images, seed: int = 0):
        images = [np.asarray(im) for im in images]
        if not images:
            raise ValueError("dataset is empty")
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ValueError("all dataset items must share a shape")
        self.images = images
        self.seed = seed

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def shape(self):
        return self.images[0].shape

    def order(self, epoch: int) -> np.ndarray:
        return make_rng(self.seed * 100003 + epoch).permutation(len(self.images))

    def stack(self, idx=None, dtype=None) -> np.ndarray:
        idx = range(len(self.images)) if idx is None else idx
        out = np.stack([self.images[i] for i in idx])
        return out if dtype is None else out.astype(dtype)


def gaussian_data(tau: float, shape, n: int, seed: int = 0) -> Dataset:
    """``n`` i.i.d. ``N(0, tau^2 I)`` images (the analytic-oracle corpus)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = make_rng(seed)
    return Dataset([tau * rng.standard_normal(shape) for _ in range(n)], seed=seed)


def analytic_smoothed_score(x_noisy, tau: float, sigma: float):
    """Exact denoising target ``sigma^2 x / (tau^2 + sigma^2)`` for Gaussian data.

    For ``x ~ N(0, tau^2 I)`` the perturbed ``x + sigma z`` is
    ``N(0, (tau^2 + sigma^2) I)``, so ``-sigma^2 * grad log p`` is linear.
    """
    if tau <= 0 or sigma <= 0:
        raise ValueError("tau and sigma must be positive")
    return sigma**2 * np.asarray(x_noisy) / (tau**2 + sigma**2)


def _smooth_step(d, width):
    return 0.5 * (1 - np.tanh(d / width))


def piecewise_phantom(shape, ncomponents: int = 5, seed: int = 0, edge: float = 0.03) -> Phantom:
    """Random ellipses and rectangles with constant intensities and soft edges.

    ``shape`` is ``(H, W)``; components are layered over a dim background and
    the result is clipped to ``[0, 1]``.
    """
    if ncomponents < 1:
        raise ValueError("ncomponents must be >= 1")
    h, w = shape
    rng = make_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    img = np.full(shape, rng.uniform(0.0, 0.15))
    for _ in range(ncomponents):
        cy, cx = rng.uniform(-0.6, 0.6, size=2)
        ry, rx = rng.uniform(0.15, 0.6, size=2)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        if rng.random() < 0.6:
            d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2) - 1
        else:
            d = np.maximum(np.abs(u) / rx, np.abs(v) / ry) - 1
        weight = _smooth_step(d, edge / min(rx, ry))
        level = rng.uniform(0.2, 1.0)
        img = img * (1 - weight) + level * weight
    return Phantom(np.clip(img, 0.0, 1.0), "piecewise-smooth", seed)


def gaussian_field_phantom(shape, seed: int = 0, correlation: float = 3.0) -> Phantom:
    """Smooth random field, min-max scaled into ``[0, 1]``."""
    rng = make_rng(seed)
    h, w = shape
    noise = rng.standard_normal(shape)
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    filt = np.exp(-2 * (np.pi * correlation) ** 2 * (ky**2 + kx**2))
    field = np.fft.ifft2(np.fft.fft2(noise) * filt).real
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return Phantom(field, "gaussian-field", seed)


def ellipse_phantom(shape, seed: int = 0, nellipses: int = 6) -> Phantom:
    """Shepp-Logan-like composite: a head outline with additive inner ellipses."""
    rng = make_rng(seed)
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    img = np.where((xx / 0.85) ** 2 + (yy / 0.95) ** 2 <= 1, 0.8, 0.0)
    img = img - np.where((xx / 0.78) ** 2 + (yy / 0.88) ** 2 <= 1, 0.6, 0.0)
    for _ in range(nellipses):
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        img = img + np.where(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1, rng.uniform(0.1, 0.5), 0.0)
    return Phantom(np.clip(img, 0.0, 1.0), "ellipse-composite", seed)


PHANTOM_KINDS = {
    "piecewise-smooth": lambda shape, seed, n: piecewise_phantom(shape, n, seed),
    "gaussian-field": lambda shape, seed, n: gaussian_field_phantom(shape, seed),
    "ellipse-composite": lambda shape, seed, n: ellipse_phantom(shape, seed, n),
}


def make_phantom(kind: str, shape, seed: int, ncomponents: int = 5) -> Phantom:
    try:
        return PHANTOM_KINDS[kind](tuple(shape), seed, ncomponents)
    except KeyError:
        raise ValueError(f"unknown phantom kind {kind!r}") from None


def as_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Lift a real ``[H, W]`` image to ``[channels, H, W]`` (zero imaginary part for 2)."""
    image = np.asarray(image, dtype=np.float64)
    if channels == 1:
        return image[None]
    if channels == 2:
        return np.stack([image, np.zeros_like(image)])
    raise ValueError("channels must be 1 or 2")


def phantom_dataset(kind: str, shape, n: int, seed: int = 0, channels: int = 1, ncomponents: int = 5) -> Dataset:
    images = [as_channels(make_phantom(kind, shape, seed * 1000 + i, ncomponents).image, channels) for i in range(n)]
    return Dataset(images, seed=seed)


def magnitude(x: np.ndarray) -> np.ndarray:
    """Display image of a ``[C, H, W]`` array: channel 0, or the modulus for two channels."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x
    if x.shape[0] == 2:
        return np.hypot(x[0], x[1])
    return x[0]


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical images give ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak**2 / mse)
