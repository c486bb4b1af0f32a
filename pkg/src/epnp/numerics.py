"""Array conventions, seeded randomness, unitary FFTs and on-disk tensor formats.

Tensors are plain ``numpy.ndarray`` values. Complex images travel either as a
:class:`ComplexImage` pair or as a real two-channel array ``[2, H, W]``
(channel 0 real part, channel 1 imaginary part); the prior network only ever
sees the two-channel form.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"EPNPTNSR"
TENSOR_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches a module boundary."""


def as_dtype(precision) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or a numpy dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Real inner product ``sum(a * b)`` of two equally shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.vdot(a.ravel(), b.ravel()).real)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(shape, std: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """I.i.d. ``N(0, std**2)`` samples.

    Draws are always made in float64 and then cast, so a given seed yields
    the same stream regardless of the requested precision.
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    z = rng.standard_normal(shape)
    return (std * z).astype(dtype, copy=False)


@dataclass(frozen=True)
class ComplexImage:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if np.shape(self.re) != np.shape(self.im):
            raise ValueError("re and im must share a shape")

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexImage":
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    @classmethod
    def from_channels(cls, x: np.ndarray) -> "ComplexImage":
        return cls(x[0], x[1])

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def to_channels(self) -> np.ndarray:
        return np.stack([self.re, self.im])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.re**2) + np.sum(self.im**2)))


def channels_to_complex(x: np.ndarray) -> np.ndarray:
    """``[..., 2, H, W]`` real -> ``[..., H, W]`` complex."""
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def complex_to_channels(z: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3).astype(dtype, copy=False)


def _check_2d(x: ComplexImage):
    if np.ndim(x.re) < 2 or min(np.shape(x.re)[-2:]) < 1:
        raise ValueError("fft2 expects an image with H, W >= 1")


def fft2(x: ComplexImage) -> ComplexImage:
    """Unitary 2-D DFT over the last two axes (DC at index 0)."""
    _check_2d(x)
    return ComplexImage.from_complex(np.fft.fft2(x.to_complex(), norm="ortho"))


def ifft2(x: ComplexImage) -> ComplexImage:
    _check_2d(x)
    return ComplexImage.from_complex(np.fft.ifft2(x.to_complex(), norm="ortho"))


# ---------------------------------------------------------------- tensor files


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.dtype == np.bool_:
        x = x.astype(np.float32)
    dtype = np.dtype(x.dtype)
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {dtype}")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, _DTYPE_CODES[dtype], x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.astype(dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def decode_tensor(stream: io.BufferedIOBase) -> np.ndarray:
    magic = stream.read(8)
    if magic != TENSOR_MAGIC:
        raise ValueError("not an EPNPTNSR tensor block")
    version, code, rank = struct.unpack("<BBB", stream.read(3))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(_CODE_DTYPES[code])


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh)


def save_pgm(path, image: np.ndarray) -> dict:
    """Write a 16-bit binary PGM, min-max scaled, plus a ``.json`` sidecar.

    Returns the sidecar dict (``min``, ``max``, ``maxval``); the original
    values are recovered as ``min + pixel / maxval * (max - min)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export expects a 2-D image")
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    maxval = 65535
    pixels = np.round((image - lo) / span * maxval).astype(">u2")
    h, w = image.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.tobytes())
    sidecar = {"min": lo, "max": hi, "maxval": maxval}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return sidecar


def load_pgm(path) -> np.ndarray:
    """Read a PGM written by :func:`save_pgm`, undoing the scaling via its sidecar."""
    path = Path(path)
    data = path.read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    payload = data[m.end() : m.end() + 2 * w * h]
    pixels = np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.float64)
    side = path.with_suffix(path.suffix + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        return meta["min"] + pixels / maxval * (meta["max"] - meta["min"])
    return pixels / maxval
