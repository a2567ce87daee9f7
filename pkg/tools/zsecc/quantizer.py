"""Symmetric range-based linear quantization.

    X^q = round(X * (2^(n-1) - 1) / max|X|)

with one scale per tensor. Rounding is half away from zero so that
quantize(-x) == -quantize(x) exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, QuantizationOverflow

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8, any shape
    scale: float

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise ArgumentError(f"QuantizedTensor values must be int8, got {self.values.dtype}")
        if not self.scale > 0:
            raise ArgumentError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.scale == other.scale
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class QuantizedBias:
    values: np.ndarray  # int32
    scale: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedBias):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.values, other.values)


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_for(x: np.ndarray, n: int = 8) -> float:
    """max|X| / (2^(n-1) - 1); 1.0 for an all-zero tensor."""
    m = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return m / (2 ** (n - 1) - 1) if m > 0 else 1.0


def quantize(x: np.ndarray, n: int = 8, scale: float | None = None) -> QuantizedTensor:
    """Quantize with the tensor's own range, or with a fixed ``scale`` (clamped)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ArgumentError("cannot quantize non-finite values")
    if n != 8:
        raise ArgumentError(f"only 8-bit quantization is supported, got n={n}")
    qmax = 2 ** (n - 1) - 1
    if scale is None:
        m = float(np.max(np.abs(x))) if x.size else 0.0
        if m == 0.0:
            return QuantizedTensor(values=np.zeros(x.shape, dtype=np.int8), scale=1.0)
        scale = m / qmax
        q = round_half_away(x * (qmax / m))
    else:
        q = round_half_away(x / scale)
    q = np.clip(q, -qmax, qmax)
    return QuantizedTensor(values=q.astype(np.int8), scale=float(scale))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.scale


def quantize_bias(b: np.ndarray, scale: float) -> QuantizedBias:
    if not scale > 0:
        raise ArgumentError(f"bias scale must be positive, got {scale}")
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ArgumentError("cannot quantize non-finite bias")
    q = round_half_away(b / scale)
    if q.size and np.max(np.abs(q)) > INT32_MAX:
        raise QuantizationOverflow(f"bias exceeds int32 range at scale {scale}")
    return QuantizedBias(values=q.astype(np.int32), scale=float(scale))


def dequantize_bias(q: QuantizedBias) -> np.ndarray:
    return q.values.astype(np.float64) * q.scale


def fake_quantize(x: np.ndarray) -> np.ndarray:
    """quantize then dequantize, for QAT forward passes."""
    return dequantize(quantize(x))
