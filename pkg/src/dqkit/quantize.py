"""n-bit uniform weight quantization with one scale per tensor.

The representable values for width n are alpha * {0, +-1, ..., +-2^(n-1)},
i.e. 2^n + 1 integer levels including both endpoints. The scale alpha is
calibrated as max|W| / 2^(n-1) so the grid exactly covers the weight range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, ParameterError
from .tensor import Tensor, _make, _accum


def level_set(n: int) -> np.ndarray:
    """Integer levels {-2^(n-1), ..., -1, 0, 1, ..., 2^(n-1)} for n-bit width."""
    if n < 2:
        raise ParameterError(f"bit width must be >= 2, got {n}")
    top = 2 ** (n - 1)
    return np.arange(-top, top + 1, dtype=np.int64)


def _round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def quantize_tensor(w: np.ndarray, n: int):
    """Quantize to (integer codes, scale). All-zero input yields alpha = 0."""
    if n < 2:
        raise ParameterError(f"bit width must be >= 2, got {n}")
    w = np.asarray(w, dtype=np.float64)
    top = 2 ** (n - 1)
    alpha = float(np.max(np.abs(w))) / top if w.size else 0.0
    if alpha == 0.0:
        return np.zeros(w.shape, dtype=np.int64), 0.0
    codes = _round_half_toward_zero(w / alpha)
    codes = np.clip(codes, -top, top).astype(np.int64)
    return codes, alpha


def dequantize(codes: np.ndarray, alpha: float, bits: int | None = None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if bits is not None:
        top = 2 ** (bits - 1)
        if codes.size and (codes.min() < -top or codes.max() > top):
            raise CorruptionError(f"quantization code outside +-{top} for {bits}-bit width")
    return codes.astype(np.float64) * alpha


@dataclass
class QuantSpec:
    """Quantization of one weight tensor: width, scale and integer codes."""

    bits: int
    alpha: float
    codes: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, w: np.ndarray, bits: int) -> "QuantSpec":
        codes, alpha = quantize_tensor(w, bits)
        return cls(bits=bits, alpha=alpha, codes=codes)

    def values(self) -> np.ndarray:
        return dequantize(self.codes, self.alpha, self.bits)


def quant_loss(w: Tensor, n: int) -> Tensor:
    """Mean absolute distance from W to its own quantization grid.

    Differentiable: the integer codes are treated as locally constant while
    the scale keeps its dependence on the max-magnitude element, which is the
    exact gradient of the piecewise-linear loss almost everywhere.
    """
    codes, alpha = quantize_tensor(w.data, n)
    q = codes.astype(np.float64) * alpha
    diff = w.data - q
    size = w.data.size

    def bw(g):
        if not w.requires_grad:
            return
        s = np.sign(diff)
        grad = s / size
        if alpha > 0.0:
            # alpha = |W[m]| / 2^(n-1) for the max-magnitude element m;
            # d(alpha)/dW[m] = sign(W[m]) / 2^(n-1) feeds every element's term.
            m = np.unravel_index(np.argmax(np.abs(w.data)), w.data.shape)
            dalpha = np.sign(w.data[m]) / (2 ** (n - 1))
            grad = grad.copy()
            grad[m] -= np.sum(s * codes) * dalpha / size
        _accum(w, float(g) * grad)

    return _make(np.mean(np.abs(diff)), (w,), bw)
