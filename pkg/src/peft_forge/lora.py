"""Low-rank adapters on a frozen base matrix.

An adapter holds the frozen base ``W0`` (d x k), ``A`` (r x k), ``B`` (d x r),
the rank ``r`` and ``alpha``. The update is ``(alpha / r) * B @ A``; the
scaling is applied at forward and merge time and is never folded into B,
so changing alpha needs no re-materialization.

The base may be a dense matrix or a :class:`~peft_forge.quant.QuantizedTensor`,
in which case it is dequantized on every use (QLoRA).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import SeededRng, as_matrix, check_finite, checksum, gaussian_matrix
from .quant import QuantizedTensor, dequantize

DEFAULT_INIT_STDDEV = 0.02


@dataclass(eq=False)
class LoraAdapter:
    base: np.ndarray | QuantizedTensor
    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    def base_matrix(self) -> np.ndarray:
        if isinstance(self.base, QuantizedTensor):
            return dequantize(self.base)
        return self.base

    def base_checksum(self) -> str:
        if isinstance(self.base, QuantizedTensor):
            return checksum(self.base.codes.astype(np.float64)) + ":" + checksum(self.base.scales.reshape(1, -1))
        return checksum(self.base)

    def delta(self, x: np.ndarray) -> np.ndarray:
        """``(alpha/r) * B @ (A @ x)`` without materializing ``B @ A``."""
        return self.scaling * (self.b @ (self.a @ x))


@dataclass(eq=False)
class AdapterGradients:
    grad_a: np.ndarray
    grad_b: np.ndarray

    def norm_sq(self) -> float:
        return float(np.sum(self.grad_a * self.grad_a) + np.sum(self.grad_b * self.grad_b))


def _base_shape(base) -> tuple[int, int]:
    if isinstance(base, QuantizedTensor):
        return base.shape
    return as_matrix(base).shape


def init_adapter(rng: SeededRng, base, rank: int, alpha: float,
                 init_stddev: float = DEFAULT_INIT_STDDEV) -> LoraAdapter:
    d, k = _base_shape(base)
    if not isinstance(rank, (int, np.integer)) or not 1 <= rank <= min(d, k):
        raise ParameterError(f"rank must be in [1, {min(d, k)}] for a {d}x{k} base, got {rank}")
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    a = gaussian_matrix(rng, int(rank), k, init_stddev)
    b = np.zeros((d, int(rank)), dtype=np.float64)
    return LoraAdapter(base=base, a=a, b=b, rank=int(rank), alpha=float(alpha))


def _check_input(ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    d, k = ad.shape
    if x.shape[0] != k:
        raise ShapeError(f"input with {x.shape[0]} rows does not fit a {d}x{k} adapter")
    return x


def forward(ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    x = _check_input(ad, x)
    return check_finite(ad.base_matrix() @ x + ad.delta(x), "adapter forward output")


def backward(ad: LoraAdapter, x: np.ndarray, upstream_grad: np.ndarray) -> AdapterGradients:
    """Gradients of a scalar loss w.r.t. A and B given dL/dh for ``h = forward(ad, x)``.

    The base gets no gradient.
    """
    x = _check_input(ad, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (ad.shape[0], x.shape[1]):
        raise ShapeError(f"upstream gradient {g.shape} does not match output {(ad.shape[0], x.shape[1])}")
    s = ad.scaling
    grad_b = s * (g @ (ad.a @ x).T)
    grad_a = s * ((ad.b.T @ g) @ x.T)
    return AdapterGradients(grad_a=grad_a, grad_b=grad_b)


def input_grad(ad: LoraAdapter, upstream_grad: np.ndarray) -> np.ndarray:
    """dL/dx for ``h = forward(ad, x)``, used to chain through stacked layers."""
    g = upstream_grad
    return ad.base_matrix().T @ g + ad.scaling * (ad.a.T @ (ad.b.T @ g))


def merge(ad: LoraAdapter) -> np.ndarray:
    return check_finite(ad.base_matrix() + ad.scaling * (ad.b @ ad.a), "merged weight")


def trainable_param_count(adapters) -> int:
    return sum(ad.rank * (ad.shape[0] + ad.shape[1]) for ad in adapters)
