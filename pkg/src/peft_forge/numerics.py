"""Dense float64 matrices, a portable seeded generator and a finite-difference oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here enforce the invariants the rest of the package relies on (2-D, float64,
finite entries) and raise :class:`ShapeError` / :class:`NumericError` with the
offending shapes in the message.

Random numbers come from :class:`SeededRng`, a counter-based SplitMix64
stream. Its recurrence is fixed so a seed produces the same values on every
platform and numpy version::

    state_i = (seed + i * 0x9E3779B97F4A7C15) mod 2**64      for i = 1, 2, ...
    z = state_i
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9                  (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB                  (mod 2**64)
    out_i = z ^ (z >> 31)

Uniform doubles use the top 53 bits: ``u = (out >> 11) * 2**-53`` in [0, 1).
Normal deviates use the Box-Muller transform on consecutive uniform pairs
``(u1, u2)``::

    r = sqrt(-2 * ln(1 - u1));  z0 = r * cos(2*pi*u2);  z1 = r * sin(2*pi*u2)

and are emitted in the order z0, z1, z0, z1, ... An odd request discards the
trailing z1 so every call consumes an even number of raw outputs.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_matrix(data, *, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 matrix.

    1-D input is rejected instead of being reshaped; callers state the
    orientation they mean with an explicit ``reshape``.
    """
    m = np.array(data, dtype=np.float64, copy=True) if copy else np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array with shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains NaN or infinite entries")
    return m


def check_finite(m: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains NaN or infinite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1] if a.ndim == 2 else '?'} "
                         f"by {b.shape[0]}x{b.shape[1] if b.ndim == 2 else '?'}: inner dimensions differ")
    return check_finite(a @ b, "matmul result")


def checksum(m: np.ndarray) -> str:
    """SHA-256 over shape and little-endian float64 bytes."""
    h = hashlib.sha256()
    h.update(np.asarray(m.shape, dtype="<u8").tobytes())
    h.update(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return h.hexdigest()


def _splitmix(states: np.ndarray) -> np.ndarray:
    z = states
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Counter-based SplitMix64 generator (see module docstring for the recurrence).

    Single-owner and mutable: every draw advances the internal counter.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or not 0 <= int(seed) <= _MASK64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = int(seed)
        self._counter = 0

    @property
    def position(self) -> int:
        """Number of raw 64-bit outputs consumed so far."""
        return self._counter

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        if count < 0:
            raise ParameterError(f"cannot draw {count} values")
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        out = _splitmix(np.uint64(self.seed) + idx * _GAMMA)
        return int(out[0]) if n is None else out

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (int(n) + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[: int(n)]

    def below(self, bound: int) -> int:
        """Integer in [0, bound) via the multiply-shift map ``(u64 * bound) >> 64``."""
        if bound < 1:
            raise ParameterError(f"bound must be positive, got {bound}")
        return (self.next_u64() * bound) >> 64

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)`` driven by :meth:`below`."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def gaussian_matrix(rng: SeededRng, rows: int, cols: int, stddev: float) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ParameterError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if not stddev > 0 or not math.isfinite(stddev):
        raise ParameterError(f"stddev must be positive and finite, got {stddev}")
    return rng.normal(rows * cols).reshape(rows, cols) * stddev


def finite_difference_grad(f: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``, one entry at a time."""
    if not h > 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = as_matrix(at, copy=True)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = float(f(x))
        x[idx] = orig - h
        f_minus = float(f(x))
        x[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite function value while differentiating at index {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad
