"""Absmax quantization with b-bit codes, bit packing and the QLoRA forward pass.

For a tensor X and bit width b the scale is ``c = (2**b - 1) / absmax(X)``
and the codes are ``round(c * X)`` with ties rounded away from zero.
Dequantization divides: ``X_hat = codes / c``.

Code range
----------
The scale uses ``2**b - 1``, so signed codes span ``[-(2**b - 1), 2**b - 1]``:
31 levels for b=4 and 511 levels for b=8. That is one bit more than a
two's-complement int4/int8 range. Storage therefore keeps two planes:

* magnitude plane: ``|code|`` in b bits. For b=4 two nibbles per byte, element
  ``2i`` in the low nibble and ``2i+1`` in the high nibble, a trailing odd
  element leaves the high nibble zero. For b=8 one byte per element.
* sign plane: one bit per element (1 = negative), 8 per byte, element ``8i+j``
  in bit ``j`` (least significant first), padding bits zero. A zero code
  always has sign bit 0.

Serialized section (little-endian)::

    offset  size  field
    0       4     magic b"PFQT"
    4       2     version (1)
    6       1     bits (4 or 8)
    7       1     flags (bit 0: every block is all-zero)
    8       4     rows
    12      4     cols
    16      4     block_size (0 = one scale for the whole tensor)
    20      4     n_scales
    24      8*n   scales, float64; 0.0 marks an all-zero block
    ...           magnitude plane, ceil(rows*cols*bits/8) bytes
    ...           sign plane, ceil(rows*cols/8) bytes

A per-tensor 1x1 tensor at b=4 takes 24 + 8 + 1 + 1 = 34 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, ParameterError, ShapeError
from .numerics import as_matrix, check_finite

SUPPORTED_BITS = (4, 8)
MAGIC = b"PFQT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIII")


def _check_bits(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")
    return bits


def max_code(bits: int) -> int:
    return (1 << _check_bits(bits)) - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    whole = np.floor(mag)
    # mag - whole is exact for doubles, so the tie test is exact too
    whole = whole + (mag - whole >= 0.5)
    return np.copysign(whole, v)


def pack_nibbles(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint8).ravel()
    if v.size and v.max() > 15:
        raise ParameterError("nibble values must be in [0, 15]")
    if v.size % 2:
        v = np.append(v, np.uint8(0))
    return (v[0::2] | (v[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise FormatError(f"nibble plane has {raw.size} bytes, expected {(count + 1) // 2} for {count} values")
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


def pack_bits(flags: np.ndarray) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != (count + 7) // 8:
        raise FormatError(f"bit plane has {raw.size} bytes, expected {(count + 7) // 8} for {count} values")
    return np.unpackbits(raw, bitorder="little", count=count).astype(bool)


def plane_sizes(n: int, bits: int) -> tuple[int, int]:
    return (n * bits + 7) // 8, (n + 7) // 8


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    c = np.asarray(codes, dtype=np.int64).ravel()
    limit = max_code(bits)
    if c.size and np.abs(c).max() > limit:
        raise ParameterError(f"code magnitude exceeds {limit} for {bits}-bit storage")
    mag = np.abs(c).astype(np.uint8)
    mag_plane = pack_nibbles(mag) if bits == 4 else mag.tobytes()
    return mag_plane + pack_bits(c < 0)


def unpack_codes(packed: bytes, bits: int, count: int) -> np.ndarray:
    mag_len, sign_len = plane_sizes(count, _check_bits(bits))
    if len(packed) != mag_len + sign_len:
        raise FormatError(f"packed codes are {len(packed)} bytes, expected {mag_len + sign_len}")
    if bits == 4:
        mag = unpack_nibbles(packed[:mag_len], count)
    else:
        mag = np.frombuffer(packed[:mag_len], dtype=np.uint8)
    neg = unpack_bits(packed[mag_len:], count)
    if np.any(neg & (mag == 0)):
        raise FormatError("sign bit set on a zero code")
    return np.where(neg, -mag.astype(np.int32), mag.astype(np.int32))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray  # int32, shape (rows, cols)
    scales: np.ndarray  # float64, one per block
    bits: int
    rows: int
    cols: int
    block_size: int = 0
    packed: bytes = b""

    @property
    def scale(self) -> float:
        if self.scales.size != 1:
            raise ParameterError("block-wise tensor has several scales; use .scales")
        return float(self.scales[0])

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.scales == 0.0))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def block_index(self) -> np.ndarray:
        """Scale index for each entry in row-major order."""
        n = self.rows * self.cols
        if self.block_size == 0:
            return np.zeros(n, dtype=np.int64)
        return np.arange(n) // self.block_size

    def to_bytes(self) -> bytes:
        flags = 1 if self.is_zero else 0
        head = _HEADER.pack(MAGIC, VERSION, self.bits, flags, self.rows, self.cols,
                            self.block_size, self.scales.size)
        return head + self.scales.astype("<f8").tobytes() + self.packed

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedTensor":
        q, used = cls.read(data, 0)
        if used != len(data):
            raise FormatError(f"{len(data) - used} trailing bytes after quantized section")
        return q

    @classmethod
    def read(cls, data: bytes, offset: int) -> tuple["QuantizedTensor", int]:
        """Parse one section at ``offset``; return it and the end offset."""
        if len(data) - offset < _HEADER.size:
            raise FormatError("truncated quantized-section header")
        magic, version, bits, flags, rows, cols, block, n_scales = _HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise FormatError(f"bad quantized-section magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported quantized-section version {version}")
        if bits not in SUPPORTED_BITS:
            raise FormatError(f"unsupported bit width {bits} in quantized section")
        n = rows * cols
        expected_scales = 1 if block == 0 else -(-n // block)
        if n_scales != expected_scales:
            raise FormatError(f"quantized section declares {n_scales} scales, expected {expected_scales}")
        pos = offset + _HEADER.size
        end_scales = pos + 8 * n_scales
        mag_len, sign_len = plane_sizes(n, bits)
        end = end_scales + mag_len + sign_len
        if len(data) < end:
            raise FormatError("truncated quantized-section payload")
        scales = np.frombuffer(data[pos:end_scales], dtype="<f8").astype(np.float64)
        packed = bytes(data[end_scales:end])
        codes = unpack_codes(packed, bits, n).reshape(rows, cols)
        if bool(flags & 1) != bool(np.all(scales == 0.0)):
            raise FormatError("zero-tensor flag disagrees with the stored scales")
        return cls(codes=codes, scales=scales, bits=bits, rows=rows, cols=cols,
                   block_size=block, packed=packed), end


def quantize(x: np.ndarray, bits: int, block_size: int = 0) -> QuantizedTensor:
    """Absmax-quantize ``x``; ``block_size > 0`` uses one scale per row-major block."""
    _check_bits(bits)
    m = as_matrix(x)
    if block_size < 0:
        raise ParameterError(f"block_size must be >= 0, got {block_size}")
    limit = max_code(bits)
    flat = m.ravel()
    n = flat.size
    if block_size == 0 or block_size >= n:
        block_size = 0
        bounds = [(0, n)]
    else:
        bounds = [(s, min(s + block_size, n)) for s in range(0, n, block_size)]
    codes = np.zeros(n, dtype=np.int32)
    scales = np.zeros(len(bounds), dtype=np.float64)
    for i, (lo, hi) in enumerate(bounds):
        absmax = np.max(np.abs(flat[lo:hi]))
        if absmax == 0.0:
            continue
        with np.errstate(over="ignore"):
            c = limit / absmax
        if not np.isfinite(c):
            raise NumericError(f"absmax {absmax!r} is too small for a finite quantization scale")
        scales[i] = c
        codes[lo:hi] = np.clip(round_half_away(c * flat[lo:hi]), -limit, limit)
    codes = codes.reshape(m.shape)
    return QuantizedTensor(codes=codes, scales=scales, bits=bits, rows=m.shape[0], cols=m.shape[1],
                           block_size=block_size, packed=pack_codes(codes, bits))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    n = q.rows * q.cols
    mag_len, sign_len = plane_sizes(n, q.bits)
    if len(q.packed) != mag_len + sign_len:
        raise FormatError(f"packed data is {len(q.packed)} bytes, expected {mag_len + sign_len}")
    codes = q.codes.ravel().astype(np.float64)
    c = q.scales[q.block_index()]
    safe = np.where(c == 0.0, 1.0, c)
    out = np.where(c == 0.0, 0.0, codes / safe)
    return out.reshape(q.rows, q.cols)


def storage_footprint(q: QuantizedTensor) -> int:
    """Exact size in bytes of the serialized section (header, scales, both planes)."""
    mag_len, sign_len = plane_sizes(q.rows * q.cols, q.bits)
    return _HEADER.size + 8 * q.scales.size + mag_len + sign_len


def dense_footprint(rows: int, cols: int, bits_per_entry: int = 16) -> int:
    return (rows * cols * bits_per_entry + 7) // 8


def roundtrip_bound(x: np.ndarray, bits: int) -> float:
    """Half a quantization step: absmax(X) / (2 * (2**b - 1))."""
    return float(np.max(np.abs(x))) / (2.0 * max_code(bits))


def qlora_forward(qbase: QuantizedTensor, ad, x: np.ndarray) -> np.ndarray:
    """Quantized frozen base plus full-precision low-rank update.

    ``ad`` supplies ``a``, ``b`` and ``scaling``; any base it carries is
    ignored, the base is taken only from ``qbase`` and dequantized on use.
    """
    x = as_matrix(x)
    if x.shape[0] != qbase.cols:
        raise ShapeError(f"input has {x.shape[0]} rows but quantized base is {qbase.rows}x{qbase.cols}")
    if ad.b.shape[0] != qbase.rows or ad.a.shape[1] != qbase.cols:
        raise ShapeError(f"adapter B {ad.b.shape} / A {ad.a.shape} do not fit base {qbase.shape}")
    out = dequantize(qbase) @ x + ad.scaling * (ad.b @ (ad.a @ x))
    return check_finite(out, "qlora forward output")
