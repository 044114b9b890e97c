"""Binary checkpoint container and the dense-matrix / adapter section formats.

All integers and floats are little-endian.

Matrix section::

    0   4   magic b"PFMX"
    4   2   version (1)
    6   1   dtype tag (1 = float64)
    7   1   reserved (0)
    8   4   rows
    12  4   cols
    16  8*rows*cols  entries, row-major float64

Adapter section::

    0   4   magic b"PFAD"
    4   2   version (1)
    6   2   byte length L of the base checksum
    8   4   rank
    12  8   alpha, float64
    20  L   base checksum, ASCII hex
    ... matrix section for A, then matrix section for B

Container file::

    0   4   magic b"PFCK"
    4   2   version (1)
    6   4   section count
    then per section:
        1   kind (1 matrix, 2 adapter, 3 quantized, 4 mask, 5 json)
        2   byte length N of the section name, then N bytes UTF-8 name
        8   payload length P, then P payload bytes

Quantized and mask payloads use the layouts in :mod:`peft_forge.quant` and
:mod:`peft_forge.prune`. JSON payloads are UTF-8, keys sorted, no spaces.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError
from .lora import LoraAdapter
from .prune import PruneMask
from .quant import QuantizedTensor

MATRIX, ADAPTER, QUANTIZED, MASK, JSON = 1, 2, 3, 4, 5

_MX = struct.Struct("<4sHBBII")
_AD = struct.Struct("<4sHHId")
_CK = struct.Struct("<4sHI")
_SEC_KIND = struct.Struct("<BH")
_SEC_LEN = struct.Struct("<Q")
_F64 = 1


def matrix_to_bytes(m: np.ndarray) -> bytes:
    rows, cols = m.shape
    return _MX.pack(b"PFMX", 1, _F64, 0, rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def read_matrix(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(data) - offset < _MX.size:
        raise FormatError("truncated matrix-section header")
    magic, version, dtype, _, rows, cols = _MX.unpack_from(data, offset)
    if magic != b"PFMX":
        raise FormatError(f"bad matrix-section magic {magic!r}")
    if version != 1 or dtype != _F64:
        raise FormatError(f"unsupported matrix section (version {version}, dtype tag {dtype})")
    start = offset + _MX.size
    end = start + 8 * rows * cols
    if len(data) < end:
        raise FormatError(f"matrix section declares {rows}x{cols} but payload is truncated")
    m = np.frombuffer(data[start:end], dtype="<f8").astype(np.float64).reshape(rows, cols)
    return m, end


def matrix_from_bytes(data: bytes) -> np.ndarray:
    m, end = read_matrix(data)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after matrix section")
    return m


@dataclass(eq=False)
class StoredAdapter:
    """Adapter weights read from disk, not yet bound to a base."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float
    base_checksum: str

    def bind(self, base) -> LoraAdapter:
        ad = LoraAdapter(base=base, a=self.a, b=self.b, rank=self.rank, alpha=self.alpha)
        actual = ad.base_checksum()
        if actual != self.base_checksum:
            raise ConsistencyError(f"base checksum mismatch: adapter was trained on {self.base_checksum[:16]}..., "
                                   f"got {actual[:16]}...")
        return ad


def adapter_to_bytes(ad: LoraAdapter) -> bytes:
    digest = ad.base_checksum().encode("ascii")
    return (_AD.pack(b"PFAD", 1, len(digest), ad.rank, ad.alpha) + digest
            + matrix_to_bytes(ad.a) + matrix_to_bytes(ad.b))


def adapter_from_bytes(data: bytes) -> StoredAdapter:
    if len(data) < _AD.size:
        raise FormatError("truncated adapter-section header")
    magic, version, dlen, rank, alpha = _AD.unpack_from(data, 0)
    if magic != b"PFAD" or version != 1:
        raise FormatError(f"bad adapter section (magic {magic!r}, version {version})")
    pos = _AD.size
    digest = data[pos:pos + dlen].decode("ascii")
    a, pos = read_matrix(data, pos + dlen)
    b, pos = read_matrix(data, pos)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after adapter section")
    if a.shape[0] != rank or b.shape[1] != rank:
        raise FormatError(f"adapter rank {rank} disagrees with A {a.shape} / B {b.shape}")
    return StoredAdapter(a=a, b=b, rank=rank, alpha=alpha, base_checksum=digest)


def _encode(obj) -> tuple[int, bytes]:
    if isinstance(obj, np.ndarray):
        return MATRIX, matrix_to_bytes(obj)
    if isinstance(obj, LoraAdapter):
        return ADAPTER, adapter_to_bytes(obj)
    if isinstance(obj, QuantizedTensor):
        return QUANTIZED, obj.to_bytes()
    if isinstance(obj, PruneMask):
        return MASK, obj.to_bytes()
    if isinstance(obj, dict):
        return JSON, json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raise TypeError(f"cannot store object of type {type(obj).__name__} in a checkpoint")


def _decode(kind: int, payload: bytes):
    if kind == MATRIX:
        return matrix_from_bytes(payload)
    if kind == ADAPTER:
        return adapter_from_bytes(payload)
    if kind == QUANTIZED:
        return QuantizedTensor.from_bytes(payload)
    if kind == MASK:
        return PruneMask.from_bytes(payload)
    if kind == JSON:
        return json.loads(payload.decode("utf-8"))
    raise FormatError(f"unknown section kind {kind}")


def dumps(sections: dict) -> bytes:
    """Serialize an ordered ``name -> object`` mapping into container bytes."""
    parts = [_CK.pack(b"PFCK", 1, len(sections))]
    for name, obj in sections.items():
        kind, payload = _encode(obj)
        raw_name = name.encode("utf-8")
        parts += [_SEC_KIND.pack(kind, len(raw_name)), raw_name, _SEC_LEN.pack(len(payload)), payload]
    return b"".join(parts)


def loads(data: bytes) -> dict:
    if len(data) < _CK.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, count = _CK.unpack_from(data, 0)
    if magic != b"PFCK":
        raise FormatError(f"not a checkpoint file (magic {magic!r})")
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _CK.size
    out = {}
    for i in range(count):
        if len(data) - pos < _SEC_KIND.size:
            raise FormatError(f"truncated header of section {i}")
        kind, nlen = _SEC_KIND.unpack_from(data, pos)
        pos += _SEC_KIND.size
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if len(data) - pos < _SEC_LEN.size:
            raise FormatError(f"truncated length of section {name!r}")
        (plen,) = _SEC_LEN.unpack_from(data, pos)
        pos += _SEC_LEN.size
        if len(data) - pos < plen:
            raise FormatError(f"section {name!r} declares {plen} bytes but the file ends early")
        if name in out:
            raise FormatError(f"duplicate section name {name!r}")
        out[name] = _decode(kind, data[pos:pos + plen])
        pos += plen
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last section")
    return out


def save(path, sections: dict) -> None:
    Path(path).write_bytes(dumps(sections))


def load(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
