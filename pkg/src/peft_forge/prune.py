"""Magnitude-based unstructured pruning with binary masks.

Selection is by exact count: with sparsity ``s`` over ``n`` candidate weights,
exactly ``floor(s * n)`` entries are masked. Candidates are ordered by
magnitude with ties broken by ``(layer_id, row-major index)``, lower first,
so the result is reproducible and the masked set for a smaller ``s`` is
always a subset of the set for a larger one.

The recorded threshold ``tau`` is the largest pruned magnitude (``-inf`` when
nothing is pruned). Every masked weight satisfies ``|w| <= tau`` and every
kept one ``|w| >= tau``; kept weights can equal ``tau`` only when ties
straddle the cut.

Mask section layout (little-endian)::

    offset  size  field
    0       4     magic b"PFMK"
    4       2     version (1)
    6       1     mode (0 = global, 1 = per-layer)
    7       1     reserved (0)
    8       4     rows
    12      4     cols
    16      8     target sparsity s, float64
    24      8     threshold tau, float64
    32      2     byte length L of layer_id
    34      L     layer_id, UTF-8
    34+L    ...   mask bits, row-major, 8 per byte, least significant bit first
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, FormatError, ParameterError, ShapeError
from .numerics import as_matrix

GLOBAL = "global"
PER_LAYER = "per-layer"
_MODES = (GLOBAL, PER_LAYER)

MAGIC = b"PFMK"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIddH")


@dataclass(frozen=True)
class PrunePlan:
    target_sparsity: float
    mode: str = GLOBAL
    excluded_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ParameterError(f"target sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.mode not in _MODES:
            raise ParameterError(f"unknown pruning mode {self.mode!r}; expected one of {_MODES}")
        object.__setattr__(self, "excluded_layers", frozenset(self.excluded_layers))


@dataclass(eq=False)
class PruneMask:
    mask: np.ndarray  # bool, True = keep
    threshold: float
    target_sparsity: float
    layer_id: str
    mode: str = GLOBAL

    @property
    def pruned_count(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))

    @property
    def sparsity(self) -> float:
        return self.pruned_count / self.mask.size

    def to_bytes(self) -> bytes:
        name = self.layer_id.encode("utf-8")
        rows, cols = self.mask.shape
        head = _HEADER.pack(MAGIC, VERSION, _MODES.index(self.mode), 0, rows, cols,
                            self.target_sparsity, self.threshold, len(name))
        bits = np.packbits(self.mask.ravel(), bitorder="little").tobytes()
        return head + name + bits

    @classmethod
    def read(cls, data: bytes, offset: int = 0) -> tuple["PruneMask", int]:
        if len(data) - offset < _HEADER.size:
            raise FormatError("truncated mask-section header")
        magic, version, mode, _, rows, cols, s, tau, name_len = _HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise FormatError(f"bad mask-section magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported mask-section version {version}")
        if mode >= len(_MODES):
            raise FormatError(f"unknown mask mode tag {mode}")
        pos = offset + _HEADER.size
        n = rows * cols
        end = pos + name_len + (n + 7) // 8
        if len(data) < end:
            raise FormatError("truncated mask-section payload")
        name = data[pos:pos + name_len].decode("utf-8")
        raw = np.frombuffer(data[pos + name_len:end], dtype=np.uint8)
        mask = np.unpackbits(raw, bitorder="little", count=n).astype(bool).reshape(rows, cols)
        return cls(mask=mask, threshold=tau, target_sparsity=s, layer_id=name, mode=_MODES[mode]), end

    @classmethod
    def from_bytes(cls, data: bytes) -> "PruneMask":
        m, end = cls.read(data)
        if end != len(data):
            raise FormatError(f"{len(data) - end} trailing bytes after mask section")
        return m


def prune_count(s: float, n: int) -> int:
    # round first so 0.29 * 100 == 28.999999999999996 still yields 29
    return math.floor(round(s * n, 9))


def _select(mags: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Indices of the ``k`` smallest magnitudes (stable order) and the threshold."""
    if k == 0:
        return np.empty(0, dtype=np.int64), -math.inf
    order = np.argsort(mags, kind="stable")[:k]
    return order, float(mags[order[-1]])


def compute_masks(weights: dict, plan: PrunePlan) -> dict:
    ids = sorted(weights)
    mats = {lid: as_matrix(weights[lid]) for lid in ids}
    included = [lid for lid in ids if lid not in plan.excluded_layers]
    masks = {}
    s = plan.target_sparsity

    if plan.mode == GLOBAL and included:
        mags = np.concatenate([np.abs(mats[lid]).ravel() for lid in included])
        picked, tau = _select(mags, prune_count(s, mags.size))
        keep = np.ones(mags.size, dtype=bool)
        keep[picked] = False
        start = 0
        for lid in included:
            n = mats[lid].size
            masks[lid] = PruneMask(keep[start:start + n].reshape(mats[lid].shape).copy(), tau, s, lid, GLOBAL)
            start += n
    else:
        for lid in included:
            mags = np.abs(mats[lid]).ravel()
            picked, tau = _select(mags, prune_count(s, mags.size))
            keep = np.ones(mags.size, dtype=bool)
            keep[picked] = False
            masks[lid] = PruneMask(keep.reshape(mats[lid].shape), tau, s, lid, plan.mode)

    for lid in ids:
        if lid in plan.excluded_layers:
            masks[lid] = PruneMask(np.ones(mats[lid].shape, dtype=bool), -math.inf, 0.0, lid, plan.mode)
    return {lid: masks[lid] for lid in ids}


def apply_mask(w: np.ndarray, m: PruneMask) -> np.ndarray:
    if w.shape != m.mask.shape:
        raise ShapeError(f"weight {w.shape} and mask {m.mask.shape} differ in shape")
    return w * m.mask


def reapply_masks(weights: dict, masks: dict, excluded=()) -> dict:
    """Zero every masked position again, e.g. after an optimizer update."""
    out = {}
    for lid, w in weights.items():
        if lid in masks:
            out[lid] = apply_mask(w, masks[lid])
        elif lid in excluded:
            out[lid] = w
        else:
            raise ConsistencyError(f"no pruning mask for layer {lid!r}")
    return out


@dataclass
class LayerSparsity:
    layer_id: str
    size: int
    masked: int
    zeros_at_masked: int
    target: float

    @property
    def achieved(self) -> float:
        return self.zeros_at_masked / self.size


@dataclass
class SparsityReport:
    layers: dict
    target: float | None = None

    @property
    def total(self) -> int:
        return sum(l.size for l in self.layers.values())

    @property
    def achieved(self) -> float | None:
        if not self.layers:
            return None
        return sum(l.zeros_at_masked for l in self.layers.values()) / self.total

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "achieved": self.achieved,
            "total": self.total,
            "layers": {
                lid: {"size": l.size, "masked": l.masked, "zeros_at_masked": l.zeros_at_masked,
                      "target": l.target, "achieved": l.achieved}
                for lid, l in self.layers.items()
            },
        }


def sparsity_report(weights: dict, masks: dict) -> SparsityReport:
    layers = {}
    targets = set()
    for lid in sorted(weights):
        w = weights[lid]
        m = masks[lid]
        masked = ~m.mask
        layers[lid] = LayerSparsity(lid, int(w.size), int(masked.sum()),
                                    int(np.count_nonzero(w[masked] == 0.0)), m.target_sparsity)
        if m.target_sparsity or m.pruned_count:
            targets.add(m.target_sparsity)
    target = targets.pop() if len(targets) == 1 else None
    return SparsityReport(layers=layers, target=target)
