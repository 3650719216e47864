"""Index patterns and the pack / unpack / scatter primitives.

Data arrays are flat 1-D numpy arrays holding ``blocklen`` elements per
graph vertex. Every primitive addresses vertices; block ``i`` occupies
``data[i*blocklen:(i+1)*blocklen]``.

Patterns let the hot paths skip index arrays: a :class:`Contiguous` range
is packed by returning a view of the source (no copy), a :class:`Strided3D`
box by a strided view, and only :class:`Indexed` lists need fancy indexing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

_KINDS = {
    "int32": np.dtype(np.int32),
    "int64": np.dtype(np.int64),
    "float64": np.dtype(np.float64),
    "bytes": np.dtype(np.uint8),
}


@dataclass(frozen=True)
class Unit:
    """Element kind plus the number of elements carried by one vertex."""

    kind: str = "int64"
    blocklen: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}; expected one of {sorted(_KINDS)}")
        if self.blocklen < 1:
            raise ValueError("blocklen must be >= 1")

    @property
    def dtype(self) -> np.dtype:
        return _KINDS[self.kind]

    @property
    def nbytes(self) -> int:
        return self.dtype.itemsize * self.blocklen

    @property
    def is_integer(self) -> bool:
        return self.kind in ("int32", "int64")

    @property
    def is_opaque(self) -> bool:
        return self.kind == "bytes"

    @classmethod
    def coerce(cls, unit) -> "Unit":
        if isinstance(unit, Unit):
            return unit
        dt = np.dtype(unit)
        for name, kind_dt in _KINDS.items():
            if kind_dt == dt:
                return cls(name)
        raise ValueError(f"no unit kind for dtype {dt}")


INT32 = Unit("int32")
INT64 = Unit("int64")
FLOAT64 = Unit("float64")


class ReduceOp(enum.Enum):
    REPLACE = "replace"
    SUM = "sum"
    PROD = "prod"
    MAX = "max"
    MIN = "min"
    LAND = "land"
    LOR = "lor"
    BAND = "band"
    BOR = "bor"

    def check(self, unit: Unit) -> None:
        if self is ReduceOp.REPLACE:
            return
        if unit.is_opaque:
            raise TypeError(f"{self.name} needs a numeric unit, got opaque bytes")
        if self in _INTEGER_ONLY and not unit.is_integer:
            raise TypeError(f"{self.name} needs an integer unit, got {unit.kind}")

    def combine(self, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        """Elementwise ``old (+) new`` for distinct destinations."""
        if self is ReduceOp.REPLACE:
            return new
        if self is ReduceOp.LAND:
            return ((old != 0) & (new != 0)).astype(old.dtype)
        if self is ReduceOp.LOR:
            return ((old != 0) | (new != 0)).astype(old.dtype)
        return _UFUNCS[self](old, new)

    def apply_at(self, dst: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
        """``dst[idx[i]] (+)= vals[i]`` applied one contribution at a time, in order."""
        if self is ReduceOp.REPLACE:
            dst[idx] = vals
        elif self in (ReduceOp.LAND, ReduceOp.LOR):
            # normalize touched entries to 0/1, then AND = min and OR = max
            dst[idx] = (dst[idx] != 0).astype(dst.dtype)
            ufunc = np.minimum if self is ReduceOp.LAND else np.maximum
            ufunc.at(dst, idx, (vals != 0).astype(dst.dtype))
        else:
            _UFUNCS[self].at(dst, idx, vals)


_INTEGER_ONLY = {ReduceOp.LAND, ReduceOp.LOR, ReduceOp.BAND, ReduceOp.BOR}
_UFUNCS = {
    ReduceOp.SUM: np.add,
    ReduceOp.PROD: np.multiply,
    ReduceOp.MAX: np.maximum,
    ReduceOp.MIN: np.minimum,
    ReduceOp.BAND: np.bitwise_and,
    ReduceOp.BOR: np.bitwise_or,
}


# -- patterns -------------------------------------------------------------


@dataclass(frozen=True)
class Contiguous:
    start: int
    count: int

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.count, dtype=np.int64)

    @property
    def max_index(self) -> int:
        return self.start + self.count - 1

    has_duplicates = False


@dataclass(frozen=True)
class Strided3D:
    """Box ``[dx, dy, dz]`` inside a domain with row length ``X`` and plane size ``XY``."""

    start: int
    dx: int
    dy: int
    dz: int
    X: int
    XY: int

    @property
    def count(self) -> int:
        return self.dx * self.dy * self.dz

    def indices(self) -> np.ndarray:
        k, j, i = np.meshgrid(np.arange(self.dz), np.arange(self.dy), np.arange(self.dx), indexing="ij")
        return (self.start + self.XY * k + self.X * j + i).reshape(-1).astype(np.int64)

    @property
    def max_index(self) -> int:
        return self.start + self.XY * (self.dz - 1) + self.X * (self.dy - 1) + self.dx - 1

    has_duplicates = False


@dataclass(frozen=True, eq=False)
class Indexed:
    idx: np.ndarray
    has_duplicates: bool = field(default=False)

    @property
    def count(self) -> int:
        return int(self.idx.size)

    def indices(self) -> np.ndarray:
        return self.idx

    @property
    def max_index(self) -> int:
        return int(self.idx.max()) if self.idx.size else -1

    def __eq__(self, other):
        return isinstance(other, Indexed) and np.array_equal(self.idx, other.idx)

    def __repr__(self):
        return f"Indexed({self.idx.tolist()!r}, has_duplicates={self.has_duplicates})"


IndexPattern = Union[Contiguous, Strided3D, Indexed]


def analyze(
    indices: Optional[Sequence[int]],
    n: Optional[int] = None,
    extents: Optional[tuple[int, int]] = None,
) -> IndexPattern:
    """Classify an index list. ``None`` means ``0..n-1``.

    Strided boxes are only searched for when the caller provides the domain
    ``extents = (X, XY)``; the shape cannot be recovered from indices alone.
    """
    if indices is None:
        if n is None:
            raise ValueError("need n when indices is None")
        return Contiguous(0, int(n))
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return Contiguous(0, 0)
    if np.any(idx < 0):
        raise IndexError("negative vertex index")
    start = int(idx[0])
    if idx.size == 1 or (int(idx[-1]) - start == idx.size - 1 and np.all(np.diff(idx) == 1)):
        return Contiguous(start, int(idx.size))
    if extents is not None:
        box = _find_box(idx, *extents)
        if box is not None:
            return box
    dup = bool(np.unique(idx).size != idx.size)
    return Indexed(idx.copy(), dup)


def _find_box(idx: np.ndarray, X: int, XY: int) -> Optional[Strided3D]:
    start = int(idx[0])
    count = idx.size
    dx = 1
    while dx < count and dx < X and idx[dx] == start + dx:
        dx += 1
    if count % dx:
        return None
    nrows = count // dx
    dy = 1
    while dy < nrows and idx[dy * dx] == start + X * dy:
        dy += 1
    while nrows % dy:
        dy -= 1
    box = Strided3D(start, dx, dy, nrows // dy, X, XY)
    if np.array_equal(box.indices(), idx):
        return box
    return None


# -- primitives -----------------------------------------------------------


@dataclass
class PackStats:
    """Instrumentation: how often data went through an intermediate buffer."""

    pack_copies: int = 0
    unpack_copies: int = 0
    replace_conflicts: int = 0
    # roots of degree > 1 overwritten by a REPLACE reduce (one leaf wins)
    replace_roots: int = 0

    @property
    def copies(self) -> int:
        return self.pack_copies + self.unpack_copies

    def reset(self) -> None:
        self.pack_copies = self.unpack_copies = self.replace_conflicts = self.replace_roots = 0


def _blocks(arr: np.ndarray, unit: Unit) -> np.ndarray:
    if arr.ndim != 1:
        raise ValueError("data arrays must be one-dimensional")
    if arr.size % unit.blocklen:
        raise ValueError(f"array length {arr.size} is not a multiple of blocklen {unit.blocklen}")
    return arr.reshape(-1, unit.blocklen)


def _check_bounds(blocks: np.ndarray, pat: IndexPattern) -> None:
    if pat.count and pat.max_index >= blocks.shape[0]:
        raise IndexError(f"pattern reaches vertex {pat.max_index} but array holds {blocks.shape[0]}")


def _box_view(blocks: np.ndarray, box: Strided3D) -> np.ndarray:
    s0, s1 = blocks.strides
    base = blocks[box.start:]
    return as_strided(base, shape=(box.dz, box.dy, box.dx, blocks.shape[1]), strides=(box.XY * s0, box.X * s0, s0, s1))


def select(src: np.ndarray, pat: IndexPattern, unit: Unit) -> np.ndarray:
    """Selected blocks as an ``(count, blocklen)`` array; a view when the pattern allows it."""
    blocks = _blocks(src, unit)
    _check_bounds(blocks, pat)
    if isinstance(pat, Contiguous):
        return blocks[pat.start:pat.start + pat.count]
    if isinstance(pat, Strided3D):
        return _box_view(blocks, pat).reshape(-1, unit.blocklen)
    return blocks[pat.idx]


def pack(src: np.ndarray, pat: IndexPattern, unit: Unit, stats: Optional[PackStats] = None) -> np.ndarray:
    """Gather the selected vertices into a flat buffer.

    For a contiguous pattern the returned array *is* the source region
    (a view, no copy) and ``stats.pack_copies`` is left untouched.
    """
    sel = select(src, pat, unit)
    if isinstance(pat, Contiguous):
        return sel.reshape(-1)
    if stats is not None:
        stats.pack_copies += 1
    return np.ascontiguousarray(sel).reshape(-1)


def destination_view(dst: np.ndarray, pat: IndexPattern, unit: Unit) -> Optional[np.ndarray]:
    """Flat writable view of the destination region, if the pattern is contiguous."""
    if not isinstance(pat, Contiguous):
        return None
    blocks = _blocks(dst, unit)
    _check_bounds(blocks, pat)
    return blocks[pat.start:pat.start + pat.count].reshape(-1)


def unpack(
    dst: np.ndarray,
    pat: IndexPattern,
    unit: Unit,
    op: ReduceOp,
    buf: np.ndarray,
    stats: Optional[PackStats] = None,
) -> None:
    """``dst[idx(i)] (+)= buf[i]`` for every selected vertex.

    Duplicate destinations are folded one contribution at a time in buffer
    order. With ``REPLACE`` the last contribution wins and the conflict is
    counted in ``stats.replace_conflicts``.
    """
    op.check(unit)
    blocks = _blocks(dst, unit)
    _check_bounds(blocks, pat)
    vals = np.asarray(buf, dtype=unit.dtype).reshape(-1, unit.blocklen)
    if vals.shape[0] != pat.count:
        raise ValueError(f"buffer holds {vals.shape[0]} vertices, pattern selects {pat.count}")
    if isinstance(pat, Contiguous):
        region = blocks[pat.start:pat.start + pat.count]
        region[...] = op.combine(region, vals)
        return
    if isinstance(pat, Strided3D):
        region = _box_view(blocks, pat)
        region[...] = op.combine(region, vals.reshape(region.shape))
        return
    if not pat.has_duplicates:
        blocks[pat.idx] = op.combine(blocks[pat.idx], vals)
        return
    if op is ReduceOp.REPLACE and stats is not None:
        stats.replace_conflicts += 1
    op.apply_at(blocks, pat.idx, vals)


def scatter(
    src: np.ndarray,
    src_pat: IndexPattern,
    dst: np.ndarray,
    dst_pat: IndexPattern,
    unit: Unit,
    op: ReduceOp,
    stats: Optional[PackStats] = None,
) -> None:
    """``dst[dstidx(i)] (+)= src[srcidx(i)]`` without staging through a pack buffer."""
    if src_pat.count != dst_pat.count:
        raise ValueError(f"scatter size mismatch: {src_pat.count} source vs {dst_pat.count} destination vertices")
    unpack(dst, dst_pat, unit, op, select(src, src_pat, unit), stats)


def fetch_and_apply(dst: np.ndarray, idx: np.ndarray, unit: Unit, op: ReduceOp, vals: np.ndarray) -> np.ndarray:
    """Serialized fetch-and-op over ``idx`` in list order.

    Returns, for each contribution, the destination value just before it was
    applied. Repeated indices are handled in rounds: round ``t`` applies the
    ``t``-th occurrence of every index at once, which preserves list order
    per index.
    """
    if op is ReduceOp.REPLACE:
        raise ValueError("fetch-and-op is undefined for REPLACE")
    op.check(unit)
    blocks = _blocks(dst, unit)
    vals = np.asarray(vals, dtype=unit.dtype).reshape(-1, unit.blocklen)
    idx = np.asarray(idx, dtype=np.int64)
    fetched = np.empty_like(vals)
    if idx.size == 0:
        return fetched.reshape(-1)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    first = np.r_[True, sorted_idx[1:] != sorted_idx[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(idx.size), 0))
    occurrence = np.empty(idx.size, dtype=np.int64)
    occurrence[order] = np.arange(idx.size) - group_start
    for t in range(int(occurrence.max()) + 1):
        sel = np.nonzero(occurrence == t)[0]
        rows = idx[sel]
        fetched[sel] = blocks[rows]
        blocks[rows] = op.combine(blocks[rows], vals[sel])
    return fetched.reshape(-1)
