"""Canonical sparse 2-D map: coordinates, features, optional context tokens.

A SparseMap is the universal tensor of the engine: an ordered coordinate
list, a row-aligned feature matrix, and an optional block of global
context-token rows. Canonical ordering is row-major (y ascending, then x
ascending), which makes every downstream rulebook deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateCoordinate,
    EmptyMap,
    Misaligned,
    TruncatedStream,
    VersionUnsupported,
)

MAGIC = b"SPAN"
FORMAT_VERSION = 1

# Coordinates are (x, y) pairs of non-negative ints. Arrays use int64 so the
# packed row-major sort key (y << 32 | x) never overflows.
Coord = tuple[int, int]


def coord_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (x, y) rows into sortable int64 keys; ascending keys == row-major."""
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 1] << 32) | c[:, 0]


def keys_to_coords(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    return np.stack([k & 0xFFFFFFFF, k >> 32], axis=1)


def as_coord_array(coords) -> np.ndarray:
    """Coerce a coordinate list to an (N, 2) int64 array."""
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DimensionMismatch(f"coordinates must be (N, 2), got {arr.shape}")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SparseMap:
    """(coords, features, context) triple in canonical row-major order.

    coords:   (N, 2) int64, columns (x, y), sorted by (y, x), no duplicates.
    features: (N, d) float32 or float64, row i belongs to coords[i].
    context:  (num_ctx, d) global context-token rows (possibly zero rows).
    """

    coords: np.ndarray
    features: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DimensionMismatch(f"coords shape {self.coords.shape}")
        if self.features.ndim != 2:
            raise DimensionMismatch(f"features shape {self.features.shape}")
        if self.context.ndim != 2 or self.context.shape[1] != self.features.shape[1]:
            raise DimensionMismatch(
                f"context shape {self.context.shape} vs feature dim {self.features.shape[1]}"
            )
        if len(self.coords) != len(self.features):
            raise DimensionMismatch(
                f"{len(self.coords)} coords vs {len(self.features)} feature rows"
            )
        if self.coords.size and self.coords.min() < 0:
            raise ValueError("negative coordinate in SparseMap")
        keys = coord_keys(self.coords)
        if len(keys) > 1:
            deltas = np.diff(keys)
            if (deltas <= 0).any():
                bad = int(np.argmax(deltas <= 0)) + 1
                if deltas[bad - 1] == 0:
                    raise DuplicateCoordinate(self.coords[bad])
                raise ValueError("coords not in canonical row-major order")
        _freeze(self.coords)
        _freeze(self.features)
        _freeze(self.context)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_ctx(self) -> int:
        return len(self.context)

    def with_features(self, features: np.ndarray, context: np.ndarray) -> "SparseMap":
        """New map sharing these coordinates (already canonical, skips re-sort)."""
        return SparseMap(self.coords, np.ascontiguousarray(features),
                         np.ascontiguousarray(context))


@dataclass(frozen=True)
class DenseIndexGrid:
    """Dense grid of 1-based token ids (0 = empty) covering the bounding box."""

    cells: np.ndarray

    def __post_init__(self):
        _freeze(self.cells)

    @property
    def bounds(self) -> tuple[int, int]:
        return self.cells.shape


@dataclass(frozen=True)
class Rect:
    """Pixel-space rectangle (start_x, start_y, w, h), w > 0 and h > 0."""

    start_x: int
    start_y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate rect {self}")


def build_sparse_map(coords, features, num_ctx: int = 0, dtype=None) -> SparseMap:
    """Canonicalize coordinates and features into a SparseMap.

    Features are permuted together with the coordinate sort. Context is
    zero-initialized with num_ctx rows. Duplicate coordinates are a hard
    error: the preprocessing contract is one patch per grid cell.
    """
    carr = as_coord_array(coords)
    feats = np.asarray(features)
    if feats.ndim != 2:
        feats = feats.reshape(len(carr), -1)
    if dtype is None:
        dtype = feats.dtype if feats.dtype in (np.float32, np.float64) else np.float32
    feats = np.ascontiguousarray(feats, dtype=dtype)
    if len(carr) != len(feats):
        raise DimensionMismatch(f"{len(carr)} coords vs {len(feats)} feature rows")
    if carr.size and carr.min() < 0:
        raise ValueError("negative coordinate")
    keys = coord_keys(carr)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    dup = np.nonzero(np.diff(keys) == 0)[0]
    if dup.size:
        raise DuplicateCoordinate(keys_to_coords(keys[dup[:1]])[0])
    ctx = np.zeros((num_ctx, feats.shape[1]), dtype=dtype)
    return SparseMap(carr[order], feats[order], ctx)


def index_cells(coords: np.ndarray) -> np.ndarray:
    """Dense (H, W) grid of 1-based token ids over the bounding box."""
    n = len(coords)
    h = int(coords[:, 1].max()) + 1
    w = int(coords[:, 0].max()) + 1
    cells = np.zeros((h, w), dtype=np.int64)
    cells[coords[:, 1], coords[:, 0]] = np.arange(1, n + 1)
    return cells


def densify_index_grid(smap: SparseMap) -> DenseIndexGrid:
    """Scatter 1-based token ids onto the dense bounding-box grid."""
    if smap.n == 0:
        raise EmptyMap("cannot densify an empty map")
    return DenseIndexGrid(index_cells(smap.coords))


def align_rect(r: Rect, step: int) -> Rect:
    """Snap the rect start down to a multiple of step, growing w/h to match.

    The pixel end points (start + size per axis) are unchanged.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rx = r.start_x % step
    ry = r.start_y % step
    return Rect(r.start_x - rx, r.start_y - ry, r.w + rx, r.h + ry)


def patchify_rect(r: Rect, step: int) -> np.ndarray:
    """Grid coordinates of every full step-by-step tile inside an aligned rect."""
    if step <= 0:
        raise ValueError("step must be positive")
    if r.start_x % step or r.start_y % step:
        raise Misaligned(f"rect start ({r.start_x}, {r.start_y}) not aligned to {step}")
    nx = r.w // step
    ny = r.h // step
    x0 = r.start_x // step
    y0 = r.start_y // step
    ys, xs = np.mgrid[y0 : y0 + ny, x0 : x0 + nx]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.int64)


def serialize(smap: SparseMap) -> bytes:
    """Encode a map as bytes: magic, version, N/d/num_ctx, coords, features, context.

    All integers are 32-bit little-endian; feature values are 32-bit IEEE-754
    little-endian, row-major. Round trips are bit-exact for float32 maps.
    """
    n, d, c = smap.n, smap.dim, smap.num_ctx
    if smap.coords.size and smap.coords.max() > np.iinfo(np.int32).max:
        raise ValueError("coordinate too large for the 32-bit stream format")
    parts = [
        MAGIC,
        struct.pack("<IIII", FORMAT_VERSION, n, d, c),
        smap.coords.astype("<i4").tobytes(),
        smap.features.astype("<f4").tobytes(),
        smap.context.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def deserialize(data: bytes) -> SparseMap:
    """Decode bytes produced by serialize back into a SparseMap."""
    if len(data) < 4:
        raise TruncatedStream("stream shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 20:
        raise TruncatedStream("stream shorter than the header")
    version, n, d, c = struct.unpack("<IIII", data[4:20])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version}")
    need = 20 + 8 * n + 4 * n * d + 4 * c * d
    if len(data) < need:
        raise TruncatedStream(f"need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise TruncatedStream(f"{len(data) - need} trailing bytes after the map")
    off = 20
    coords = np.frombuffer(data, dtype="<i4", count=2 * n, offset=off)
    coords = coords.reshape(n, 2).astype(np.int64)
    off += 8 * n
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=off)
    feats = feats.reshape(n, d).astype(np.float32)
    off += 4 * n * d
    ctx = np.frombuffer(data, dtype="<f4", count=c * d, offset=off)
    ctx = ctx.reshape(c, d).astype(np.float32)
    return SparseMap(coords, feats, ctx)
