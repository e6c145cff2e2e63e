"""Semantic voxel grids, air/non-air mask algebra, and grid persistence.

Class id 0 is reserved for air everywhere in the package. The ``.occ`` file
format is a fixed little-endian layout:

    magic "OCCG" | u8 version=1 | u32 X,Y,Z | f32 voxel_size |
    3x f32 origin | u16 class_count | X*Y*Z u8 labels (x fastest, then y, then z)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, DimensionMismatch, InvalidClassSet, TruncatedPayload

AIR_CLASS = 0

_MAGIC = b"OCCG"
_VERSION = 1
_HEADER = struct.Struct("<4sBIIIffffH")


@dataclass(frozen=True)
class SemanticVoxelGrid:
    """Dense 3D grid of class labels; labels[x, y, z], class 0 = air."""

    labels: np.ndarray
    voxel_size: float
    origin: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DimensionMismatch(f"labels must be 3D, got shape {labels.shape}")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if not 1 <= self.class_count <= 256:
            raise ValueError("class_count must be in [1, 256]")
        if labels.size and int(labels.max()) >= self.class_count:
            raise ValueError("labels must be < class_count")
        if labels.size and int(labels.min()) < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "labels", labels.astype(np.uint8))
        object.__setattr__(
            self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3)
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        """World coordinates of voxel centers for integer indices (..., 3)."""
        idx = np.asarray(indices, dtype=np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size

    def nonair_indices(self) -> np.ndarray:
        """Integer indices (N, 3) of all non-air voxels, in x-fastest scan order."""
        xs, ys, zs = np.nonzero(self.labels != AIR_CLASS)
        order = np.lexsort((xs, ys, zs))
        return np.stack([xs[order], ys[order], zs[order]], axis=1)

    def with_labels(self, labels: np.ndarray) -> "SemanticVoxelGrid":
        return SemanticVoxelGrid(labels, self.voxel_size, self.origin, self.class_count)


@dataclass(frozen=True)
class AirSplit:
    """Result of splitting a grid into an air map and a non-air label grid."""

    air_part: np.ndarray  # {0,1}, 1 = air
    nonair_part: np.ndarray  # class ids, 0 at air positions


def _validate_class_set(class_set, class_count: int) -> frozenset[int]:
    m = frozenset(int(c) for c in class_set)
    if AIR_CLASS in m:
        raise InvalidClassSet("air class 0 cannot be in the non-air class set")
    bad = [c for c in m if not 0 < c < class_count]
    if bad:
        raise InvalidClassSet(f"class ids {sorted(bad)} out of range [1, {class_count})")
    return m


def indicator(grid: SemanticVoxelGrid, class_set) -> np.ndarray:
    """Binary membership grid: 1 where the voxel label is in class_set."""
    m = _validate_class_set(class_set, grid.class_count)
    return np.isin(grid.labels, sorted(m)).astype(np.uint8)


def split_air(grid: SemanticVoxelGrid, class_set) -> AirSplit:
    """Split into a binary air map and a label grid that keeps only class_set.

    Voxels whose label falls outside class_set are routed to the air part;
    the non-air part carries 0 (background) there.
    """
    ind = indicator(grid, class_set)
    air_part = (1 - ind).astype(np.uint8)
    nonair_part = (grid.labels * ind).astype(np.uint8)
    return AirSplit(air_part=air_part, nonair_part=nonair_part)


def recombine(air_recon: np.ndarray, nonair_recon: np.ndarray) -> np.ndarray:
    """Inverse of split_air: air wherever the air branch asserts it.

    Returns a label array; wrap with SemanticVoxelGrid metadata at the caller.
    """
    air_recon = np.asarray(air_recon)
    nonair_recon = np.asarray(nonair_recon)
    if air_recon.shape != nonair_recon.shape:
        raise DimensionMismatch(
            f"air {air_recon.shape} vs non-air {nonair_recon.shape}"
        )
    return np.where(air_recon != 0, np.uint8(AIR_CLASS), nonair_recon).astype(np.uint8)


def save_grid(grid: SemanticVoxelGrid, path) -> None:
    x, y, z = grid.dims
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        x,
        y,
        z,
        float(grid.voxel_size),
        float(grid.origin[0]),
        float(grid.origin[1]),
        float(grid.origin[2]),
        grid.class_count,
    )
    payload = np.ascontiguousarray(grid.labels.transpose(2, 1, 0)).tobytes()
    Path(path).write_bytes(header + payload)


def load_grid(path) -> SemanticVoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptHeader(f"{path}: file shorter than the fixed header")
    magic, version, x, y, z, voxel_size, ox, oy, oz, class_count = _HEADER.unpack_from(
        raw
    )
    if magic != _MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    expected = x * y * z
    payload = raw[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path}: expected {expected} label bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise CorruptHeader(f"{path}: {len(payload) - expected} trailing bytes")
    labels = (
        np.frombuffer(payload, dtype=np.uint8, count=expected)
        .reshape(z, y, x)
        .transpose(2, 1, 0)
    )
    return SemanticVoxelGrid(
        labels=labels,
        voxel_size=voxel_size,
        origin=np.array([ox, oy, oz]),
        class_count=class_count,
    )
