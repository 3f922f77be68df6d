"""Voxelized point clouds, cube partitions and nearest-neighbor lookup."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from inrpcc.errors import ConfigError, RangeError


def normalize(points: np.ndarray, resolution_bits: int) -> np.ndarray:
    """Map integer voxel coordinates in ``[0, 2^N)`` to ``[-1, 1)``."""
    return np.asarray(points, dtype=np.float64) / float(1 << (resolution_bits - 1)) - 1.0


def denormalize(coords: np.ndarray, resolution_bits: int) -> np.ndarray:
    scaled = (np.asarray(coords, dtype=np.float64) + 1.0) * float(1 << (resolution_bits - 1))
    return np.rint(scaled).astype(np.int64)


def linear_keys(points: np.ndarray, resolution_bits: int) -> np.ndarray:
    """Row-major scalar key per voxel; sorting keys sorts points lexicographically."""
    p = np.asarray(points, dtype=np.int64)
    return (p[:, 0] << (2 * resolution_bits)) | (p[:, 1] << resolution_bits) | p[:, 2]


@dataclass(frozen=True, eq=False)
class VoxelPointCloud:
    """A set of integer voxels at ``resolution_bits`` precision with optional RGB.

    Points are kept unique and in lexicographic order so two clouds holding
    the same set compare equal array-wise.
    """

    resolution_bits: int
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.resolution_bits < 1:
            raise ValueError(f"resolution_bits must be >= 1, got {self.resolution_bits}")
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        limit = (1 << self.resolution_bits) - 1
        if pts.size and (pts.min() < 0 or pts.max() > limit):
            raise RangeError(
                f"coordinates must lie in [0, {limit}] for N={self.resolution_bits}, "
                f"found range [{pts.min()}, {pts.max()}]"
            )
        keys = linear_keys(pts, self.resolution_bits)
        if keys.size > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError("points must be unique and lexicographically sorted; use from_points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError(f"{len(cols)} colors for {len(pts)} points")
            if cols.size and (cols.min() < 0.0 or cols.max() > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            cols.setflags(write=False)
            object.__setattr__(self, "colors", cols)

    @classmethod
    def from_points(cls, points, resolution_bits: int, colors=None) -> "VoxelPointCloud":
        """Deduplicate (first occurrence wins) and sort arbitrary voxel input."""
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        if pts.size:
            limit = (1 << resolution_bits) - 1
            if pts.min() < 0 or pts.max() > limit:
                raise RangeError(
                    f"coordinates must lie in [0, {limit}] for N={resolution_bits}, "
                    f"found range [{pts.min()}, {pts.max()}]"
                )
        keys = linear_keys(pts, resolution_bits)
        _, first = np.unique(keys, return_index=True)
        pts = pts[first]
        cols = None
        if colors is not None:
            cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
            if len(cols) != len(keys):
                raise ValueError(f"{len(cols)} colors for {len(keys)} points")
            cols = cols[first]
        return cls(resolution_bits, pts, cols)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def normalized(self) -> np.ndarray:
        return normalize(self.points, self.resolution_bits)

    @cached_property
    def _keys(self) -> np.ndarray:
        return linear_keys(self.points, self.resolution_bits)

    def keys(self) -> np.ndarray:
        return self._keys

    def contains(self, query: np.ndarray) -> np.ndarray:
        """Boolean membership of each query voxel in this cloud."""
        keys = self.keys()
        q = linear_keys(np.asarray(query, dtype=np.int64).reshape(-1, 3), self.resolution_bits)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == q) if len(keys) else np.zeros(len(q), dtype=bool)

    def with_colors(self, colors) -> "VoxelPointCloud":
        return VoxelPointCloud(self.resolution_bits, self.points, colors)

    def geometry_only(self) -> "VoxelPointCloud":
        return VoxelPointCloud(self.resolution_bits, self.points)

    def same_as(self, other: "VoxelPointCloud") -> bool:
        if self.resolution_bits != other.resolution_bits:
            return False
        if not np.array_equal(self.points, other.points):
            return False
        if (self.colors is None) != (other.colors is None):
            return False
        return self.colors is None or np.array_equal(self.colors, other.colors)


@dataclass(frozen=True, eq=False)
class CubePartition:
    """Occupied coarse cubes of a cloud and the fine voxel space they span."""

    resolution_bits: int
    coarse_bits: int
    occupied_cubes: np.ndarray
    nonempty_fraction: float

    @property
    def cube_edge(self) -> int:
        return 1 << (self.resolution_bits - self.coarse_bits)

    @property
    def voxels_per_cube(self) -> int:
        return self.cube_edge ** 3

    @property
    def num_voxels(self) -> int:
        return len(self.occupied_cubes) * self.voxels_per_cube

    def cube_offsets(self) -> np.ndarray:
        e = self.cube_edge
        grid = np.stack(np.meshgrid(np.arange(e), np.arange(e), np.arange(e), indexing="ij"), axis=-1)
        return grid.reshape(-1, 3).astype(np.int64)

    def voxels(self, cube_slice: slice = slice(None)) -> np.ndarray:
        """Fine voxels of the sampling space, cube-major then voxel-lexicographic."""
        cubes = self.occupied_cubes[cube_slice]
        base = cubes * self.cube_edge
        return (base[:, None, :] + self.cube_offsets()[None, :, :]).reshape(-1, 3)

    def cube_of(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.int64) >> (self.resolution_bits - self.coarse_bits)

    def covers(self, points: np.ndarray) -> np.ndarray:
        cubes = self.cube_of(points)
        keys = linear_keys(self.occupied_cubes, self.coarse_bits)
        q = linear_keys(cubes, self.coarse_bits)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q


def build_partition(cloud: VoxelPointCloud, coarse_bits: int) -> CubePartition:
    n_bits = cloud.resolution_bits
    if not 1 <= coarse_bits < n_bits:
        raise ConfigError(f"coarse_bits must satisfy 1 <= M < N={n_bits}, got {coarse_bits}")
    if len(cloud) == 0:
        raise ValueError("cannot partition an empty cloud")
    shift = n_bits - coarse_bits
    cubes = np.unique(cloud.points >> shift, axis=0)
    volume = len(cubes) * (1 << (3 * shift))
    return CubePartition(n_bits, coarse_bits, cubes, len(cloud) / volume)


def partition_from_cubes(cubes, resolution_bits: int, coarse_bits: int) -> CubePartition:
    """Rebuild a partition on the decoder side, where the occupancy ratio is unknown."""
    cubes = np.asarray(cubes, dtype=np.int64).reshape(-1, 3)
    order = np.argsort(linear_keys(cubes, coarse_bits), kind="stable")
    return CubePartition(resolution_bits, coarse_bits, cubes[order], float("nan"))


class NearestNeighborIndex:
    """kd-tree over a reference point set with deterministic tie-breaking.

    Among equidistant references the lexicographically smallest coordinate wins.
    Safe to query from several threads once built.
    """

    _K = 8

    def __init__(self, reference: np.ndarray):
        ref = np.asarray(reference, dtype=np.int64).reshape(-1, 3)
        if len(ref) == 0:
            raise ValueError("reference point set is empty")
        # lexicographic rank == position in the sorted copy
        self._order = np.lexsort((ref[:, 2], ref[:, 1], ref[:, 0]))
        self._sorted = ref[self._order]
        self._tree = cKDTree(self._sorted.astype(np.float64))

    def __len__(self) -> int:
        return len(self._sorted)

    def query_distances(self, query: np.ndarray) -> np.ndarray:
        """Squared distance from each query to its nearest reference (exact for integers)."""
        q = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        _, idx = self._tree.query(q.astype(np.float64), k=1)
        diff = self._sorted[idx] - q
        return np.einsum("ij,ij->i", diff, diff)

    def query(self, query: np.ndarray):
        """Return ``(indices into the original reference, squared distances)``."""
        q = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        k = min(self._K, len(self._sorted))
        _, idx = self._tree.query(q.astype(np.float64), k=k)
        idx = idx.reshape(len(q), k)
        diff = self._sorted[idx] - q[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        best = d2.min(axis=1)
        tied = np.where(d2 == best[:, None], idx, np.iinfo(np.int64).max)
        rank = tied.min(axis=1)
        if k < len(self._sorted):
            # every candidate tied: more equidistant points may exist beyond k
            overflow = np.flatnonzero((d2 == best[:, None]).all(axis=1))
            for row in overflow:
                radius = np.sqrt(best[row]) + 1e-6
                cand = np.asarray(self._tree.query_ball_point(q[row].astype(np.float64), radius), dtype=np.int64)
                cd = self._sorted[cand] - q[row]
                cd2 = np.einsum("ij,ij->i", cd, cd)
                rank[row] = cand[cd2 == cd2.min()].min()
        return self._order[rank], best


def nearest_neighbor_map(query, reference: VoxelPointCloud | np.ndarray) -> np.ndarray:
    ref = reference.points if isinstance(reference, VoxelPointCloud) else reference
    return NearestNeighborIndex(ref).query(query)[0]

