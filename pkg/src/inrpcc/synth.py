"""Procedural test clouds: sphere shell, torus, checkerboard plane."""

from __future__ import annotations

import numpy as np

from inrpcc.cloud import VoxelPointCloud


def _grid(resolution_bits: int) -> np.ndarray:
    side = 1 << resolution_bits
    axis = np.arange(side)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def _smooth_colors(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    u = (points - center) / scale
    return np.clip(np.stack([
        0.5 + 0.35 * np.sin(np.pi * u[:, 0]),
        0.5 + 0.35 * np.cos(np.pi * u[:, 1]),
        0.5 + 0.30 * u[:, 2],
    ], axis=1), 0.0, 1.0)


def sphere_shell(resolution_bits: int = 7, radius: float = None, colored: bool = True) -> VoxelPointCloud:
    """Voxels within half a voxel of a sphere centered in the grid."""
    side = 1 << resolution_bits
    center = np.full(3, (side - 1) / 2.0)
    radius = side * 0.203 if radius is None else radius
    if radius <= 1 or radius > side / 2 - 1:
        raise ValueError(f"radius {radius} does not fit a {side}^3 grid")
    # only scan the bounding box of the shell
    lo, hi = int(np.floor(center[0] - radius - 1)), int(np.ceil(center[0] + radius + 1))
    axis = np.arange(max(lo, 0), min(hi, side - 1) + 1)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.linalg.norm(pts - center, axis=1)
    pts = pts[np.abs(dist - radius) <= 0.5]
    colors = _smooth_colors(pts, center, radius) if colored else None
    return VoxelPointCloud.from_points(pts, resolution_bits, colors)


def torus(resolution_bits: int = 7, major: float = None, minor: float = None,
          colored: bool = True) -> VoxelPointCloud:
    side = 1 << resolution_bits
    center = np.full(3, (side - 1) / 2.0)
    major = side * 0.25 if major is None else major
    minor = side * 0.08 if minor is None else minor
    pts = _grid(resolution_bits)
    rel = pts - center
    ring = np.sqrt(rel[:, 0] ** 2 + rel[:, 1] ** 2) - major
    dist = np.sqrt(ring ** 2 + rel[:, 2] ** 2)
    pts = pts[np.abs(dist - minor) <= 0.5]
    colors = _smooth_colors(pts, center, major + minor) if colored else None
    return VoxelPointCloud.from_points(pts, resolution_bits, colors)


def checker_plane(resolution_bits: int = 7, squares: int = 2, colored: bool = True) -> VoxelPointCloud:
    """Axis-aligned plane ``z = side/2`` colored in a ``squares x squares`` checkerboard.

    With ``squares=2`` this is a two-color split along both in-plane axes.
    """
    side = 1 << resolution_bits
    axis = np.arange(side)
    xy = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    pts = np.column_stack([xy, np.full(len(xy), side // 2)])
    colors = None
    if colored:
        cell = side // squares
        parity = ((xy[:, 0] // cell) + (xy[:, 1] // cell)) % 2
        colors = np.where(parity[:, None] == 0, [[0.9, 0.2, 0.2]], [[0.2, 0.3, 0.9]])
    return VoxelPointCloud.from_points(pts, resolution_bits, colors)


GENERATORS = {"sphere": sphere_shell, "torus": torus, "plane": checker_plane}
