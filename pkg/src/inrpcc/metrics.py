"""Distortion and rate metrics, and Bjontegaard deltas between RD curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from inrpcc.cloud import NearestNeighborIndex, VoxelPointCloud
from inrpcc.errors import EvaluationError

# reported in place of +inf when the error is exactly zero
LOSSLESS_DB = 200.0


def _check_pair(a: VoxelPointCloud, b: VoxelPointCloud) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("metrics need two non-empty clouds")
    if a.resolution_bits != b.resolution_bits:
        raise ValueError(f"resolution mismatch: N={a.resolution_bits} vs N={b.resolution_bits}")


def directional_mse(source: np.ndarray, target_index: NearestNeighborIndex) -> float:
    """Mean squared distance from each source point to its nearest target point."""
    return float(target_index.query_distances(source).mean())


def psnr_from_mse(mse: float, peak_sq: float) -> float:
    if mse <= 0.0:
        return LOSSLESS_DB
    return min(LOSSLESS_DB, 10.0 * math.log10(peak_sq / mse))


def d1_psnr(a: VoxelPointCloud, b: VoxelPointCloud) -> float:
    """Symmetric point-to-point PSNR with peak ``3 (2^N - 1)^2``."""
    _check_pair(a, b)
    e_ba = directional_mse(b.points, NearestNeighborIndex(a.points))
    e_ab = directional_mse(a.points, NearestNeighborIndex(b.points))
    peak = 3.0 * ((1 << a.resolution_bits) - 1) ** 2
    return psnr_from_mse(max(e_ab, e_ba), peak)


def is_lossless(db: float) -> bool:
    return db >= LOSSLESS_DB


def _color_mse(source: VoxelPointCloud, target: VoxelPointCloud) -> float:
    idx, _ = NearestNeighborIndex(target.points).query(source.points)
    diff = source.colors - target.colors[idx]
    return float((diff * diff).mean())


def color_psnr(a: VoxelPointCloud, b: VoxelPointCloud) -> float:
    """RGB PSNR (peak 1.0) from per-channel MSE of nearest-neighbor pairs, worst direction."""
    _check_pair(a, b)
    if not (a.has_colors and b.has_colors):
        raise ValueError("color_psnr needs colors on both clouds")
    return psnr_from_mse(max(_color_mse(a, b), _color_mse(b, a)), 1.0)


def bits_per_point(num_bytes: int, num_points: int) -> float:
    if num_points <= 0:
        raise ValueError("bits_per_point needs a positive point count")
    return 8.0 * num_bytes / num_points


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and math.isfinite(self.quality)) or self.bpp <= 0:
            raise ValueError(f"invalid RD point {self}")


def _curve(points: Sequence[RdPoint]):
    if len(points) < 4:
        raise EvaluationError(f"BD delta needs at least 4 RD points, got {len(points)}")
    pts = sorted(points, key=lambda p: p.bpp)
    log_rate = np.log10([p.bpp for p in pts])
    quality = np.array([p.quality for p in pts], dtype=np.float64)
    return log_rate, quality


def _mean_over(x: np.ndarray, y: np.ndarray, lo: float, hi: float, method: str) -> float:
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    if method == "cubic":
        poly = np.polyint(np.polyfit(x, y, 3))
        area = np.polyval(poly, hi) - np.polyval(poly, lo)
    elif method == "pchip":
        if np.any(np.diff(x) <= 0):
            raise EvaluationError("pchip integration needs strictly monotone abscissae")
        area = PchipInterpolator(x, y).integrate(lo, hi)
    else:
        raise ValueError(f"unknown BD integration method {method!r}")
    return float(area) / (hi - lo)


def bd_delta(curve_ref: Sequence[RdPoint], curve_test: Sequence[RdPoint],
             mode: str = "rate", method: str = "cubic") -> float:
    """Bjontegaard delta of ``curve_test`` against ``curve_ref``.

    ``mode="rate"`` gives the average bitrate difference in percent at equal
    quality (negative is better); ``mode="quality"`` the average quality
    difference at equal rate (positive is better).
    """
    lr_ref, q_ref = _curve(curve_ref)
    lr_test, q_test = _curve(curve_test)
    if mode == "rate":
        lo, hi = max(q_ref.min(), q_test.min()), min(q_ref.max(), q_test.max())
        if hi <= lo:
            raise EvaluationError("quality ranges do not overlap")
        avg = _mean_over(q_test, lr_test, lo, hi, method) - _mean_over(q_ref, lr_ref, lo, hi, method)
        return (10.0 ** avg - 1.0) * 100.0
    if mode == "quality":
        lo, hi = max(lr_ref.min(), lr_test.min()), min(lr_ref.max(), lr_test.max())
        if hi <= lo:
            raise EvaluationError("rate ranges do not overlap")
        return _mean_over(lr_test, q_test, lo, hi, method) - _mean_over(lr_ref, q_ref, lo, hi, method)
    raise ValueError(f"mode must be 'rate' or 'quality', got {mode!r}")


RD_FIELDS = ("codec", "lambda", "bpp", "d1_psnr", "color_psnr")


def write_rd_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RD_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rd_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("lambda", "bpp", "d1_psnr", "color_psnr"):
            if row.get(key) not in (None, ""):
                row[key] = float(row[key])
    return rows
