"""Occupancy-field training and thresholded geometry reconstruction."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from inrpcc.cloud import CubePartition, NearestNeighborIndex, VoxelPointCloud, normalize
from inrpcc.errors import ConfigError, ThresholdError, TrainingError
from inrpcc.leafnet import CoordinateNetwork, LeafNetConfig
from inrpcc.metrics import psnr_from_mse
from inrpcc.nn import AdamState, adam_step, focal_loss, l1_penalty

log = logging.getLogger(__name__)


def calibrated_rate(alpha: float, delta: float) -> float:
    """Probability of drawing a known-occupied voxel so that a uniform draw
    over the sampling space tops the positive ratio up to ``alpha``."""
    if delta >= alpha:
        return 0.0
    return min(1.0, max(0.0, (alpha - delta) / (1.0 - delta)))


@dataclass
class SamplerConfig:
    alpha: float = 0.5
    batch_size: int = 32768
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"sampling alpha must be in (0, 1), got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def sample_batch(cloud: VoxelPointCloud, partition: CubePartition, alpha_hat: float,
                 batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw normalized coordinates and occupancy labels.

    Each item comes from the occupied set with probability ``alpha_hat``;
    otherwise a cube is picked uniformly and a voxel uniformly inside it.
    """
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    from_points = rng.random(batch_size) < alpha_hat
    n_pos = int(from_points.sum())
    n_vox = batch_size - n_pos
    voxels = np.empty((batch_size, 3), dtype=np.int64)
    voxels[from_points] = cloud.points[rng.integers(0, len(cloud), n_pos)]
    cubes = partition.occupied_cubes[rng.integers(0, len(partition.occupied_cubes), n_vox)]
    offsets = rng.integers(0, partition.cube_edge, size=(n_vox, 3))
    voxels[~from_points] = cubes * partition.cube_edge + offsets
    labels = np.ones(batch_size, dtype=np.float64)
    labels[~from_points] = cloud.contains(voxels[~from_points])
    return normalize(voxels, cloud.resolution_bits), labels


@dataclass
class GeometryTrainConfig:
    steps: int = 120000
    gamma: float = 2.0
    alpha_balance: float = 0.5
    l1_weight: float = 0.0
    lr: float = 1e-3
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.steps < 0 or self.gamma < 0 or self.l1_weight < 0 or self.lr <= 0:
            raise ConfigError(f"invalid geometry training config {self}")
        if not 0.0 < self.alpha_balance < 1.0:
            raise ConfigError("alpha_balance must be in (0, 1)")


@dataclass
class TrainingLog:
    seed: int
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def write_csv(self, path, value_name: str = "loss") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", value_name, "lr"])
            writer.writerows(self.rows)


def geometry_loss(model: CoordinateNetwork, coords, labels, cfg: GeometryTrainConfig) -> float:
    """Forward, focal loss plus l1, and backward into the model's gradient buffers."""
    p = model.forward(coords)[:, 0]
    data, grad = focal_loss(p, labels, cfg.gamma, cfg.alpha_balance)
    model.store.zero_grad()
    model.backward(grad[:, None])
    return data + l1_penalty(model.store, cfg.l1_weight)


def train_geometry(cloud: VoxelPointCloud, partition: CubePartition, arch: LeafNetConfig,
                   cfg: GeometryTrainConfig, log_every: int = 100) -> Tuple[CoordinateNetwork, TrainingLog]:
    if arch.out_dim != 1:
        raise ConfigError("geometry network must have a single output")
    seed = cfg.sampler.seed
    model = CoordinateNetwork(arch, seed=seed)
    rng = np.random.default_rng([seed, 1])
    alpha_hat = calibrated_rate(cfg.sampler.alpha, partition.nonempty_fraction)
    state = AdamState.for_run(cfg.steps, cfg.lr)
    record = TrainingLog(seed)
    for step in range(cfg.steps):
        coords, labels = sample_batch(cloud, partition, alpha_hat, cfg.sampler.batch_size, rng)
        lr = state.current_lr()
        loss = geometry_loss(model, coords, labels, cfg)
        if not math.isfinite(loss):
            raise TrainingError("geometry loss is not finite", step)
        adam_step(model.store, state)
        if step % log_every == 0 or step == cfg.steps - 1:
            record.rows.append((step, loss, lr))
    return model, record


def predict_occupancy(model: CoordinateNetwork, partition: CubePartition,
                      cubes_per_chunk: int = 64) -> np.ndarray:
    """Occupancy probability for every voxel of the sampling space, in canonical order."""
    out = np.empty(partition.num_voxels, dtype=np.float64)
    per = partition.voxels_per_cube
    n_cubes = len(partition.occupied_cubes)
    for start in range(0, n_cubes, cubes_per_chunk):
        sl = slice(start, min(n_cubes, start + cubes_per_chunk))
        vox = partition.voxels(sl)
        out[start * per:start * per + len(vox)] = model.predict(normalize(vox, partition.resolution_bits))[:, 0]
    return out


def reconstruct_geometry(model: CoordinateNetwork, partition: CubePartition, threshold: float,
                         probabilities: Optional[np.ndarray] = None) -> VoxelPointCloud:
    if probabilities is None:
        probabilities = predict_occupancy(model, partition)
    return VoxelPointCloud.from_points(partition.voxels()[probabilities > threshold], partition.resolution_bits)


@dataclass
class ThresholdResult:
    threshold: float
    psnr: float
    evaluations: int
    trace: List[Tuple[float, float]] = field(default_factory=list)
    subsampled: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau", "d1_psnr"])
            writer.writerows(self.trace)


class _ThresholdObjective:
    """D1 PSNR of the superlevel set ``{p > tau}`` against a reference cloud.

    Probabilities are sorted once; each probe is a binary search for the
    cut position, and probes landing on the same cut share one evaluation.
    """

    def __init__(self, probabilities, voxels, reference: np.ndarray, resolution_bits: int):
        order = np.argsort(-probabilities, kind="stable")
        self.sorted_desc = probabilities[order]
        self.ascending = self.sorted_desc[::-1]
        self.voxels = voxels[order]
        self.reference = reference
        self.ref_index = NearestNeighborIndex(reference)
        self.peak = 3.0 * ((1 << resolution_bits) - 1) ** 2
        self._cache = {}
        self.trace: List[Tuple[float, float]] = []

    def count_above(self, tau: float) -> int:
        return len(self.ascending) - int(np.searchsorted(self.ascending, tau, side="right"))

    def __call__(self, tau: float) -> float:
        k = self.count_above(tau)
        if k not in self._cache:
            if k == 0:
                self._cache[k] = -math.inf
            else:
                recon = self.voxels[:k]
                e_rec = float(self.ref_index.query_distances(recon).mean())
                e_ref = float(NearestNeighborIndex(recon).query_distances(self.reference).mean())
                self._cache[k] = psnr_from_mse(max(e_rec, e_ref), self.peak)
        value = self._cache[k]
        self.trace.append((tau, value))
        return value


INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(f, lo: float, hi: float, iterations: int):
    """Golden-section search for the maximum of a unimodal ``f`` on ``[lo, hi]``.

    Returns every ``(x, f(x))`` probe so callers can pick the overall best.
    """
    probes = []
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    probes += [(c, fc), (d, fd)]
    for _ in range(iterations):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
            probes.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
            probes.append((d, fd))
    return probes


def dynamic_threshold(probabilities: np.ndarray, partition: CubePartition, original: VoxelPointCloud,
                      lo: float = 0.01, hi: float = 0.99, iterations: int = 30, grid_probes: int = 17,
                      max_eval_points: int = 200_000, seed: int = 0) -> ThresholdResult:
    """Pick the occupancy cutoff maximizing D1 PSNR against ``original``.

    The static cutoff 0.5 is probed first and wins ties, so the result is
    never worse than it. Golden-section probes are cross-checked against an
    even grid in case the objective is not unimodal.
    """
    voxels = partition.voxels()
    reference = original.points
    subsampled = len(reference) > max_eval_points
    if subsampled:
        pick = np.random.default_rng(seed).choice(len(reference), max_eval_points, replace=False)
        reference = reference[np.sort(pick)]
    objective = _ThresholdObjective(probabilities, voxels, reference, partition.resolution_bits)

    probes = [(0.5, objective(0.5))]
    probes += golden_section_max(objective, lo, hi, iterations)
    probes += [(t, objective(t)) for t in np.linspace(lo, hi, grid_probes)]
    best_tau, best_val = probes[0]
    for tau, val in probes[1:]:
        if val > best_val:
            best_tau, best_val = float(tau), val
    if not math.isfinite(best_val):
        raise ThresholdError("every threshold probe produced an empty reconstruction")

    if subsampled:
        full = _ThresholdObjective(probabilities, voxels, original.points, partition.resolution_bits)
        static = full(0.5)
        best_val = full(best_tau)
        if static >= best_val:
            best_tau, best_val = 0.5, static
    return ThresholdResult(float(best_tau), best_val, len(objective.trace), objective.trace, subsampled)
