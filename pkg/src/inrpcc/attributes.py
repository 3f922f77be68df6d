"""Color regression on reconstructed geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from inrpcc.cloud import NearestNeighborIndex, VoxelPointCloud, normalize
from inrpcc.errors import ConfigError, TrainingError
from inrpcc.geometry import TrainingLog
from inrpcc.leafnet import CoordinateNetwork, LeafNetConfig
from inrpcc.nn import AdamState, DimensionError, adam_step, l1_penalty, mse_loss


@dataclass
class AttributeTrainingSet:
    coords: np.ndarray   # normalized, (n, 3)
    targets: np.ndarray  # RGB in [0, 1], (n, 3)

    def __len__(self) -> int:
        return len(self.coords)


def build_attribute_targets(reconstructed: VoxelPointCloud, original: VoxelPointCloud) -> AttributeTrainingSet:
    """Give every reconstructed voxel the color of its nearest original point."""
    if not original.has_colors:
        raise ValueError("original cloud carries no colors")
    if len(reconstructed) == 0:
        raise ValueError("reconstructed geometry is empty")
    idx, _ = NearestNeighborIndex(original.points).query(reconstructed.points)
    return AttributeTrainingSet(reconstructed.normalized(), original.colors[idx])


def attribute_loss(pred: np.ndarray, target: np.ndarray, l1_weight: float, model: CoordinateNetwork):
    """Return ``(loss, dloss/dpred)``; the l1 gradient lands in the model's buffers."""
    if pred.shape != target.shape:
        raise DimensionError(f"attribute_loss: pred {pred.shape} vs target {target.shape}")
    data, grad = mse_loss(pred, target)
    return data + l1_penalty(model.store, l1_weight), grad


@dataclass
class AttributeTrainConfig:
    steps: int = 90000
    l1_weight: float = 0.0
    lr: float = 1e-3
    batch_size: int = 32768
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.l1_weight < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError(f"invalid attribute training config {self}")


def train_attributes(training_set: AttributeTrainingSet, arch: LeafNetConfig,
                     cfg: AttributeTrainConfig, log_every: int = 100) -> Tuple[CoordinateNetwork, TrainingLog]:
    if len(training_set) == 0:
        raise ValueError("attribute training set is empty")
    if arch.out_dim != 3:
        raise ConfigError("attribute network must have three outputs")
    model = CoordinateNetwork(arch, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState.for_run(cfg.steps, cfg.lr)
    record = TrainingLog(cfg.seed)
    n = len(training_set)
    for step in range(cfg.steps):
        pick = rng.integers(0, n, cfg.batch_size)
        lr = state.current_lr()
        pred = model.forward(training_set.coords[pick])
        model.store.zero_grad()
        loss, grad = attribute_loss(pred, training_set.targets[pick], cfg.l1_weight, model)
        if not math.isfinite(loss):
            raise TrainingError("attribute loss is not finite", step)
        model.backward(grad)
        adam_step(model.store, state)
        if step % log_every == 0 or step == cfg.steps - 1:
            record.rows.append((step, loss, lr))
    return model, record


def reconstruct_attributes(model: CoordinateNetwork, geometry: VoxelPointCloud) -> VoxelPointCloud:
    colors = model.predict(normalize(geometry.points, geometry.resolution_bits))
    return geometry.with_colors(colors)
