"""Coordinate networks with learnable activations, plus the rate-indexed model dictionary."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Tuple

import numpy as np

from inrpcc.errors import ConfigError
from inrpcc.nn import (
    Dense,
    DimensionError,
    LearnableActivation,
    ParamStore,
    ResidualBlock,
    Sigmoid,
    StateError,
)


def encoding_dim(octaves: int) -> int:
    return 6 * octaves + 3


def positional_encode(x: np.ndarray, octaves: int) -> np.ndarray:
    """Sinusoidal features of 3-D coordinates.

    Column order is ``x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x),
    cos(2^(L-1) pi x)`` where each entry is a block of three columns (one per
    axis), giving ``6L + 3`` columns in total.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(f"positional_encode expects (batch, 3), got {x.shape}")
    if octaves < 0:
        raise ValueError("octaves must be non-negative")
    parts = [x]
    for k in range(octaves):
        arg = (2.0 ** k) * math.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class LeafNetConfig:
    """Layer layout of one coordinate network.

    ``kind="leaf"`` places learnable activation layers between the dense
    input and output stacks; ``kind="mlp"`` swaps each of them for a
    two-layer residual dense block of the same width (the ablation baseline).
    """

    octaves: int = 8
    input_fc_dims: Tuple[int, ...] = (24,)
    leaf_layers: Tuple[Tuple[int, int, int], ...] = ((24, 24, 8), (24, 24, 8))
    output_fc_dims: Tuple[int, ...] = (1,)
    radius: float = 2.0
    kind: str = "leaf"

    def __post_init__(self):
        object.__setattr__(self, "input_fc_dims", tuple(int(d) for d in self.input_fc_dims))
        object.__setattr__(self, "leaf_layers", tuple(tuple(int(v) for v in l) for l in self.leaf_layers))
        object.__setattr__(self, "output_fc_dims", tuple(int(d) for d in self.output_fc_dims))
        self.validate()

    @classmethod
    def standard(cls, hidden: int, out_dim: int = 1, octaves: int = 8, grid_size: int = 8,
                 depth: int = 2, kind: str = "leaf") -> "LeafNetConfig":
        return cls(octaves, (hidden,), tuple((hidden, hidden, grid_size) for _ in range(depth)),
                   (out_dim,), kind=kind)

    @property
    def out_dim(self) -> int:
        return self.output_fc_dims[-1]

    @property
    def hidden(self) -> int:
        return self.leaf_layers[0][1] if self.leaf_layers else self.input_fc_dims[-1]

    def with_outputs(self, out_dim: int) -> "LeafNetConfig":
        return replace(self, output_fc_dims=self.output_fc_dims[:-1] + (out_dim,))

    def validate(self) -> None:
        if self.octaves < 0 or self.octaves > 255:
            raise ConfigError(f"octaves must be in [0, 255], got {self.octaves}")
        if self.kind not in ("leaf", "mlp"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if not self.output_fc_dims:
            raise ConfigError("output_fc_dims must end in the output dimension")
        if self.output_fc_dims[-1] not in (1, 3):
            raise ConfigError("output dimension must be 1 (geometry) or 3 (attributes)")
        width = encoding_dim(self.octaves)
        for d in self.input_fc_dims:
            if d < 1:
                raise ConfigError("layer widths must be positive")
            width = d
        for i, (din, dout, grid) in enumerate(self.leaf_layers):
            if din != width:
                raise ConfigError(f"leaf layer {i} expects {din} inputs but receives {width}")
            if grid < 2 or dout < 1:
                raise ConfigError(f"leaf layer {i}: invalid (out={dout}, G={grid})")
            if self.kind == "mlp" and din != dout:
                raise ConfigError("mlp residual blocks need equal in/out widths")
            width = dout
        if any(d < 1 for d in self.output_fc_dims):
            raise ConfigError("layer widths must be positive")

    def num_params(self) -> int:
        count, width = 0, encoding_dim(self.octaves)
        for d in self.input_fc_dims:
            count += width * d + d
            width = d
        for din, dout, grid in self.leaf_layers:
            count += 2 * (din * din + din) if self.kind == "mlp" else dout * din * (1 + grid)
            width = dout
        for d in self.output_fc_dims:
            count += width * d + d
            width = d
        return count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_fc_dims"] = list(self.input_fc_dims)
        d["leaf_layers"] = [list(l) for l in self.leaf_layers]
        d["output_fc_dims"] = list(self.output_fc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LeafNetConfig":
        if "hidden" in d:
            extra = {k: d[k] for k in ("octaves", "grid_size", "depth", "kind") if k in d}
            return cls.standard(int(d["hidden"]), int(d.get("out_dim", 1)), **extra)
        known = {"octaves", "input_fc_dims", "leaf_layers", "output_fc_dims", "radius", "kind"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def mlp_ablation(config: LeafNetConfig, param_ratio: float = 1.5) -> LeafNetConfig:
    """Dense-only counterpart whose hidden width is chosen so its parameter
    count is the closest achievable to ``param_ratio`` times ``config``'s."""
    target = param_ratio * config.num_params()
    depth = len(config.leaf_layers)
    best = None
    for h in range(1, 4 * config.hidden + 64):
        cand = LeafNetConfig(config.octaves, (h,), tuple((h, h, 2) for _ in range(depth)),
                             config.output_fc_dims, config.radius, "mlp")
        gap = abs(cand.num_params() - target)
        if best is None or gap < best[0]:
            best = (gap, cand)
    return best[1]


class CoordinateNetwork:
    """Positional encoding -> dense stack -> learnable activations -> dense stack -> logistic."""

    def __init__(self, config: LeafNetConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        width = encoding_dim(config.octaves)
        for i, d in enumerate(config.input_fc_dims):
            self.layers.append(Dense(self.store, f"in{i}", width, d, rng))
            width = d
        for i, (din, dout, grid) in enumerate(config.leaf_layers):
            if config.kind == "mlp":
                self.layers.append(ResidualBlock(self.store, f"res{i}", din, rng))
            else:
                self.layers.append(LearnableActivation(self.store, f"leaf{i}", din, dout, grid, config.radius, rng))
            width = dout
        for i, d in enumerate(config.output_fc_dims):
            self.layers.append(Dense(self.store, f"out{i}", width, d, rng))
            width = d
        self.head = Sigmoid()
        self._forwarded = False

    @property
    def dtype(self):
        return self.store.dtype

    def forward(self, coords: np.ndarray) -> np.ndarray:
        """Normalized coordinates ``(B, 3)`` -> outputs in ``(0, 1)`` of shape ``(B, k)``."""
        h = positional_encode(np.asarray(coords, dtype=self.dtype), self.config.octaves)
        for layer in self.layers:
            h = layer.forward(h)
        self._forwarded = True
        return self.head.forward(h)

    def backward(self, grad_output: np.ndarray) -> None:
        """Accumulate parameter gradients given dLoss/dOutput from the last forward."""
        if not self._forwarded:
            raise StateError("backward called before forward")
        g = self.head.backward(grad_output)
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def predict(self, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Batched inference in fixed-size chunks (keeps results independent of caller batching)."""
        coords = np.asarray(coords, dtype=self.dtype)
        out = np.empty((len(coords), self.config.out_dim), dtype=self.dtype)
        for start in range(0, len(coords), chunk):
            out[start:start + chunk] = self.forward(coords[start:start + chunk])
        self._forwarded = False
        return out

    def output_bias_name(self) -> str:
        return f"out{len(self.config.output_fc_dims) - 1}.bias"


@dataclass(frozen=True)
class DictionaryEntry:
    max_bpp: float
    config: LeafNetConfig


@dataclass(frozen=True)
class ModelDictionary:
    """Architectures indexed by the largest target bpp each should serve."""

    entries: Tuple[DictionaryEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        bounds = [e.max_bpp for e in entries]
        if any(b <= 0 for b in bounds):
            raise ConfigError("bpp thresholds must be positive")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ConfigError(f"bpp thresholds must be strictly increasing: {bounds}")

    @classmethod
    def from_json(cls, path) -> "ModelDictionary":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelDictionary":
        items = raw.get("models", raw) if isinstance(raw, dict) else raw
        try:
            return cls(tuple(DictionaryEntry(float(e["max_bpp"]), LeafNetConfig.from_dict(e["architecture"]))
                             for e in items))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model dictionary: {exc}") from exc

    def to_dict(self) -> dict:
        return {"models": [{"max_bpp": e.max_bpp, "architecture": e.config.to_dict()} for e in self.entries]}


def default_dictionary(octaves: int = 8, grid_size: int = 8) -> ModelDictionary:
    # thresholds are placeholders until calibrated by an RD sweep on real data
    return ModelDictionary(tuple(
        DictionaryEntry(bound, LeafNetConfig.standard(h, 1, octaves, grid_size))
        for bound, h in ((2.0, 24), (6.0, 36), (16.0, 48))
    ))


def select_model(dictionary: ModelDictionary, target_bpp: float) -> LeafNetConfig:
    if not dictionary.entries:
        raise ConfigError("model dictionary is empty")
    for entry in dictionary.entries:
        if target_bpp <= entry.max_bpp:
            return entry.config
    return dictionary.entries[-1].config
