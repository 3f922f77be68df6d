"""Codec configuration, profiles and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional

from inrpcc.errors import ConfigError
from inrpcc.leafnet import LeafNetConfig, ModelDictionary, default_dictionary, select_model


@dataclass(frozen=True)
class CodecConfig:
    resolution_bits: Optional[int] = None   # None: inferred from the input
    coarse_bits: int = 5
    octaves: int = 64
    grid_size: int = 8
    depth: int = 2
    hidden: Optional[int] = None            # None: chosen from the model dictionary
    kind: str = "leaf"
    dictionary: Optional[str] = None        # JSON path; None: built-in dictionary
    target_bpp: float = 1.0
    geometry_steps: int = 120000
    attribute_steps: int = 90000
    alpha: float = 0.5
    gamma: float = 2.0
    alpha_balance: float = 0.5
    l1_geometry: float = 1e-6
    l1_attribute: float = 1e-6
    geometry_exponent: int = 10
    attribute_exponent: int = 12
    batch_size: int = 32768
    lr: float = 1e-3
    seed: int = 0
    threads: int = 1
    threshold_iterations: int = 30

    def validate(self) -> "CodecConfig":
        if self.resolution_bits is not None and not 2 <= self.resolution_bits <= 21:
            raise ConfigError(f"resolution_bits must be in [2, 21], got {self.resolution_bits}")
        if self.coarse_bits < 1 or self.coarse_bits > 10:
            raise ConfigError(f"coarse_bits must be in [1, 10], got {self.coarse_bits}")
        if self.resolution_bits is not None and self.coarse_bits >= self.resolution_bits:
            raise ConfigError(f"coarse_bits ({self.coarse_bits}) must be < resolution_bits ({self.resolution_bits})")
        if not 0 <= self.octaves <= 255:
            raise ConfigError("octaves must be in [0, 255]")
        if self.grid_size < 2 or self.depth < 0:
            raise ConfigError("grid_size must be >= 2 and depth >= 0")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden must be positive")
        if self.kind not in ("leaf", "mlp"):
            raise ConfigError(f"kind must be 'leaf' or 'mlp', got {self.kind!r}")
        if self.geometry_steps < 0 or self.attribute_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if not 0 < self.alpha < 1 or not 0 < self.alpha_balance < 1:
            raise ConfigError("alpha and alpha_balance must lie in (0, 1)")
        if self.gamma < 0 or self.l1_geometry < 0 or self.l1_attribute < 0:
            raise ConfigError("gamma and l1 weights must be non-negative")
        for name in ("geometry_exponent", "attribute_exponent"):
            if not 0 <= getattr(self, name) <= 30:
                raise ConfigError(f"{name} must be in [0, 30]")
        if self.batch_size < 1 or self.lr <= 0 or self.threads < 1 or self.target_bpp <= 0:
            raise ConfigError("batch_size, lr, threads and target_bpp must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.threshold_iterations < 1:
            raise ConfigError("threshold_iterations must be positive")
        self.model_dictionary()
        return self

    def model_dictionary(self) -> ModelDictionary:
        if self.dictionary is None:
            return default_dictionary(self.octaves, self.grid_size)
        try:
            return ModelDictionary.from_json(self.dictionary)
        except OSError as exc:
            raise ConfigError(f"cannot read model dictionary {self.dictionary}: {exc}") from exc

    def architecture(self, out_dim: int) -> LeafNetConfig:
        if self.hidden is not None:
            base = LeafNetConfig.standard(self.hidden, 1, self.octaves, self.grid_size, self.depth, self.kind)
        else:
            base = select_model(self.model_dictionary(), self.target_bpp)
        return base.with_outputs(out_dim)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides) -> "CodecConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)


FULL = CodecConfig()

# desk-scale profile: small networks and short schedules for N around 7.
# The attribute net carries most of the payload at this scale, so it gets the
# stronger sparsity penalty; geometry at 1e-5 still reconstructs losslessly.
DESK = CodecConfig(
    coarse_bits=5,
    octaves=8,
    hidden=24,
    geometry_steps=5000,
    attribute_steps=3000,
    batch_size=4096,
    l1_geometry=1e-5,
    l1_attribute=1e-4,
)

PROFILES = {"full": FULL, "desk": DESK}


def _coerce(field_type: str, raw: str):
    if raw.lower() in ("none", "null"):
        return None
    if "int" in field_type:
        return int(raw)
    if "float" in field_type:
        return float(raw)
    return raw


def parse_overrides(pairs) -> Dict[str, Any]:
    """``["key=value", ...]`` to typed overrides."""
    types = {f.name: str(f.type) for f in fields(CodecConfig)}
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _coerce(types[key], raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return out


def load_config(path: Optional[str] = None, profile: str = "desk", overrides=None) -> CodecConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile]
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cfg.with_overrides(**raw)
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    return cfg.validate()
