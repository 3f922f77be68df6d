"""Uniform scalar quantization of network weights with power-of-two steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np

from inrpcc.errors import QuantizationError
from inrpcc.nn import ParamStore

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class QuantizedTensor:
    name: str
    shape: Tuple[int, int]
    values: np.ndarray  # int64 holding int32-range integers, row-major

    def __post_init__(self):
        if self.values.shape != tuple(self.shape):
            raise ValueError(f"{self.name}: values shape {self.values.shape} != {self.shape}")


@dataclass(frozen=True)
class QuantizedParams:
    """Integer weights ``q`` with step ``2^-exponent``."""

    exponent: int
    tensors: Tuple[QuantizedTensor, ...]

    @property
    def step(self) -> float:
        return 2.0 ** -self.exponent

    def shapes(self) -> List[Tuple[str, Tuple[int, int]]]:
        return [(t.name, t.shape) for t in self.tensors]

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([t.values.ravel() for t in self.tensors])

    def equals(self, other: "QuantizedParams") -> bool:
        return (self.exponent == other.exponent and self.shapes() == other.shapes()
                and all(np.array_equal(a.values, b.values) for a, b in zip(self.tensors, other.tensors)))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(params: Union[ParamStore, Mapping[str, np.ndarray]], exponent: int) -> QuantizedParams:
    items = [(n, v) for n, v, _ in params.items()] if isinstance(params, ParamStore) else list(params.items())
    tensors = []
    for name, value in items:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise QuantizationError(f"{name}: non-finite weights")
        scaled = round_half_away(np.ldexp(value, exponent))
        if np.abs(scaled).max(initial=0.0) > INT32_MAX:
            raise QuantizationError(f"{name}: quantized magnitude exceeds the 32-bit range")
        tensors.append(QuantizedTensor(name, tuple(value.shape), scaled.astype(np.int64)))
    return QuantizedParams(int(exponent), tuple(tensors))


def dequantize(q: QuantizedParams) -> Dict[str, np.ndarray]:
    # ldexp is exact, so every platform reproduces the same weights
    return {t.name: np.ldexp(t.values.astype(np.float64), -q.exponent) for t in q.tensors}
