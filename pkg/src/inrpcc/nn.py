"""Layer-wise reverse-mode differentiation for the small coordinate networks.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into a shared :class:`ParamStore`. There is
no general graph: a network is a fixed chain of layers and the chain is
walked backwards explicitly.

All reductions are plain matrix products over a whole batch, so results
are bit-reproducible for a fixed BLAS and thread count.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


class StateError(RuntimeError):
    """Backward requested without a matching forward pass."""


class DimensionError(ValueError):
    pass


def _check_2d(x: np.ndarray, cols: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != cols:
        raise DimensionError(f"{who}: expected (batch, {cols}) input, got {x.shape}")


def sigmoid(x):
    # expit keeps full relative precision in both tails (no 1 - tiny cancellation)
    return expit(x)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x, s=None):
    if s is None:
        s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


class ParamStore:
    """Ordered named parameters, each paired with a gradient buffer."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype, ndmin=2)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def items(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self._values.items():
            yield name, value, self._grads[name]

    def set(self, name: str, value: np.ndarray) -> None:
        """Overwrite a value in place, keeping the array identity layers hold."""
        target = self._values[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != target.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {target.shape}")
        target[...] = value

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def l1_norm(self) -> float:
        return float(sum(np.abs(v).sum() for v in self._values.values()))

    def shapes(self) -> List[Tuple[str, Tuple[int, int]]]:
        return [(n, v.shape) for n, v in self._values.items()]

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def load(self, values: Dict[str, np.ndarray]) -> None:
        for name in self._values:
            self.set(name, values[name])


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    # torch.nn.Linear convention: kaiming_uniform with a=sqrt(5) -> bound 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Dense:
    """Affine map ``y = x W^T + b``."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: Optional[np.random.Generator] = None):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.store = store
        self.w_name, self.b_name = f"{name}.weight", f"{name}.bias"
        w = kaiming_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        store.add(self.w_name, w)
        store.add(self.b_name, np.zeros((1, out_dim)))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_2d(x, self.in_dim, self.w_name)
        self._x = x
        return x @ self.store[self.w_name].T + self.store[self.b_name]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError(f"{self.w_name}: backward called before forward")
        self.store.grad(self.w_name)[...] += grad.T @ self._x
        self.store.grad(self.b_name)[...] += grad.sum(axis=0, keepdims=True)
        return grad @ self.store[self.w_name]


class LearnableActivation:
    """KAN-style layer whose edge functions are ``w_b*silu(x) + sum_k w_s[k]*rbf_k(x)``.

    The Gaussian bumps sit on a fixed uniform grid of ``grid_size`` centers
    over ``[-radius, radius]``; the bandwidth equals the grid spacing. Only
    ``base_weight`` (out x in) and ``rbf_weight`` (out x in*G, input-major)
    are trained.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 grid_size: int = 8, radius: float = 2.0,
                 rng: Optional[np.random.Generator] = None):
        if grid_size < 2:
            raise ValueError("grid_size must be >= 2 so the bandwidth is defined")
        self.in_dim, self.out_dim, self.grid_size = in_dim, out_dim, grid_size
        self.store = store
        self.centers = np.linspace(-radius, radius, grid_size).astype(store.dtype)
        self.bandwidth = float(self.centers[1] - self.centers[0])
        self.wb_name, self.ws_name = f"{name}.base_weight", f"{name}.rbf_weight"
        wb = kaiming_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        store.add(self.wb_name, wb)
        store.add(self.ws_name, np.zeros((out_dim, in_dim * grid_size)))
        self._cache = None

    def _offsets(self, x: np.ndarray) -> np.ndarray:
        u = x[:, :, None] - self.centers
        u *= 1.0 / self.bandwidth
        return u

    def expand(self, x: np.ndarray) -> np.ndarray:
        """``(B, in) -> (B, in, G)`` Gaussian basis responses."""
        u = self._offsets(x)
        return np.exp(-(u * u))

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_2d(x, self.in_dim, self.wb_name)
        u = self._offsets(x)
        basis = np.square(u)
        np.negative(basis, out=basis)
        np.exp(basis, out=basis)
        s = sigmoid(x)
        act = x * s
        flat = basis.reshape(len(x), -1)
        self._cache = (x, s, act, u, basis)
        return act @ self.store[self.wb_name].T + flat @ self.store[self.ws_name].T

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.wb_name}: backward called before forward")
        x, s, act, u, basis = self._cache
        flat = basis.reshape(len(x), -1)
        self.store.grad(self.wb_name)[...] += grad.T @ act
        self.store.grad(self.ws_name)[...] += grad.T @ flat
        # d basis / dx = basis * (-2 u / h)
        t = (grad @ self.store[self.ws_name]).reshape(basis.shape)
        t *= basis
        t *= u
        dx = t.sum(axis=2)
        dx *= -2.0 / self.bandwidth
        dx += (grad @ self.store[self.wb_name]) * silu_grad(x, s)
        return dx


class SiLU:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return silu(x)

    def backward(self, grad):
        if self._x is None:
            raise StateError("silu: backward called before forward")
        return grad * silu_grad(self._x)


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        if self._y is None:
            raise StateError("sigmoid: backward called before forward")
        return grad * self._y * (1.0 - self._y)


class ResidualBlock:
    """``x + D2(silu(D1(silu(x))))``; the dense stand-in for a learnable activation layer."""

    def __init__(self, store: ParamStore, name: str, dim: int, rng=None):
        self.in_dim = self.out_dim = dim
        self.act1, self.act2 = SiLU(), SiLU()
        self.fc1 = Dense(store, f"{name}.fc1", dim, dim, rng)
        self.fc2 = Dense(store, f"{name}.fc2", dim, dim, rng)

    def forward(self, x):
        return x + self.fc2.forward(self.act2.forward(self.fc1.forward(self.act1.forward(x))))

    def backward(self, grad):
        inner = self.act1.backward(self.fc1.backward(self.act2.backward(self.fc2.backward(grad))))
        return grad + inner


# ---------------------------------------------------------------- losses

FOCAL_EPS = 1e-7


def focal_loss(p: np.ndarray, y: np.ndarray, gamma: float, alpha: float) -> Tuple[float, np.ndarray]:
    """Class-balanced focal loss averaged over the batch.

    Returns the data term and its gradient w.r.t. ``p``. Probabilities are
    clamped to ``[eps, 1-eps]``; the gradient is zero where the clamp binds.
    """
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise DimensionError(f"focal_loss: p {p.shape} vs y {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("focal_loss: labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    inside = (p >= FOCAL_EPS) & (p <= 1.0 - FOCAL_EPS)
    pos = y == 1
    q = 1.0 - pc
    log_p, log_q = np.log(pc), np.log(q)
    if gamma == 0:
        mod_pos = np.ones_like(pc)
        mod_neg = np.ones_like(pc)
        dmod_pos = np.zeros_like(pc)
        dmod_neg = np.zeros_like(pc)
    else:
        mod_pos, mod_neg = q ** gamma, pc ** gamma
        dmod_pos = -gamma * q ** (gamma - 1)
        dmod_neg = gamma * pc ** (gamma - 1)
    per = np.where(pos, -alpha * mod_pos * log_p, -(1.0 - alpha) * mod_neg * log_q)
    dper = np.where(
        pos,
        -alpha * (dmod_pos * log_p + mod_pos / pc),
        -(1.0 - alpha) * (dmod_neg * log_q - mod_neg / q),
    )
    return float(per.sum() / n), np.where(inside, dper / n, 0.0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over points of the squared Euclidean error (summed over channels)."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = len(pred)
    return float((diff * diff).sum() / n), 2.0 * diff / n


def l1_penalty(store: ParamStore, weight: float, accumulate: bool = True) -> float:
    """``weight * ||theta||_1``; adds ``weight * sign(theta)`` to the gradients (sign(0)=0)."""
    if weight == 0.0:
        return 0.0
    total = 0.0
    for _, value, grad in store.items():
        total += float(np.abs(value).sum())
        if accumulate:
            grad += weight * np.sign(value)
    return weight * total


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.1
    milestones: Sequence[int] = ()
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_run(cls, total_steps: int, lr: float = 1e-3, **kw) -> "AdamState":
        """Step decay by ``decay`` at 50% and 80% of ``total_steps``."""
        return cls(lr=lr, milestones=(total_steps // 2, (total_steps * 4) // 5), **kw)

    def current_lr(self) -> float:
        hits = sum(1 for m in self.milestones if self.step >= m)
        return self.lr * self.decay ** hits


def adam_step(store: ParamStore, state: AdamState) -> None:
    lr = state.current_lr()
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, value, grad in store.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        value -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"INRCKPT1"


def save_checkpoint(path, store: ParamStore, seed: int, step: int) -> None:
    """Layout (little-endian): magic, u64 seed, u64 step, u32 count, then per
    tensor u16 name length, utf-8 name, u32 rows, u32 cols, f64 values row-major."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQI", seed, step, len(store)))
        for name, value, _ in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], int, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    seed, step, count = struct.unpack_from("<QQI", data, 8)
    pos = 8 + 20
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return tensors, seed, step
