"""Context-adaptive binary arithmetic coding of quantized weights and cube maps.

The engine is a carry-propagating range coder (32-bit range, byte-wise
renormalization) driven by adaptive binary contexts. Each context holds the
16-bit probability that the next bin is 0, initialized to one half and moved
towards each coded bin by 1/32 of the remaining distance.

Weight binarization, per integer ``q``:

* significance bin ``q != 0``, context chosen by how many of the two
  preceding weights in the tensor were non-zero (3 contexts);
* sign bin (1 context);
* ``|q| - 1`` as order-0 Exp-Golomb: unary prefix bins with one context per
  position (positions past 15 share the last), suffix bits in bypass mode.

Contexts reset at the start of every tensor. Every payload ends with a
CRC-32 of the coded bytes so corruption is reported instead of silently
decoding wrong integers.
"""

from __future__ import annotations

import zlib
from typing import List, Sequence, Tuple

import numpy as np

from inrpcc.bitstream.quant import QuantizedParams, QuantizedTensor
from inrpcc.errors import CorruptStreamError

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
PROB_INIT = PROB_ONE >> 1
ADAPT_SHIFT = 5
TOP = 1 << 24
NUM_SIG_CTX = 3
NUM_PREFIX_CTX = 16
MAX_PREFIX = 32


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low >= 0x100000000:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, probs: List[int], ctx: int, bit: int) -> None:
        p = probs[ctx]
        bound = (self.range >> PROB_BITS) * p
        if bit:
            self.low += bound
            self.range -= bound
            probs[ctx] = p - (p >> ADAPT_SHIFT)
        else:
            self.range = bound
            probs[ctx] = p + ((PROB_ONE - p) >> ADAPT_SHIFT)
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bypass(self, bit: int) -> None:
        self.range >>= 1
        if bit:
            self.low += self.range
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes, section: str = "payload"):
        self.data = data
        self.pos = 0
        self.section = section
        self.range = 0xFFFFFFFF
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFFFF
        self.code &= 0xFFFFFFFF

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("arithmetic payload ended early", self.pos, self.section)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, probs: List[int], ctx: int) -> int:
        p = probs[ctx]
        bound = (self.range >> PROB_BITS) * p
        if self.code < bound:
            self.range = bound
            probs[ctx] = p + ((PROB_ONE - p) >> ADAPT_SHIFT)
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            probs[ctx] = p - (p >> ADAPT_SHIFT)
            bit = 1
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFF
        return bit

    def decode_bypass(self) -> int:
        self.range >>= 1
        bit = 0
        if self.code >= self.range:
            self.code -= self.range
            bit = 1
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFF
        return bit

    def check_exhausted(self) -> None:
        if self.pos != len(self.data):
            raise CorruptStreamError(f"{len(self.data) - self.pos} trailing bytes", self.pos, self.section)


def _seal(body: bytes) -> bytes:
    return body + zlib.crc32(body).to_bytes(4, "little")


def _unseal(payload: bytes, section: str) -> bytes:
    if len(payload) < 4 + 5:
        raise CorruptStreamError("payload too short", len(payload), section)
    body, crc = payload[:-4], int.from_bytes(payload[-4:], "little")
    if zlib.crc32(body) != crc:
        raise CorruptStreamError("payload checksum mismatch", len(body), section)
    return body


def _encode_tensor(enc: RangeEncoder, values: Sequence[int]) -> None:
    sig = [PROB_INIT] * NUM_SIG_CTX
    sign = [PROB_INIT]
    prefix = [PROB_INIT] * NUM_PREFIX_CTX
    prev1 = prev2 = 0
    for q in values:
        ctx = prev1 + prev2
        if q == 0:
            enc.encode(sig, ctx, 0)
            prev2, prev1 = prev1, 0
            continue
        enc.encode(sig, ctx, 1)
        enc.encode(sign, 0, 1 if q < 0 else 0)
        v = (q if q > 0 else -q)  # |q| - 1 + 1, the Exp-Golomb offset
        m = v.bit_length() - 1
        for i in range(m):
            enc.encode(prefix, i if i < NUM_PREFIX_CTX else NUM_PREFIX_CTX - 1, 1)
        enc.encode(prefix, m if m < NUM_PREFIX_CTX else NUM_PREFIX_CTX - 1, 0)
        for i in range(m - 1, -1, -1):
            enc.encode_bypass((v >> i) & 1)
        prev2, prev1 = prev1, 1


def _decode_tensor(dec: RangeDecoder, count: int) -> List[int]:
    sig = [PROB_INIT] * NUM_SIG_CTX
    sign = [PROB_INIT]
    prefix = [PROB_INIT] * NUM_PREFIX_CTX
    prev1 = prev2 = 0
    out = [0] * count
    for k in range(count):
        if not dec.decode(sig, prev1 + prev2):
            prev2, prev1 = prev1, 0
            continue
        negative = dec.decode(sign, 0)
        m = 0
        while dec.decode(prefix, m if m < NUM_PREFIX_CTX else NUM_PREFIX_CTX - 1):
            m += 1
            if m > MAX_PREFIX - 1:
                raise CorruptStreamError("Exp-Golomb prefix too long", dec.pos, dec.section)
        v = 1
        for _ in range(m):
            v = (v << 1) | dec.decode_bypass()
        out[k] = -v if negative else v
        prev2, prev1 = prev1, 1
    return out


def entropy_encode(q: QuantizedParams) -> bytes:
    """Losslessly code every tensor of ``q``; shapes travel out of band."""
    enc = RangeEncoder()
    for t in q.tensors:
        _encode_tensor(enc, t.values.ravel().tolist())
    return _seal(enc.finish())


def entropy_decode(payload: bytes, shapes: Sequence[Tuple[str, Tuple[int, int]]], exponent: int,
                   section: str = "weights") -> QuantizedParams:
    dec = RangeDecoder(_unseal(bytes(payload), section), section)
    tensors = []
    for name, shape in shapes:
        count = int(np.prod(shape))
        vals = np.array(_decode_tensor(dec, count), dtype=np.int64).reshape(shape)
        tensors.append(QuantizedTensor(name, tuple(shape), vals))
    dec.check_exhausted()
    return QuantizedParams(int(exponent), tuple(tensors))


def _cube_bitmap(cubes: np.ndarray, coarse_bits: int) -> np.ndarray:
    side = 1 << coarse_bits
    bitmap = np.zeros(side ** 3, dtype=np.uint8)
    bitmap[(cubes[:, 0] * side + cubes[:, 1]) * side + cubes[:, 2]] = 1
    return bitmap


def encode_cube_map(cubes, coarse_bits: int) -> bytes:
    """Occupancy bitmap of all ``2^(3M)`` cubes in lexicographic order, one adaptive context."""
    cubes = np.asarray(cubes, dtype=np.int64).reshape(-1, 3)
    if len(cubes) == 0:
        raise ValueError("cube map must contain at least one cube")
    if cubes.min() < 0 or cubes.max() >= (1 << coarse_bits):
        raise ValueError(f"cube index outside [0, {(1 << coarse_bits) - 1}]")
    enc = RangeEncoder()
    probs = [PROB_INIT]
    for bit in _cube_bitmap(cubes, coarse_bits).tolist():
        enc.encode(probs, 0, bit)
    return _seal(enc.finish())


def decode_cube_map(payload: bytes, coarse_bits: int) -> np.ndarray:
    dec = RangeDecoder(_unseal(bytes(payload), "cube_map"), "cube_map")
    probs = [PROB_INIT]
    total = 1 << (3 * coarse_bits)
    bits = np.fromiter((dec.decode(probs, 0) for _ in range(total)), dtype=np.uint8, count=total)
    dec.check_exhausted()
    flat = np.flatnonzero(bits)
    if len(flat) == 0:
        raise CorruptStreamError("cube map decodes to no cubes", dec.pos, "cube_map")
    side = 1 << coarse_bits
    return np.stack([flat // (side * side), (flat // side) % side, flat % side], axis=1).astype(np.int64)
