"""The ``.pico`` container: header, three length-prefixed payloads, CRC-32 trailer.

See FORMAT.md at the repository root for the byte layout.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple

from inrpcc.errors import BadMagicError, ChecksumError, CorruptStreamError, UnsupportedVersionError
from inrpcc.leafnet import LeafNetConfig

MAGIC = b"PICO"
VERSION = 1
FLAG_ATTRIBUTES = 0x01
_KINDS = {"leaf": 0, "mlp": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


@dataclass(frozen=True)
class StreamHeader:
    resolution_bits: int
    coarse_bits: int
    threshold: float
    geometry_exponent: int
    geometry_arch: LeafNetConfig
    attribute_exponent: int = 0
    attribute_arch: Optional[LeafNetConfig] = None

    @property
    def has_attributes(self) -> bool:
        return self.attribute_arch is not None


@dataclass(frozen=True)
class ParsedStream:
    header: StreamHeader
    cube_map: bytes
    geometry: bytes
    attributes: bytes

    @property
    def payloads(self) -> Tuple[bytes, bytes, bytes]:
        return self.cube_map, self.geometry, self.attributes


def threshold_to_f32(value: float) -> float:
    """The threshold exactly as the decoder will see it."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


def _pack_arch(cfg: LeafNetConfig) -> bytes:
    out = bytearray(struct.pack("<BBf", _KINDS[cfg.kind], cfg.octaves, cfg.radius))
    out += struct.pack("<B", len(cfg.input_fc_dims))
    out += b"".join(struct.pack("<H", d) for d in cfg.input_fc_dims)
    out += struct.pack("<B", len(cfg.leaf_layers))
    out += b"".join(struct.pack("<HB", dout, grid) for _, dout, grid in cfg.leaf_layers)
    out += struct.pack("<B", len(cfg.output_fc_dims))
    out += b"".join(struct.pack("<H", d) for d in cfg.output_fc_dims)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, fmt: str, section: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CorruptStreamError("stream ended inside a field", self.pos, section)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStreamError(f"declared length {n} exceeds the stream", self.pos, section)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _read_arch(r: _Reader, section: str) -> LeafNetConfig:
    kind, octaves, radius = r.take("<BBf", section)
    if kind not in _KIND_NAMES:
        raise CorruptStreamError(f"unknown network kind {kind}", r.pos, section)
    (n_in,) = r.take("<B", section)
    in_dims = [r.take("<H", section)[0] for _ in range(n_in)]
    (n_leaf,) = r.take("<B", section)
    leaf_specs = [r.take("<HB", section) for _ in range(n_leaf)]
    (n_out,) = r.take("<B", section)
    out_dims = [r.take("<H", section)[0] for _ in range(n_out)]
    width = in_dims[-1] if in_dims else 6 * octaves + 3
    leaf_layers = []
    for dout, grid in leaf_specs:
        leaf_layers.append((width, dout, grid))
        width = dout
    try:
        return LeafNetConfig(octaves, tuple(in_dims), tuple(leaf_layers), tuple(out_dims), radius,
                             _KIND_NAMES[kind])
    except ValueError as exc:
        raise CorruptStreamError(f"invalid architecture: {exc}", r.pos, section) from exc


def pack(header: StreamHeader, cube_map: bytes, geometry: bytes, attributes: bytes = b"") -> bytes:
    if header.has_attributes == (len(attributes) == 0):
        raise ValueError("attribute payload must be present exactly when an attribute architecture is")
    flags = FLAG_ATTRIBUTES if header.has_attributes else 0
    out = bytearray(MAGIC)
    out += struct.pack("<BB", VERSION, flags)
    out += struct.pack("<BBfB", header.resolution_bits, header.coarse_bits, header.threshold,
                       header.geometry_exponent)
    out += _pack_arch(header.geometry_arch)
    if header.has_attributes:
        out += struct.pack("<B", header.attribute_exponent)
        out += _pack_arch(header.attribute_arch)
    out += struct.pack("<III", len(cube_map), len(geometry), len(attributes))
    out += cube_map + geometry + attributes
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def _locate_damage(data: bytes) -> str:
    """Best-effort name of the section a failed checksum belongs to."""
    try:
        parsed = _parse(data, verify=False)
    except CorruptStreamError as exc:
        return exc.section or "header"
    for name, payload in zip(("cube_map", "geometry", "attributes"), parsed.payloads):
        if payload and zlib.crc32(payload[:-4]) != int.from_bytes(payload[-4:], "little"):
            return name
    return "header"


def _parse(data: bytes, verify: bool) -> ParsedStream:
    if len(data) < 10:
        raise CorruptStreamError("stream shorter than the fixed header", len(data), "header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, flags = data[4], data[5]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported stream version {version} (this decoder reads {VERSION})")
    if verify:
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            section = _locate_damage(data)
            raise ChecksumError("stream checksum mismatch", len(body), section)
    r = _Reader(data, 6)
    n_bits, m_bits, tau, exp_g = r.take("<BBfB", "header")
    arch_g = _read_arch(r, "header")
    exp_a, arch_a = 0, None
    if flags & FLAG_ATTRIBUTES:
        (exp_a,) = r.take("<B", "header")
        arch_a = _read_arch(r, "header")
    n_cube, n_geo, n_attr = r.take("<III", "header")
    cube = r.bytes(n_cube, "cube_map")
    geo = r.bytes(n_geo, "geometry")
    attr = r.bytes(n_attr, "attributes")
    if r.pos + 4 != len(data):
        raise CorruptStreamError(
            f"declared lengths end at {r.pos + 4} but the stream has {len(data)} bytes", r.pos, "trailer")
    if not 1 <= m_bits < n_bits:
        raise CorruptStreamError(f"invalid resolution pair N={n_bits}, M={m_bits}", 6, "header")
    header = StreamHeader(n_bits, m_bits, float(tau), exp_g, arch_g, exp_a, arch_a)
    return ParsedStream(header, cube, geo, attr)


def unpack(data: bytes) -> ParsedStream:
    """Validate magic, version, checksum and section lengths, then split the stream."""
    return _parse(bytes(data), verify=True)


def model_shapes(arch: LeafNetConfig):
    """Parameter names and shapes in the order the network creates them."""
    from inrpcc.leafnet import CoordinateNetwork

    return CoordinateNetwork(arch).store.shapes()


def describe(stream: bytes) -> dict:
    parsed = unpack(stream)
    h = parsed.header
    return {
        "version": VERSION,
        "resolution_bits": h.resolution_bits,
        "coarse_bits": h.coarse_bits,
        "threshold": h.threshold,
        "geometry_exponent": h.geometry_exponent,
        "attribute_exponent": h.attribute_exponent if h.has_attributes else None,
        "geometry_arch": h.geometry_arch.to_dict(),
        "attribute_arch": h.attribute_arch.to_dict() if h.has_attributes else None,
        "bytes": {"total": len(stream), "cube_map": len(parsed.cube_map),
                  "geometry": len(parsed.geometry), "attributes": len(parsed.attributes)},
    }
