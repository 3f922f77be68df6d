"""End-to-end compression and decompression."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from inrpcc.attributes import (
    AttributeTrainConfig,
    build_attribute_targets,
    reconstruct_attributes,
    train_attributes,
)
from inrpcc.bitstream.cabac import decode_cube_map, encode_cube_map, entropy_decode, entropy_encode
from inrpcc.bitstream.container import StreamHeader, model_shapes, pack, threshold_to_f32, unpack
from inrpcc.bitstream.quant import QuantizedParams, dequantize, quantize
from inrpcc.cloud import CubePartition, VoxelPointCloud, build_partition, partition_from_cubes
from inrpcc.config import CodecConfig
from inrpcc.errors import ConfigError, ThresholdError
from inrpcc.geometry import (
    GeometryTrainConfig,
    SamplerConfig,
    TrainingLog,
    dynamic_threshold,
    predict_occupancy,
    train_geometry,
)
from inrpcc.leafnet import CoordinateNetwork, LeafNetConfig
from inrpcc.metrics import bits_per_point, color_psnr, d1_psnr

log = logging.getLogger(__name__)


def rebuild_model(arch: LeafNetConfig, q: QuantizedParams) -> CoordinateNetwork:
    """Network carrying exactly the dequantized weights a decoder would see."""
    model = CoordinateNetwork(arch)
    if [n for n, _ in model.store.shapes()] != [t.name for t in q.tensors]:
        raise ValueError("quantized tensors do not match the architecture")
    model.store.load(dequantize(q))
    return model


@dataclass
class CompressionResult:
    stream: bytes
    reconstruction: VoxelPointCloud
    report: dict
    geometry_log: Optional[TrainingLog] = None
    attribute_log: Optional[TrainingLog] = None
    threshold_trace: list = field(default_factory=list)


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.__cause__ = exc


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _geometry_config(cfg: CodecConfig) -> GeometryTrainConfig:
    return GeometryTrainConfig(
        steps=cfg.geometry_steps, gamma=cfg.gamma, alpha_balance=cfg.alpha_balance,
        l1_weight=cfg.l1_geometry, lr=cfg.lr,
        sampler=SamplerConfig(cfg.alpha, cfg.batch_size, cfg.seed),
    )


def _attribute_config(cfg: CodecConfig) -> AttributeTrainConfig:
    return AttributeTrainConfig(cfg.attribute_steps, cfg.l1_attribute, cfg.lr, cfg.batch_size, cfg.seed)


def decode_geometry(model: CoordinateNetwork, partition: CubePartition, threshold: float,
                    probabilities: Optional[np.ndarray] = None) -> VoxelPointCloud:
    if probabilities is None:
        probabilities = predict_occupancy(model, partition)
    keep = probabilities > threshold
    return VoxelPointCloud.from_points(partition.voxels()[keep], partition.resolution_bits)


def compress(cloud: VoxelPointCloud, cfg: CodecConfig) -> CompressionResult:
    """Encode ``cloud``; the returned reconstruction is what ``decompress`` will produce."""
    start = time.perf_counter()
    cfg = cfg.validate()
    if len(cloud) == 0:
        raise StageError("input", ValueError("input cloud is empty"))
    if cfg.resolution_bits is not None and cfg.resolution_bits != cloud.resolution_bits:
        raise StageError("input", ConfigError(
            f"config resolution_bits={cfg.resolution_bits} but cloud has N={cloud.resolution_bits}"))
    if cfg.coarse_bits >= cloud.resolution_bits:
        raise StageError("input", ConfigError(
            f"coarse_bits={cfg.coarse_bits} must be below the cloud resolution N={cloud.resolution_bits}"))

    with _Stage("partition"):
        partition = build_partition(cloud, cfg.coarse_bits)
    with _Stage("select_model"):
        arch_g = cfg.architecture(1)
        arch_a = cfg.architecture(3) if cloud.has_colors else None

    with _Stage("train_geometry"):
        geo_model, geo_log = train_geometry(cloud, partition, arch_g, _geometry_config(cfg))
    with _Stage("quantize_geometry"):
        q_geo = quantize(geo_model.store, cfg.geometry_exponent)
        geo_decoded = rebuild_model(arch_g, q_geo)
    with _Stage("threshold"):
        probs = predict_occupancy(geo_decoded, partition)
        search = dynamic_threshold(probs, partition, cloud, iterations=cfg.threshold_iterations,
                                   seed=cfg.seed)
        tau = threshold_to_f32(search.threshold)
        geometry = decode_geometry(geo_decoded, partition, tau, probs)
        if len(geometry) == 0:
            raise ThresholdError("threshold rounding emptied the reconstruction")

    att_log = None
    q_att = None
    reconstruction = geometry
    if arch_a is not None:
        with _Stage("train_attributes"):
            targets = build_attribute_targets(geometry, cloud)
            att_model, att_log = train_attributes(targets, arch_a, _attribute_config(cfg))
        with _Stage("quantize_attributes"):
            q_att = quantize(att_model.store, cfg.attribute_exponent)
            reconstruction = reconstruct_attributes(rebuild_model(arch_a, q_att), geometry)

    with _Stage("entropy_code"):
        cube_payload = encode_cube_map(partition.occupied_cubes, cfg.coarse_bits)
        geo_payload = entropy_encode(q_geo)
        att_payload = entropy_encode(q_att) if q_att is not None else b""
    with _Stage("pack"):
        header = StreamHeader(cloud.resolution_bits, cfg.coarse_bits, tau, cfg.geometry_exponent, arch_g,
                              cfg.attribute_exponent if arch_a is not None else 0, arch_a)
        stream = pack(header, cube_payload, geo_payload, att_payload)

    report = {
        "points": len(cloud),
        "reconstructed_points": len(reconstruction),
        "bytes": {"total": len(stream), "cube_map": len(cube_payload),
                  "geometry": len(geo_payload), "attributes": len(att_payload)},
        "bpp": bits_per_point(len(stream), len(cloud)),
        "threshold": tau,
        "threshold_search": {"evaluations": search.evaluations, "subsampled": search.subsampled,
                             "search_psnr": search.psnr},
        "nonempty_fraction": partition.nonempty_fraction,
        "occupied_cubes": int(len(partition.occupied_cubes)),
        "d1_psnr": d1_psnr(cloud, geometry),
        "color_psnr": color_psnr(cloud, reconstruction) if arch_a is not None else None,
        "geometry_params": arch_g.num_params(),
        "attribute_params": arch_a.num_params() if arch_a is not None else 0,
        "geometry_arch": arch_g.to_dict(),
        "attribute_arch": arch_a.to_dict() if arch_a is not None else None,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "wall_time_s": time.perf_counter() - start,
    }
    return CompressionResult(stream, reconstruction, report, geo_log, att_log, search.trace)


def decompress(stream: bytes) -> VoxelPointCloud:
    """Reconstruct a cloud from the bitstream alone."""
    parsed = unpack(stream)
    h = parsed.header
    cubes = decode_cube_map(parsed.cube_map, h.coarse_bits)
    partition = partition_from_cubes(cubes, h.resolution_bits, h.coarse_bits)
    q_geo = entropy_decode(parsed.geometry, model_shapes(h.geometry_arch), h.geometry_exponent, "geometry")
    geometry = decode_geometry(rebuild_model(h.geometry_arch, q_geo), partition, h.threshold)
    if not h.has_attributes:
        return geometry
    q_att = entropy_decode(parsed.attributes, model_shapes(h.attribute_arch), h.attribute_exponent,
                           "attributes")
    return reconstruct_attributes(rebuild_model(h.attribute_arch, q_att), geometry)


BLOCK_MAGIC = b"PICB"


def split_octants(cloud: VoxelPointCloud):
    """Non-empty octant sub-clouds in octant order, at the parent's resolution."""
    half = 1 << (cloud.resolution_bits - 1)
    octant = ((cloud.points[:, 0] >= half).astype(int) << 2 | (cloud.points[:, 1] >= half).astype(int) << 1
              | (cloud.points[:, 2] >= half).astype(int))
    parts = []
    for k in range(8):
        mask = octant == k
        if mask.any():
            cols = cloud.colors[mask] if cloud.has_colors else None
            parts.append(VoxelPointCloud(cloud.resolution_bits, cloud.points[mask], cols))
    return parts


def compress_blockwise(cloud: VoxelPointCloud, cfg: CodecConfig):
    """One independent stream per non-empty octant, concatenated behind a small index."""
    results = [compress(part, cfg) for part in split_octants(cloud)]
    out = bytearray(BLOCK_MAGIC)
    out.append(len(results))
    for r in results:
        out += len(r.stream).to_bytes(4, "little")
    for r in results:
        out += r.stream
    stream = bytes(out)
    recon = _merge([r.reconstruction for r in results])
    report = {
        "blocks": [r.report for r in results],
        "points": len(cloud),
        "bpp": bits_per_point(len(stream), len(cloud)),
        "bytes": {"total": len(stream)},
        "d1_psnr": d1_psnr(cloud, recon),
        "color_psnr": color_psnr(cloud, recon) if recon.has_colors and cloud.has_colors else None,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    return CompressionResult(stream, recon, report)


def _merge(parts):
    n_bits = parts[0].resolution_bits
    pts = np.concatenate([p.points for p in parts])
    cols = np.concatenate([p.colors for p in parts]) if all(p.has_colors for p in parts) else None
    return VoxelPointCloud.from_points(pts, n_bits, cols)


def decompress_any(stream: bytes) -> VoxelPointCloud:
    """Decode either a single-model stream or a block-wise concatenation."""
    if stream[:4] != BLOCK_MAGIC:
        return decompress(stream)
    from inrpcc.errors import CorruptStreamError

    if len(stream) < 5:
        raise CorruptStreamError("block index truncated", len(stream), "blocks")
    count = stream[4]
    pos = 5 + 4 * count
    if count == 0 or len(stream) < pos:
        raise CorruptStreamError("block index truncated", len(stream), "blocks")
    sizes = [int.from_bytes(stream[5 + 4 * i:9 + 4 * i], "little") for i in range(count)]
    if pos + sum(sizes) != len(stream):
        raise CorruptStreamError("block sizes do not add up to the stream length", pos, "blocks")
    parts = []
    for size in sizes:
        parts.append(decompress(stream[pos:pos + size]))
        pos += size
    return _merge(parts)
