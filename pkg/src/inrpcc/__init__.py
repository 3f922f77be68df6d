"""Point cloud compression by overfitting implicit neural representations.

Geometry is coded as an occupancy field, color as a regression field; both
networks are quantized and entropy coded into a ``.pico`` bitstream.
"""

from inrpcc.errors import (
    BitstreamError,
    ChecksumError,
    ConfigError,
    CorruptStreamError,
    PlyParseError,
    RangeError,
    ThresholdError,
    TrainingError,
    UnsupportedVersionError,
)
from inrpcc.cloud import CubePartition, VoxelPointCloud, build_partition
from inrpcc.ply import load_ply, write_ply

__version__ = "0.1.0"

__all__ = [
    "BitstreamError",
    "ChecksumError",
    "ConfigError",
    "CorruptStreamError",
    "CubePartition",
    "PlyParseError",
    "RangeError",
    "ThresholdError",
    "TrainingError",
    "UnsupportedVersionError",
    "VoxelPointCloud",
    "build_partition",
    "load_ply",
    "write_ply",
]
