"""Minimal PLY reader/writer for voxelized vertex clouds (ASCII and binary LE)."""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from inrpcc.cloud import VoxelPointCloud
from inrpcc.errors import PlyParseError, RangeError

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyParseError(f"line 1: expected 'ply', got {first.strip()!r}")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype)])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyParseError(f"line {lineno}: unexpected end of file inside header")
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            if len(tokens) != 3 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"line {lineno}: unsupported format {line!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyParseError(f"line {lineno}: malformed element {line!r}")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError(f"line {lineno}: property before any element")
            if tokens[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PlyParseError(f"line {lineno}: list property on vertex is unsupported")
                if len(tokens) != 5:
                    raise PlyParseError(f"line {lineno}: malformed list property {line!r}")
                elements[-1][2].append((tokens[4], ("list", tokens[2], tokens[3])))
                continue
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise PlyParseError(f"line {lineno}: malformed property {line!r}")
            elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise PlyParseError(f"line {lineno}: unknown header keyword {tokens[0]!r}")
    if fmt is None:
        raise PlyParseError("header has no format line")
    return fmt, elements


def _read_vertices(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise PlyParseError("first element must be 'vertex'")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        for axis in "xyz":
            if axis not in names:
                raise PlyParseError(f"vertex element lacks property {axis!r}")
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if fmt == "ascii":
            rows = []
            for i in range(count):
                raw = fh.readline()
                if not raw:
                    raise PlyParseError(f"vertex {i}: unexpected end of file")
                vals = raw.split()
                if len(vals) < len(props):
                    raise PlyParseError(f"vertex {i}: expected {len(props)} values, got {len(vals)}")
                rows.append(tuple(float(v) for v in vals[: len(props)]))
            data = np.array(rows, dtype=[(n, "f8") for n in names]) if rows else np.zeros(0, dtype=[(n, "f8") for n in names])
        else:
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise PlyParseError(f"binary body truncated: need {dtype.itemsize * count} bytes, got {len(buf)}")
            data = np.frombuffer(buf, dtype=dtype, count=count)
    return data, dict(props)


def load_ply(path, resolution_bits: Optional[int] = None) -> VoxelPointCloud:
    """Read a vertex cloud and voxelize it at ``resolution_bits``.

    Coordinates are rounded to the nearest integer. When ``resolution_bits``
    is omitted the smallest N with ``max coordinate < 2^N`` is used.
    """
    data, types = _read_vertices(path)
    xyz = np.stack([np.asarray(data[a], dtype=np.float64) for a in "xyz"], axis=1)
    pts = np.rint(xyz).astype(np.int64)
    if pts.size and pts.min() < 0:
        raise RangeError(f"{path}: negative coordinate {pts.min()}")
    if resolution_bits is None:
        top = int(pts.max()) if pts.size else 0
        resolution_bits = max(1, top.bit_length())
    limit = (1 << resolution_bits) - 1
    if pts.size and pts.max() > limit:
        raise RangeError(f"{path}: coordinate {pts.max()} exceeds {limit} for N={resolution_bits}")
    colors = None
    if all(c in types for c in ("red", "green", "blue")):
        rgb = np.stack([np.asarray(data[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
        if types["red"].startswith("f"):
            colors = np.clip(rgb, 0.0, 1.0)
        else:
            colors = np.clip(rgb / 255.0, 0.0, 1.0)
    return VoxelPointCloud.from_points(pts, resolution_bits, colors)


def write_ply(path, cloud: VoxelPointCloud, binary: bool = False) -> None:
    """Write integer xyz and, when present, 8-bit RGB."""
    n = len(cloud)
    fields = [("x", "<i4"), ("y", "<i4"), ("z", "<i4")]
    if cloud.has_colors:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(n, dtype=fields)
    for i, a in enumerate("xyz"):
        rec[a] = cloud.points[:, i]
    if cloud.has_colors:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        for i, c in enumerate(("red", "green", "blue")):
            rec[c] = rgb[:, i]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"comment voxel resolution {cloud.resolution_bits} bits",
              f"element vertex {n}", "property int x", "property int y", "property int z"]
    if cloud.has_colors:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            cols = [rec[name] for name, _ in fields]
            lines = [" ".join(str(int(c[i])) for c in cols) for i in range(n)]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
    os.replace(tmp, path)
