"""Command line front end: compress, decompress, eval, sweep, synth.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional

import numpy as np

from inrpcc.errors import BitstreamError, ConfigError, EvaluationError, PlyParseError, RangeError

log = logging.getLogger("inrpcc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return
    threadpool_limits(n)


def _ensure_writable(path: str) -> None:
    """Fail before any training if ``path`` cannot be created."""
    if os.path.isdir(path):
        raise OSError(f"output path {path} is a directory")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    probe = os.path.join(directory, f".{os.path.basename(path)}.probe-{os.getpid()}")
    try:
        with open(probe, "wb"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output path {path} is not writable: {exc}") from exc


def _write_atomic(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _emit(obj, path: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, default=float)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _config_from_args(args):
    from inrpcc.config import load_config, parse_overrides

    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, args.profile, overrides)


def cmd_compress(args) -> int:
    from inrpcc.codec import compress, compress_blockwise
    from inrpcc.ply import load_ply

    cfg = _config_from_args(args)
    _ensure_writable(args.output)
    _limit_threads(cfg.threads)
    cloud = load_ply(args.input, cfg.resolution_bits)
    result = (compress_blockwise if args.blockwise else compress)(cloud, cfg)
    _write_atomic(args.output, result.stream)
    if args.log_dir:
        os.makedirs(args.log_dir, exist_ok=True)
        if result.geometry_log is not None:
            result.geometry_log.write_csv(os.path.join(args.log_dir, "geometry_train.csv"), "loss")
        if result.attribute_log is not None:
            result.attribute_log.write_csv(os.path.join(args.log_dir, "attribute_train.csv"), "mse")
        if result.threshold_trace:
            with open(os.path.join(args.log_dir, "threshold_trace.csv"), "w") as fh:
                fh.write("tau,d1_psnr\n")
                fh.writelines(f"{t!r},{v!r}\n" for t, v in result.threshold_trace)
    report = dict(result.report, input=args.input, output=args.output)
    _emit(report, args.report)
    return EXIT_OK


def cmd_decompress(args) -> int:
    from inrpcc.codec import decompress_any
    from inrpcc.ply import write_ply

    with open(args.input, "rb") as fh:
        stream = fh.read()
    _limit_threads(1)
    start = time.perf_counter()
    cloud = decompress_any(stream)
    write_ply(args.output, cloud, binary=args.binary)
    log.info("decoded %d points in %.2fs", len(cloud), time.perf_counter() - start)
    return EXIT_OK


def evaluate_files(original_path, reconstructed_path, stream_path=None, resolution_bits=None) -> dict:
    from inrpcc.metrics import bits_per_point, color_psnr, d1_psnr, is_lossless
    from inrpcc.ply import load_ply

    original = load_ply(original_path, resolution_bits)
    recon = load_ply(reconstructed_path, resolution_bits or original.resolution_bits)
    if recon.resolution_bits != original.resolution_bits:
        raise ValueError(f"resolution mismatch: N={original.resolution_bits} vs N={recon.resolution_bits}")
    d1 = d1_psnr(original, recon)
    out = {"d1_psnr": d1, "d1_lossless": is_lossless(d1), "points_original": len(original),
           "points_reconstructed": len(recon), "color_psnr": None}
    if original.has_colors and recon.has_colors:
        out["color_psnr"] = color_psnr(original, recon)
        out["color_lossless"] = is_lossless(out["color_psnr"])
    else:
        log.warning("color metric skipped: %s has no colors",
                    original_path if not original.has_colors else reconstructed_path)
    if stream_path:
        out["bpp"] = bits_per_point(os.path.getsize(stream_path), len(original))
    return out


def cmd_eval(args) -> int:
    metrics = evaluate_files(args.original, args.reconstructed, args.stream, args.resolution_bits)
    if args.csv:
        with open(args.csv, "w") as fh:
            keys = [k for k, v in metrics.items() if v is not None]
            fh.write(",".join(keys) + "\n" + ",".join(str(metrics[k]) for k in keys) + "\n")
    _emit(metrics, args.report)
    return EXIT_OK


def _sweep_point(job):
    from inrpcc.codec import compress
    from inrpcc.metrics import d1_psnr

    cloud, cfg, codec_name, lam = job
    _limit_threads(1)
    result = compress(cloud, cfg)
    return {"codec": codec_name, "lambda": lam, "bpp": result.report["bpp"],
            "d1_psnr": d1_psnr(cloud, result.reconstruction),
            "color_psnr": result.report["color_psnr"] if result.report["color_psnr"] is not None else ""}


def run_sweep(cloud, base_cfg, lambdas: List[float], codecs: List[str], jobs: int = 1,
              lambda_target: str = "both"):
    """Compress ``cloud`` once per (codec, lambda) pair; returns RD rows."""
    from inrpcc.leafnet import mlp_ablation

    if not lambdas:
        raise ConfigError("sweep needs at least one lambda")
    work = []
    for ci, codec_name in enumerate(codecs):
        # one RNG stream per codec, shared across its lambdas so the curve is paired
        seed = int(np.random.SeedSequence([base_cfg.seed, ci]).generate_state(1)[0] & 0x7FFFFFFF)
        cfg = base_cfg.with_overrides(seed=seed)
        if codec_name == "mlp":
            leaf = cfg.architecture(1)
            abl = mlp_ablation(leaf)
            cfg = cfg.with_overrides(kind="mlp", hidden=abl.hidden, octaves=leaf.octaves, depth=len(leaf.leaf_layers))
        elif codec_name != "leaf":
            raise ConfigError(f"unknown codec {codec_name!r}; use 'leaf' or 'mlp'")
        for lam in lambdas:
            over = {}
            if lambda_target in ("both", "geometry"):
                over["l1_geometry"] = lam
            if lambda_target in ("both", "attribute"):
                over["l1_attribute"] = lam
            work.append((cloud, cfg.with_overrides(**over).validate(), codec_name, lam))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_sweep_point, work))
    return [_sweep_point(w) for w in work]


def bd_summary(rows, reference_rows=None, quality: str = "d1_psnr", method: str = "cubic") -> dict:
    from inrpcc.metrics import RdPoint, bd_delta

    def curve(rs):
        return [RdPoint(float(r["bpp"]), float(r[quality])) for r in rs]

    def compare(ref, test):
        out = {}
        for key, mode in (("bd_rate_percent", "rate"), ("bd_quality_db", "quality")):
            try:
                out[key] = bd_delta(ref, test, mode, method)
            except EvaluationError as exc:
                # keep the RD table usable; the missing delta is explained in the report
                log.warning("%s BD delta unavailable: %s", mode, exc)
                out[key] = None
                out.setdefault("errors", []).append(f"{mode}: {exc}")
        return out

    by_codec = {}
    for r in rows:
        by_codec.setdefault(r["codec"], []).append(r)
    out = {}
    if "leaf" in by_codec and "mlp" in by_codec:
        out["leaf_vs_mlp"] = compare(curve(by_codec["mlp"]), curve(by_codec["leaf"]))
    if reference_rows is not None:
        ref = curve(reference_rows)
        for name, rs in by_codec.items():
            out[f"{name}_vs_reference"] = compare(ref, curve(rs))
    return out


def cmd_sweep(args) -> int:
    from inrpcc.metrics import read_rd_csv, write_rd_csv
    from inrpcc.ply import load_ply

    cfg = _config_from_args(args)
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()] if args.lambdas else []
    if not lambdas:
        raise ConfigError("--lambdas must list at least one value")
    codecs = [c.strip() for c in args.codecs.split(",") if c.strip()]
    wants_bd = args.reference is not None or ("leaf" in codecs and "mlp" in codecs)
    if wants_bd and len(lambdas) < 4:
        raise EvaluationError(f"BD deltas need at least 4 sweep points, got {len(lambdas)}")
    reference = read_rd_csv(args.reference) if args.reference else None
    if reference is not None and len(reference) < 4:
        raise EvaluationError(f"reference curve needs at least 4 RD points, got {len(reference)}")
    _ensure_writable(args.output)
    cloud = load_ply(args.input, cfg.resolution_bits)
    rows = run_sweep(cloud, cfg, lambdas, codecs, args.jobs, args.lambda_target)
    write_rd_csv(args.output, rows)
    bd = bd_summary(rows, reference, args.quality, args.bd_method) if wants_bd else {}
    summary = {"rd": rows, "bd": bd, "quality": args.quality, "bd_method": args.bd_method,
               "seed": cfg.seed, "config": cfg.to_dict()}
    _emit(summary, args.report)
    return EXIT_OK


def cmd_synth(args) -> int:
    from inrpcc.ply import write_ply
    from inrpcc.synth import GENERATORS

    kwargs = {"resolution_bits": args.resolution_bits, "colored": not args.no_color}
    if args.radius is not None:
        if args.kind != "sphere":
            raise UsageError("--radius only applies to the sphere generator")
        kwargs["radius"] = args.radius
    cloud = GENERATORS[args.kind](**kwargs)
    write_ply(args.output, cloud, binary=args.binary)
    print(json.dumps({"kind": args.kind, "points": len(cloud), "resolution_bits": cloud.resolution_bits}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inrpcc", description="Point cloud codec built on overfitted coordinate networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON file with CodecConfig fields")
        sp.add_argument("--profile", default="desk", choices=("desk", "full"))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--report", help="also write the JSON report here")

    sp = sub.add_parser("compress", help="encode a PLY cloud into a .pico stream")
    sp.add_argument("input")
    sp.add_argument("output")
    config_flags(sp)
    sp.add_argument("--log-dir", help="write training and threshold-search CSVs here")
    sp.add_argument("--blockwise", action="store_true", help="code each octant with its own networks")
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="decode a .pico stream into a PLY cloud")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("eval", help="D1 and color PSNR between two PLY clouds")
    sp.add_argument("original")
    sp.add_argument("reconstructed")
    sp.add_argument("--stream", help=".pico file, to report bpp")
    sp.add_argument("--resolution-bits", type=int)
    sp.add_argument("--csv")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="RD sweep over l1 weights, with optional BD deltas")
    sp.add_argument("input")
    sp.add_argument("output", help="RD CSV to write")
    config_flags(sp)
    sp.add_argument("--lambdas", required=True, help="comma-separated l1 weights")
    sp.add_argument("--codecs", default="leaf", help="comma-separated subset of leaf,mlp")
    sp.add_argument("--lambda-target", default="both", choices=("both", "geometry", "attribute"))
    sp.add_argument("--reference", help="RD CSV of a reference codec for BD deltas")
    sp.add_argument("--quality", default="d1_psnr", choices=("d1_psnr", "color_psnr"))
    sp.add_argument("--bd-method", default="cubic", choices=("cubic", "pchip"),
                    help="curve fit for BD deltas; pchip tolerates flat or non-monotone curves")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth", help="write a procedural test cloud")
    sp.add_argument("kind", choices=("sphere", "torus", "plane"))
    sp.add_argument("output")
    sp.add_argument("-N", "--resolution-bits", type=int, default=7)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--no-color", action="store_true")
    sp.add_argument("--binary", action="store_true")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"inrpcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BitstreamError, PlyParseError, RangeError, EvaluationError, OSError, ValueError, RuntimeError) as exc:
        print(f"inrpcc: error: {exc}", file=sys.stderr)
        # a bad setting discovered inside a pipeline stage is still a configuration problem
        return EXIT_USAGE if isinstance(exc.__cause__, ConfigError) else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
