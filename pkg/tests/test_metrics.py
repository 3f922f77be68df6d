import math

import numpy as np
import pytest

from conftest import random_cloud
from oracles import brute_color_psnr, brute_d1_psnr

from inrpcc.cloud import VoxelPointCloud
from inrpcc.errors import EvaluationError
from inrpcc.metrics import (
    LOSSLESS_DB,
    RdPoint,
    bd_delta,
    bits_per_point,
    color_psnr,
    d1_psnr,
    is_lossless,
    read_rd_csv,
    write_rd_csv,
)


def test_identical_clouds_are_lossless(rng):
    cloud = random_cloud(rng, 100)
    assert d1_psnr(cloud, cloud) == LOSSLESS_DB
    assert color_psnr(cloud, cloud) == LOSSLESS_DB
    assert is_lossless(d1_psnr(cloud, cloud))


def test_d1_single_voxel_shift():
    a = VoxelPointCloud.from_points([[0, 0, 0]], 10)
    b = VoxelPointCloud.from_points([[1, 0, 0]], 10)
    expected = 10 * math.log10(3 * 1023 ** 2)
    assert d1_psnr(a, b) == pytest.approx(expected, abs=1e-12)
    assert d1_psnr(a, b) == pytest.approx(64.97, abs=0.005)


def test_d1_takes_worse_direction():
    a = VoxelPointCloud.from_points([[0, 0, 0]], 4)
    b = VoxelPointCloud.from_points([[0, 0, 0], [3, 0, 0]], 4)
    # a->b error 0, b->a error 9/2
    assert d1_psnr(a, b) == pytest.approx(10 * math.log10(3 * 15 ** 2 / 4.5))
    assert d1_psnr(a, b) == d1_psnr(b, a)


@pytest.mark.parametrize("seed", range(3))
def test_d1_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, 200, 7, False), random_cloud(rng, 200, 7, False)
    assert abs(d1_psnr(a, b) - brute_d1_psnr(a.points, b.points, 7)) < 1e-9


def test_color_uniform_offset():
    rng = np.random.default_rng(5)
    a = random_cloud(rng, 100)
    a = a.with_colors(np.clip(a.colors, 0.0, 0.85))
    b = a.with_colors(a.colors + 0.1)
    assert color_psnr(a, b) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_color_matches_oracle(seed):
    rng = np.random.default_rng(seed + 10)
    a, b = random_cloud(rng, 150, 5), random_cloud(rng, 120, 5)
    expected = brute_color_psnr(a.points, a.colors, b.points, b.colors)
    assert color_psnr(a, b) == pytest.approx(expected, abs=1e-9)


def test_metric_argument_errors(rng):
    a = random_cloud(rng, 10, 5)
    empty = VoxelPointCloud.from_points(np.zeros((0, 3), dtype=int), 5)
    with pytest.raises(ValueError):
        d1_psnr(a, empty)
    with pytest.raises(ValueError):
        d1_psnr(a, random_cloud(rng, 10, 6))
    with pytest.raises(ValueError):
        color_psnr(a, a.geometry_only())


def test_bpp():
    assert bits_per_point(1000, 4000) == 2.0
    with pytest.raises(ValueError):
        bits_per_point(10, 0)


def _reference_curve():
    rates = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
    return rates, 30 + 6 * np.log2(rates) - 0.3 * np.log2(rates) ** 2


@pytest.mark.parametrize("method", ["cubic", "pchip"])
def test_bd_identical_curves(method):
    r, q = _reference_curve()
    curve = [RdPoint(a, b) for a, b in zip(r, q)]
    assert bd_delta(curve, curve, "rate", method) == pytest.approx(0.0, abs=1e-9)
    assert bd_delta(curve, curve, "quality", method) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("method", ["cubic", "pchip"])
def test_bd_rate_halved(method):
    r, q = _reference_curve()
    ref = [RdPoint(a, b) for a, b in zip(r, q)]
    test = [RdPoint(a / 2, b) for a, b in zip(r, q)]
    assert bd_delta(ref, test, "rate", method) == pytest.approx(-50.0, abs=1e-6)


@pytest.mark.parametrize("method", ["cubic", "pchip"])
def test_bd_quality_plus_one_db(method):
    r, q = _reference_curve()
    ref = [RdPoint(a, b) for a, b in zip(r, q)]
    test = [RdPoint(a, b + 1.0) for a, b in zip(r, q)]
    assert bd_delta(ref, test, "quality", method) == pytest.approx(1.0, abs=1e-9)
    # better quality at equal rate also means lower rate at equal quality
    assert bd_delta(ref, test, "rate", method) < 0


def test_bd_needs_four_points():
    r, q = _reference_curve()
    ref = [RdPoint(a, b) for a, b in zip(r, q)]
    with pytest.raises(EvaluationError):
        bd_delta(ref, ref[:3])


def test_bd_non_overlapping():
    r, q = _reference_curve()
    ref = [RdPoint(a, b) for a, b in zip(r, q)]
    far = [RdPoint(a * 1000, b + 100) for a, b in zip(r, q)]
    with pytest.raises(EvaluationError):
        bd_delta(ref, far, "rate")
    with pytest.raises(EvaluationError):
        bd_delta(ref, far, "quality")


def test_bd_bad_mode():
    r, q = _reference_curve()
    ref = [RdPoint(a, b) for a, b in zip(r, q)]
    with pytest.raises(ValueError):
        bd_delta(ref, ref, "distortion")


def test_rd_point_validation():
    with pytest.raises(ValueError):
        RdPoint(0.0, 30.0)
    with pytest.raises(ValueError):
        RdPoint(1.0, float("inf"))


def test_rd_csv_roundtrip(tmp_path):
    rows = [{"codec": "leaf", "lambda": 1e-5, "bpp": 2.5, "d1_psnr": 41.0, "color_psnr": 27.5},
            {"codec": "mlp", "lambda": 1e-4, "bpp": 1.5, "d1_psnr": 39.0, "color_psnr": ""}]
    path = tmp_path / "rd.csv"
    write_rd_csv(path, rows)
    assert path.read_text().splitlines()[0] == "codec,lambda,bpp,d1_psnr,color_psnr"
    back = read_rd_csv(path)
    assert back[0] == rows[0]
    assert back[1]["color_psnr"] == ""
