import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from cfpct.data import load_prepared
from cfpct.errors import ConfigurationError, ShapeError, UndefinedMetricError, ValidationError
from cfpct.metrics import (
    PSNR_CAP,
    MetricsReport,
    RegionRule,
    dsc,
    evaluate_pairs,
    gaussian_window,
    ifc,
    ncc,
    pearson,
    psnr,
    ssim,
    to_window,
    vif,
)
from oracles import pearson_loop, psnr_loop


def smooth_image(seed, size=64):
    g = np.random.default_rng(seed)
    return ndimage.gaussian_filter(g.uniform(0, 1, (size, size)), 2.0) * 4


def ssim_loop(a, b, data_range):
    """Direct windowed SSIM: explicit weighted sums per valid window position."""
    win = gaussian_window(11, 1.5)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_examples():
    g = np.random.default_rng(0)
    a = g.uniform(-1000, 200, (8, 8))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 7.0) == pytest.approx(20 * np.log10(1200 / 7.0), abs=1e-9)
    b = g.uniform(-1000, 200, (8, 8))
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b, 1200.0), abs=1e-9)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeError):
        psnr(a, b[:4])
    with pytest.raises(ValidationError):
        psnr(a, b, data_range=0)


def test_ssim_examples():
    x = smooth_image(1, 32)
    assert ssim(x, x, data_range=4.0) == pytest.approx(1.0, abs=1e-12)
    checker = (np.indices((16, 16)).sum(0) % 2).astype(float)
    assert ssim(checker, 1 - checker, data_range=1.0) < 0
    g = np.random.default_rng(2)
    a, b = g.uniform(0, 1, (16, 16)), g.uniform(0, 1, (16, 16))
    assert ssim(a, b, data_range=1.0) == pytest.approx(ssim_loop(a, b, 1.0), abs=1e-6)
    assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(b, a, data_range=1.0), abs=1e-12)
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ncc_examples():
    x = smooth_image(3, 16)
    assert ncc(x, x) == pytest.approx(1.0)
    assert ncc(x, 3.5 * x - 2.0) == pytest.approx(1.0)
    assert ncc(x, -x) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMetricError):
        ncc(np.ones((4, 4)), x[:4, :4])


def test_vif_examples():
    x = smooth_image(4) * 100
    assert vif(x, x) == pytest.approx(1.0, abs=1e-6)
    g = np.random.default_rng(5)
    weak = x + g.normal(0, 5, x.shape)
    strong = x + g.normal(0, 40, x.shape)
    assert vif(x, strong) < vif(x, weak) < 1.0
    assert vif(x, ndimage.gaussian_filter(x, 1.5)) < 1.0
    # reference-directional: not symmetric in general
    assert vif(x, strong) != pytest.approx(vif(strong, x))


def test_ifc_examples():
    x = smooth_image(6) * 100
    noisy = x + np.random.default_rng(7).normal(0, 20, x.shape)
    assert ifc(x, x) >= ifc(x, noisy) >= 0
    assert ifc(np.full((64, 64), 3.0), noisy) == 0.0
    total, scales = ifc(x, noisy, return_scales=True)
    assert len(scales) == 4
    assert total == pytest.approx(sum(scales), rel=1e-12)
    with pytest.raises(UndefinedMetricError):
        vif(np.full((64, 64), 3.0), noisy)


def test_dsc_examples():
    a = np.zeros((4, 4), int)
    a[:2] = 1
    assert dsc(a, a) == 1.0
    assert dsc(a, 1 - a) == 0.0
    b = np.zeros((4, 4), int)
    b[1:3] = 1
    assert dsc(a, b) == pytest.approx(0.5)
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValidationError):
        dsc(a * 2, a)


def test_pearson_examples():
    g = np.random.default_rng(8)
    x = g.normal(size=100)
    y = g.normal(size=100)
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson(x, y) == pytest.approx(pearson_loop(x, y), abs=1e-9)
    mask = (np.arange(100) % 3 == 0).astype(int)
    assert pearson(x, y, mask) == pytest.approx(pearson_loop(x[mask == 1], y[mask == 1]), abs=1e-9)
    with pytest.raises(UndefinedMetricError):
        pearson(np.ones(10), x[:10])
    with pytest.raises(UndefinedMetricError):
        pearson(x, y, np.eye(1, 100, dtype=int)[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_self_comparison_is_maximal(seed):
    x = smooth_image(seed, 64) * 300 - 800
    assert ssim(x, x) == pytest.approx(1.0)
    assert psnr(x, x) == PSNR_CAP
    assert ncc(x, x) == pytest.approx(1.0)
    assert pearson(x, x) == pytest.approx(1.0)
    assert vif(x, x) == pytest.approx(1.0, abs=1e-6)
    m = (x > np.median(x)).astype(int)
    assert dsc(m, m) == 1.0


def test_noise_monotonicity_three_seeds():
    x = smooth_image(9) * 300 - 800
    scores = {k: [] for k in ("psnr", "ssim", "vif")}
    for sigma in (10.0, 40.0):
        vals = {k: [] for k in scores}
        for seed in range(3):
            y = x + np.random.default_rng(seed).normal(0, sigma, x.shape)
            vals["psnr"].append(psnr(x, y))
            vals["ssim"].append(ssim(x, y))
            vals["vif"].append(vif(x, y))
        for k in scores:
            scores[k].append(np.mean(vals[k]))
    for k, (lo_noise, hi_noise) in scores.items():
        assert hi_noise < lo_noise, k


def test_region_rule():
    img = np.arange(100, dtype=float).reshape(10, 10)
    mask = np.ones((10, 10), int)
    region = RegionRule(70.0)(img, mask)
    assert region.sum() == 30
    assert RegionRule()(img, np.zeros((10, 10))).sum() == 0


def test_report_aggregate_and_files(tmp_path):
    rep = MetricsReport(header={"model": "x"})
    g = np.random.default_rng(0)
    for i in range(5):
        rep.rows.append({"pair_id": f"p{i}", "sct_ssim": float(g.uniform()), "sct_psnr": float(g.uniform(20, 30))})
    agg = rep.aggregate()
    for col in ("sct_ssim", "sct_psnr"):
        vals = [r[col] for r in rep.rows]
        assert agg[col]["mean"] == pytest.approx(np.mean(vals), abs=1e-9)
        assert agg[col]["std"] == pytest.approx(np.std(vals, ddof=1), abs=1e-12)
    csv_path, json_path = rep.write(tmp_path)
    text = csv_path.read_text()
    assert text.startswith("# model: x")
    assert json.loads(json_path.read_text())["std"].startswith("sample")
    # repr floats round-trip exactly
    data_lines = [l for l in text.splitlines() if not l.startswith("#")][1:]
    assert float(data_lines[0].split(",")[1]) == rep.rows[0]["sct_ssim"]


@pytest.fixture(scope="module")
def test_slices(small_prepared):
    return load_prepared(small_prepared, "test")


def test_evaluate_identity_equals_baseline(test_slices):
    rep = evaluate_pairs(test_slices, "identity")
    assert len(rep.rows) == len(test_slices)
    for row in rep.rows:
        for k in ("ssim", "psnr", "vif", "ifc", "ncc", "dsc", "pearson"):
            assert row[f"sct_{k}"] == row[f"base_{k}"]
    assert "variant.vif" in rep.header and rep.header["domain"].startswith("HU+1000")


def test_evaluate_is_deterministic_and_needs_model(test_slices):
    a = evaluate_pairs(test_slices, "identity", ["ssim", "dsc"]).to_csv()
    b = evaluate_pairs(test_slices, "identity", ["ssim", "dsc"]).to_csv()
    assert a == b
    with pytest.raises(ConfigurationError):
        evaluate_pairs(test_slices, None)


def test_to_window_maps_lac_to_shifted_hu():
    # water (0.192) -> 0 HU -> 1000; air (0) -> -1000 HU -> 0; clip at 200 HU -> 1200
    lac = np.array([0.0, 0.192, 0.192 * 1.1, 0.192 * 2.0])
    np.testing.assert_allclose(to_window(lac), [0.0, 1000.0, 1100.0, 1200.0], atol=1e-9)
