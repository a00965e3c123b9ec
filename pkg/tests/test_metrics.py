import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinvert.metrics import CSV_HEADER, DiffReport, MetricError, PairRow, fmt, mse, paired_report, psnr, ssim

skimage_metrics = pytest.importorskip("skimage.metrics")


def mse_loop(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return total / a.size


def test_mse_fixtures():
    rng = np.random.default_rng(0)
    a = rng.random((1, 16, 16))
    assert mse(a, a) == 0.0
    assert mse(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)
    b = rng.random((1, 16, 16))
    assert mse(a, b) == pytest.approx(mse_loop(a, b), abs=1e-12)
    with pytest.raises(MetricError):
        mse(a, b[:, :8])


def test_psnr_fixtures():
    a = np.zeros((1, 4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 1.0) == 0.0


def test_psnr_decreases_with_mse():
    a = np.zeros((1, 4, 4))
    values = [psnr(a, a + d) for d in (0.01, 0.05, 0.2, 0.7)]
    assert values == sorted(values, reverse=True)


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).random((1, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_binaryish_image_is_low():
    rng = np.random.default_rng(2)
    a = np.clip((rng.random((1, 16, 16)) > 0.5) * 0.9 + 0.05 + 0.02 * rng.standard_normal((1, 16, 16)), 0, 1)
    assert ssim(a, 1 - a) < 0.5


def test_ssim_too_small():
    with pytest.raises(MetricError):
        ssim(np.zeros((1, 10, 16)), np.zeros((1, 10, 16)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 1, 13, 17))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1.0 <= s <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    # the reference averages over a border-cropped "same" map; compare against its valid interior
    _, full = skimage_metrics.structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, full=True
    )
    assert ssim(a[None], b[None]) == pytest.approx(full[5:-5, 5:-5].mean(), abs=1e-9)


def test_ssim_averages_channels():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 3, 12, 12))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[c], b[c]) for c in range(3)]), abs=1e-15)


def test_paired_report_identical_is_zero():
    rng = np.random.default_rng(4)
    truths = [rng.random((1, 16, 16)) for _ in range(3)]
    recon = [np.clip(t + 0.05, 0, 1) for t in truths]
    report = paired_report(recon, recon, truths)
    for metric, s in report.summary().items():
        assert s["mean"] == 0.0 and s["direction"] == "same"


def test_paired_report_psnr_difference():
    row = PairRow(0, 1, 0, 0.01, 0.0158, 22.0, 20.0, 0.9, 0.8)
    s = DiffReport([row]).summary()
    assert s["psnr"]["mean"] == 2.0 and s["psnr"]["direction"] == "up"
    assert s["mse"]["direction"] == "down"


def test_report_means_match_rows():
    rng = np.random.default_rng(5)
    truths = [rng.random((1, 16, 16)) for _ in range(4)]
    ours = [np.clip(t + 0.03 * rng.standard_normal(t.shape), 0, 1) for t in truths]
    base = [np.clip(t + 0.1 * rng.standard_normal(t.shape), 0, 1) for t in truths]
    report = paired_report(ours, base, truths, victim_ids=[7, 8, 9, 10])
    lines = report.to_csv().splitlines()
    assert lines[0] == CSV_HEADER
    cols = CSV_HEADER.split(",")
    rows = [dict(zip(cols, line.split(","))) for line in lines[1:]]
    assert [r["victim_id"] for r in rows] == ["7", "8", "9", "10"]
    for metric in ("mse", "psnr", "ssim"):
        vals = [float(r[f"d_{metric}"]) for r in rows]
        assert report.mean(f"d_{metric}") == pytest.approx(sum(vals) / 4, abs=1e-12)
        assert report.max(f"d_{metric}") == max(vals)


def test_report_misaligned():
    with pytest.raises(MetricError):
        paired_report([np.zeros((1, 11, 11))], [], [np.zeros((1, 11, 11))])


def test_infinite_psnr_in_csv():
    a = np.random.default_rng(6).random((1, 11, 11))
    report = paired_report([a], [a], [a])
    row = report.to_csv().splitlines()[1].split(",")
    assert row[5] == row[6] == "inf"
    assert row[10] == "0.0"


def test_float_format_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 123456.789):
        assert float(fmt(v)) == v
    assert fmt(None) == "" and fmt(-math.inf) == "-inf" and fmt(3) == "3"
