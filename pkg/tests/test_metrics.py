import json
import math
import time

import numpy as np
import pytest

from diffcodec import metrics
from diffcodec.errors import RejectedInputError


def _img(seed, size=192):
    return np.random.default_rng(seed).random((3, size, size))


def test_psnr_identity_cap():
    a = _img(0)
    assert metrics.psnr(a, a) == 100.0


def test_psnr_uniform_error_closed_form():
    a = np.full((3, 32, 32), 0.5)
    b = a + 16.0 / 255.0
    assert metrics.psnr(a, b) == pytest.approx(20 * math.log10(255 / 16),
                                               abs=1e-6)


def test_psnr_monotone_in_noise():
    a = _img(1)
    vals = [metrics.psnr(a, np.clip(a + amp, 0, 1))
            for amp in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ms_ssim_identity_and_symmetry():
    a, b = _img(2), _img(3)
    assert metrics.ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert metrics.ms_ssim(a, b) == pytest.approx(metrics.ms_ssim(b, a),
                                                  abs=1e-12)


def test_ms_ssim_rejects_small_frames():
    a = _img(4, size=128)
    with pytest.raises(RejectedInputError):
        metrics.ms_ssim(a, a)


def _curve(rates, quals):
    return metrics.RdCurve([metrics.RdPoint(r, q)
                            for r, q in zip(rates, quals)])


def test_bd_identity_zero():
    c = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    assert metrics.bd_rate(c, c).value == pytest.approx(0.0, abs=1e-9)
    assert metrics.bd_metric(c, c).value == pytest.approx(0.0, abs=1e-9)


def test_bd_doubled_rate_is_100_percent():
    a = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    b = _curve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39])
    assert metrics.bd_rate(a, b).value == pytest.approx(100.0, abs=0.5)


def test_bd_no_overlap_is_na():
    a = _curve([0.1, 0.2, 0.4, 0.8], [10, 12, 14, 16])
    b = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    assert metrics.bd_rate(a, b).kind == "na"
    assert str(metrics.bd_rate(a, b)) == "N/A"


def test_bd_non_monotone_is_dashes():
    a = _curve([0.1, 0.2, 0.4, 0.8], [30, 35, 33, 39])
    b = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    r = metrics.bd_rate(a, b)
    assert r.kind == "non_monotone"
    assert str(r) == "--"


def test_bd_antisymmetry_log_domain():
    a = _curve([0.11, 0.24, 0.43, 0.85], [30.5, 33.1, 36.2, 38.8])
    b = _curve([0.13, 0.27, 0.52, 1.02], [31.0, 33.9, 36.8, 39.4])
    fwd = metrics.bd_rate(a, b).value
    rev = metrics.bd_rate(b, a).value
    assert rev == pytest.approx(-fwd / (1 + fwd / 100.0), abs=0.5)


def test_bd_lower_is_better_negation():
    # lower-is-better metric with decreasing values behaves like increasing
    a = metrics.RdCurve([metrics.RdPoint(r, q, "lpips", False)
                         for r, q in zip([0.1, 0.2, 0.4, 0.8],
                                         [0.4, 0.3, 0.2, 0.1])])
    b = metrics.RdCurve([metrics.RdPoint(r * 2, q, "lpips", False)
                         for r, q in zip([0.1, 0.2, 0.4, 0.8],
                                         [0.4, 0.3, 0.2, 0.1])])
    assert metrics.bd_rate(a, b).value == pytest.approx(100.0, abs=0.5)


def test_rd_curve_json_roundtrip():
    c = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    c2 = metrics.RdCurve.from_json(c.to_json())
    assert [p.bpp for p in c2.points] == [p.bpp for p in c.points]
    assert [p.quality for p in c2.points] == [p.quality for p in c.points]


def test_rd_curve_rejects_nonincreasing_rate():
    with pytest.raises(RejectedInputError):
        _curve([0.2, 0.2, 0.4, 0.8], [30, 33, 36, 39])


def test_cosine_profile_identical_and_random():
    rng = np.random.default_rng(5)
    lat = [rng.normal(size=4096) for _ in range(3)]
    frames = [[lat[0], lat[1], lat[2]], [lat[0], lat[1], lat[2]]]
    prof = metrics.cosine_profile(frames)
    assert np.allclose(prof, 1.0)
    indep = [[rng.normal(size=4096) for _ in range(3)] for _ in range(6)]
    prof = metrics.cosine_profile(indep)
    assert np.all(np.abs(prof) < 0.1)


def test_cosine_profile_scale_invariance():
    rng = np.random.default_rng(6)
    a = [rng.normal(size=512) for _ in range(4)]
    b = [v + 0.1 * rng.normal(size=512) for v in a]
    base = metrics.cosine_profile([a, b])
    scaled = metrics.cosine_profile([[3.0 * v for v in a],
                                     [7.0 * v for v in b]])
    assert np.allclose(base, scaled)


def test_median_time_median_of_runs():
    times = iter([0.5, 0.01, 0.01, 0.02, 0.03])

    def fn():
        time.sleep(next(times, 0.0) * 0.0)  # no-op; just exercise the loop

    t = metrics.median_time(fn, repeats=5, warmup=1)
    assert t >= 0.0


def test_report_emitters_accept_dict_rows():
    rows = [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.5}]
    csv_text = metrics.rows_to_csv(rows, ["a", "b"])
    assert "1,2.5" in csv_text
    md = metrics.rows_to_markdown(rows, ["a", "b"])
    assert "| 3 | 4.5 |" in md


def test_metric_plugin_registry():
    metrics.register_metric("neg_mse", lambda a, b: -float(np.mean((a - b) ** 2)),
                            higher_is_better=True)
    fn, hib = metrics.get_metric("neg_mse")
    assert hib and fn(np.zeros(4), np.zeros(4)) == 0.0
