import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blindnet.data import OverlaySample
from blindnet.metrics import (EmptyRegionError, blindness_decode_report, code_agreement, image_metrics,
                              latent_blindness_gap, psnr_from_mse, recon_reports, write_report_csv)
from blindnet.model import BlindNet, BlindNetConfig


def flat_oracle(a, b, mask=None, region="full"):
    h, w, c = a.shape
    s1 = s2 = 0.0
    n = 0
    for i in range(h):
        for j in range(w):
            if region == "masked" and not mask[i][j]:
                continue
            if region == "unmasked" and mask[i][j]:
                continue
            for k in range(c):
                d = float(a[i][j][k]) - float(b[i][j][k])
                s1 += abs(d)
                s2 += d * d
                n += 1
    mse = s2 / n
    return s1 / n, mse, (math.inf if mse == 0 else 10 * math.log10(1.0 / mse))


def test_identical_images():
    a = np.random.default_rng(0).uniform(size=(4, 4, 3))
    r = image_metrics(a, a.copy())
    assert (r.l1, r.mse, r.psnr) == (0.0, 0.0, math.inf)
    assert r.as_row()["psnr"] == "inf"


def test_constant_difference_closed_form():
    r = image_metrics(np.full((5, 5, 3), 0.6), np.full((5, 5, 3), 0.5))
    assert r.l1 == pytest.approx(0.1, abs=1e-12)
    assert r.mse == pytest.approx(0.01, abs=1e-12)
    assert r.psnr == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("region", ["full", "masked", "unmasked"])
def test_flat_loop_oracle(region):
    rng = np.random.default_rng(hash(region) % 1000)
    for _ in range(10):
        a, b = rng.uniform(size=(7, 6, 3)), rng.uniform(size=(7, 6, 3))
        m = rng.uniform(size=(7, 6)) < 0.4
        r = image_metrics(a, b, m, region)
        for got, want in zip((r.l1, r.mse, r.psnr), flat_oracle(a, b, m, region)):
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


def test_chw_layout_selects_same_pixels():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    m = rng.uniform(size=(6, 6)) < 0.5
    hwc = image_metrics(a, b, m, "masked")
    chw = image_metrics(a.transpose(2, 0, 1), b.transpose(2, 0, 1), m, "masked")
    assert hwc.mse == pytest.approx(chw.mse, rel=1e-12)


def test_regional_decomposition():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(9, 9, 3)), rng.uniform(size=(9, 9, 3))
    m = rng.uniform(size=(9, 9)) < 0.3
    full, ms, um = (image_metrics(a, b, m, r) for r in ("full", "masked", "unmasked"))
    k = m.sum()
    assert abs(full.mse - (k * ms.mse + (81 - k) * um.mse) / 81) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_identities(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(size=(4, 5, 3)) for _ in range(3))
    assert image_metrics(a, b).mse == image_metrics(b, a).mse
    assert image_metrics(a, c).l1 <= image_metrics(a, b).l1 + image_metrics(b, c).l1 + 1e-12
    assert image_metrics(a, b).l1 >= 0 and image_metrics(a, b).mse >= 0


def test_psnr_strictly_decreasing():
    ms = np.geomspace(1e-8, 1.0, 200)
    p = [psnr_from_mse(m) for m in ms]
    assert all(x > y for x, y in zip(p, p[1:]))


def test_errors():
    a = np.zeros((3, 3, 3))
    with pytest.raises(EmptyRegionError):
        image_metrics(a, a, np.zeros((3, 3), bool), "masked")
    with pytest.raises(ValueError):
        image_metrics(a, np.zeros((3, 4, 3)))


def test_paper_reference_direction():
    # Table-4 reference triples: lower L1 and MSE go with higher PSNR
    deepfill, ours = (0.214, 0.123, 9.68), (0.129, 0.056, 13.86)
    assert ours[0] < deepfill[0] and ours[1] < deepfill[1] and ours[2] > deepfill[2]
    assert psnr_from_mse(ours[1]) > psnr_from_mse(deepfill[1])


def _model():
    cfg = BlindNetConfig(base_channels=4, bottom_codes=16, bottom_dim=3, top_codes=8, top_dim=2,
                         res_blocks=1, image_size=16)
    return BlindNet(cfg, seed=0)


def _pairs(n, empty=False):
    rng = np.random.default_rng(3)
    out = []
    for _ in range(n):
        c = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        m = np.zeros((16, 16), bool)
        o = c.copy()
        if not empty:
            m[4:9, 3:10] = True
            o[m] = rng.integers(0, 256, (m.sum(), 3), dtype=np.uint8)
        out.append(OverlaySample(c, o, m, 10))
    return out


def test_gap_zero_for_empty_masks():
    m = _model()
    p = _pairs(5, empty=True)
    assert latent_blindness_gap(m, p) == 0.0
    assert code_agreement(m, p) == 1.0
    assert latent_blindness_gap(m, _pairs(5)) > 0
    with pytest.raises(ValueError):
        latent_blindness_gap(m, [])


def test_decode_report(tmp_path):
    m = _model()
    assert blindness_decode_report(m, [], tmp_path / "none") == ({}, {})
    assert not (tmp_path / "none").exists()
    reps, empty = blindness_decode_report(m, _pairs(2) + _pairs(1, empty=True), tmp_path / "r")
    assert empty["masked"] == 1 and reps["masked"].count == 2 and reps["full"].count == 3
    assert len(list((tmp_path / "r").glob("triptych_*.ppm"))) == 3
    lines = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "model,region,count,l1,mse,psnr" and len(lines) == 4


def test_report_csv_inf(tmp_path):
    reps, _ = recon_reports(_model(), _pairs(1))
    from blindnet.metrics import MetricReport
    write_report_csv(tmp_path / "x.csv", [("a", MetricReport(0.0, 0.0, math.inf))])
    assert (tmp_path / "x.csv").read_text().splitlines()[1].endswith(",inf")
