"""Image metrics (L1, MSE, PSNR), latent blindness probes and decode reports.

PSNR uses a peak of 1.0. Reports average per-image metrics; an image whose
selected region is empty is skipped and counted in ``empty``.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import to_chw, write_ppm


class EmptyRegionError(ValueError):
    pass


@dataclass
class MetricReport:
    l1: float
    mse: float
    psnr: float
    region: str = "full"
    count: int = 1

    def as_row(self):
        return {"region": self.region, "count": self.count, "l1": self.l1, "mse": self.mse,
                "psnr": "inf" if math.isinf(self.psnr) else self.psnr}


def psnr_from_mse(mse, peak=1.0):
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse / (peak * peak))


def _region(shape, mask, region):
    """Boolean selector broadcast to ``shape`` (H, W, C) or (C, H, W) images."""
    if region == "full" or mask is None:
        return np.ones(shape, bool)
    m = np.asarray(mask, bool)
    if region == "unmasked":
        m = ~m
    elif region != "masked":
        raise ValueError(f"unknown region {region!r}")
    if shape[-2:] == m.shape:  # CHW
        return np.broadcast_to(m, shape)
    return np.broadcast_to(m[..., None], shape)  # HWC


def image_metrics(a, b, mask=None, region="full"):
    """L1 / MSE / PSNR between two images over the selected region."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    sel = _region(a.shape, mask, region)
    n = int(sel.sum())
    if n == 0:
        raise EmptyRegionError(f"{region} region selects no pixels")
    d = (a - b)[sel]
    mse = float(np.mean(d * d))
    return MetricReport(float(np.mean(np.abs(d))), mse, psnr_from_mse(mse), region, 1)


def mean_report(reports, region):
    if not reports:
        return MetricReport(math.nan, math.nan, math.nan, region, 0)
    return MetricReport(
        float(np.mean([r.l1 for r in reports])),
        float(np.mean([r.mse for r in reports])),
        float(np.mean([r.psnr for r in reports])),
        region, len(reports),
    )


def _encode_pairs(model, pairs, batch=32):
    for i in range(0, len(pairs), batch):
        chunk = pairs[i:i + batch]
        xc = to_chw([p.x_clean for p in chunk]).astype(model.dtype)
        xo = to_chw([p.x_overlaid for p in chunk]).astype(model.dtype)
        with T.no_grad():
            lc, lo = model.encode(xc), model.encode(xo)
        yield chunk, lc, lo


def latent_blindness_gap(model, pairs):
    """Mean over pairs of the element-mean |e_overlaid - e_clean| on the concatenated latent."""
    if not pairs:
        raise ValueError("empty evaluation set")
    gaps = []
    for _, lc, lo in _encode_pairs(model, pairs):
        d = np.abs(lo.e_concat.data.astype(np.float64) - lc.e_concat.data)
        gaps.extend(d.reshape(d.shape[0], -1).mean(axis=1))
    return float(np.mean(gaps))


def code_agreement(model, pairs, level="bottom"):
    """Fraction of latent positions whose code index matches across the two arms."""
    if not pairs:
        raise ValueError("empty evaluation set")
    agree = []
    for _, lc, lo in _encode_pairs(model, pairs):
        a = lc.indices_bottom if level == "bottom" else lc.indices_top
        b = lo.indices_bottom if level == "bottom" else lo.indices_top
        agree.extend((a == b).reshape(a.shape[0], -1).mean(axis=1))
    return float(np.mean(agree))


def reconstruct_overlaid(model, pairs, batch=32):
    """D(Q(E(x_overlaid))) for every pair, as float HWC arrays in [0, 1]."""
    outs = []
    for i in range(0, len(pairs), batch):
        xo = to_chw([p.x_overlaid for p in pairs[i:i + batch]]).astype(model.dtype)
        outs.extend(model.reconstruct(xo).transpose(0, 2, 3, 1).astype(np.float64))
    return outs


def recon_reports(model, pairs, recons=None):
    """Per-region mean metrics of the overlaid-arm reconstruction against the clean image."""
    recons = reconstruct_overlaid(model, pairs) if recons is None else recons
    per = {"full": [], "masked": [], "unmasked": []}
    empty = {"full": 0, "masked": 0, "unmasked": 0}
    for p, r in zip(pairs, recons):
        clean = p.x_clean.astype(np.float64) / 255.0
        for region in per:
            try:
                per[region].append(image_metrics(r, clean, p.mask, region))
            except EmptyRegionError:
                empty[region] += 1
    return {k: mean_report(v, k) for k, v in per.items()}, empty


def write_report_csv(path, rows):
    """``rows``: iterable of (label, MetricReport)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "region", "count", "l1", "mse", "psnr"])
        for label, rep in rows:
            psnr = "inf" if math.isinf(rep.psnr) else f"{rep.psnr:.6f}"
            w.writerow([label, rep.region, rep.count, f"{rep.l1:.6f}", f"{rep.mse:.6f}", psnr])


def blindness_decode_report(model, pairs, out_dir, label="model"):
    """Write triptychs (overlaid | reconstruction | clean) and a metrics CSV.

    Returns ``(reports, empty_counts)``; an empty evaluation set writes nothing.
    """
    if not pairs:
        return {}, {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recons = reconstruct_overlaid(model, pairs)
    for i, (p, r) in enumerate(zip(pairs, recons)):
        rec8 = np.round(np.clip(r, 0, 1) * 255).astype(np.uint8)
        write_ppm(out / f"triptych_{i:04d}.ppm", np.concatenate([p.x_overlaid, rec8, p.x_clean], axis=1))
    reports, empty = recon_reports(model, pairs, recons)
    write_report_csv(out / "metrics.csv", [(label, reports[k]) for k in ("full", "masked", "unmasked")])
    return reports, empty
