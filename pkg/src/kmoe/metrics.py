"""PSNR, SSIM and NMSE on magnitude images."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# RMSE below this fraction of the data range is floating-point identity
IDENTITY_FLOOR = 1e-12


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    nmse: float


def _mag(x) -> np.ndarray:
    x = np.asarray(x)
    return np.abs(x).astype(np.float64)


def psnr(x_hat, x, data_range=None) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` when the images agree to floating-point identity."""
    a, b = _mag(x_hat), _mag(x)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    data_range = float(b.max()) if data_range is None else float(data_range)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if math.sqrt(mse) <= IDENTITY_FLOOR * data_range:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim(x_hat, x, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range=None) -> float:
    """Mean SSIM over all fully contained ``window x window`` uniform windows."""
    a, b = _mag(x_hat), _mag(x)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two 2-D images of equal shape")
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    data_range = float(b.max()) if data_range is None else float(data_range)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def nmse(x_hat, x) -> float:
    """``||x_hat - x||^2 / ||x||^2`` on magnitudes."""
    a, b = _mag(x_hat), _mag(x)
    ref = float(np.sum(b**2))
    if ref == 0:
        raise ValueError("nmse reference image is all zeros")
    return float(np.sum((a - b) ** 2) / ref)


def report(x_hat, x, data_range=None) -> MetricReport:
    data_range = float(np.abs(x).max()) if data_range is None else data_range
    return MetricReport(psnr(x_hat, x, data_range), ssim(x_hat, x, data_range=data_range), nmse(x_hat, x))


CSV_FIELDS = ("run_id", "af", "mask_kind", "psnr", "ssim", "nmse")


def append_report_row(path, run_id: str, af: float, mask_kind: str, rep: MetricReport) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow([run_id, af, mask_kind, _fmt(rep.psnr), _fmt(rep.ssim), _fmt(rep.nmse)])


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"
