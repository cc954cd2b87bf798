"""Image quality metrics: PSNR, SSIM, NCC, LMSE.

NCC and LMSE are computed on luminance (channel mean); SSIM converts
internally as well.  PSNR of identical images returns the +inf
sentinel, serialized as the string ``"inf"`` in JSON reports.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .core import to_gray

__all__ = [
    "psnr",
    "ssim",
    "ncc",
    "lmse",
    "evaluate_layers",
    "aggregate_reports",
    "dump_report",
]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; identical inputs give +inf."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windows(a: np.ndarray, size: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(a, (size, size))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1."""
    a = to_gray(np.asarray(a, dtype=np.float64))
    b = to_gray(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than {window}x{window} window")
    kern = _gaussian_kernel(window, sigma)
    wa = _windows(a, window)
    wb = _windows(b, window)
    mu_a = np.einsum("ijkl,kl->ij", wa, kern)
    mu_b = np.einsum("ijkl,kl->ij", wb, kern)
    e_aa = np.einsum("ijkl,kl->ij", wa * wa, kern)
    e_bb = np.einsum("ijkl,kl->ij", wb * wb, kern)
    e_ab = np.einsum("ijkl,kl->ij", wa * wb, kern)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    c1 = k1 ** 2
    c2 = k2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation on luminance; constants give 0."""
    a = to_gray(np.asarray(a, dtype=np.float64))
    b = to_gray(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("ncc: shape mismatch")
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float((da ** 2).sum()) * float((db ** 2).sum()))
    if denom == 0.0:
        return 0.0
    return float((da * db).sum() / denom)


def _window_starts(n: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, n - size + 1, stride))
    if not starts or starts[-1] != n - size:
        starts.append(n - size)
    return starts


def lmse(a: np.ndarray, b: np.ndarray, window: int = 20, stride: int = 10) -> float:
    """Local scale-invariant MSE (prediction a vs reference b).

    Per window, the prediction is rescaled by the least-squares optimal
    factor before the squared error, normalized by the reference energy.
    Windows with zero reference energy are skipped.
    """
    a = to_gray(np.asarray(a, dtype=np.float64))
    b = to_gray(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("lmse: shape mismatch")
    h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"lmse: image {a.shape} smaller than one {window}x{window} window")
    errs = []
    for y in _window_starts(h, window, stride):
        for x in _window_starts(w, window, stride):
            aw = a[y:y + window, x:x + window]
            bw = b[y:y + window, x:x + window]
            eb = float((bw ** 2).sum())
            if eb == 0.0:
                continue
            ea = float((aw ** 2).sum())
            s = float((aw * bw).sum()) / ea if ea > 0 else 0.0
            errs.append(float(((s * aw - bw) ** 2).sum()) / eb)
    return float(np.mean(errs)) if errs else 0.0


def evaluate_layers(pred_b, gt_b, pred_r=None, gt_r=None) -> dict:
    """Per-sequence metric record with the fixed report key names."""
    rec = {
        "psnr_b": psnr(pred_b, gt_b),
        "ssim_b": ssim(pred_b, gt_b),
        "ncc_b": ncc(pred_b, gt_b),
        "lmse_b": lmse(pred_b, gt_b),
    }
    if pred_r is not None and gt_r is not None:
        rec.update({
            "psnr_r": psnr(pred_r, gt_r),
            "ssim_r": ssim(pred_r, gt_r),
            "ncc_r": ncc(pred_r, gt_r),
            "lmse_r": lmse(pred_r, gt_r),
        })
    return rec


def aggregate_reports(records: list[dict]) -> dict:
    keys = records[0].keys()
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def dump_report(path, records: list[dict], names: list[str] | None = None) -> dict:
    """Write one object per sequence plus an "aggregate" object."""
    doc = {}
    for i, rec in enumerate(records):
        name = names[i] if names else f"seq_{i:03d}"
        doc[name] = {k: _jsonable(v) for k, v in rec.items()}
    doc["aggregate"] = {k: _jsonable(v) for k, v in aggregate_reports(records).items()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
    return doc
