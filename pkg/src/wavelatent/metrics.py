"""Volume quality metrics: PSNR, SSIM, MAE, NCC, Dice, bone proxy.

All metrics operate on normalized [-1, 1] volumes (default dynamic range
2.0) and accumulate statistics in 64-bit. SSIM uses a 7^3 Gaussian window
(sigma 1.5) with the standard stability constants K1=0.01, K2=0.03,
averaged over fully valid windows only.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .errors import ContractError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.squeeze(a).astype(np.float64)


def _check_same_shape(pred, ref):
    if pred.shape != ref.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")


def psnr(pred, ref, data_range: float = 2.0) -> float:
    """10*log10(range^2 / MSE); identical inputs give +inf."""
    if data_range <= 0:
        raise ContractError(f"data range must be positive, got {data_range}")
    p, r = _arr(pred), _arr(ref)
    _check_same_shape(p, r)
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def mae(pred, ref) -> float:
    p, r = _arr(pred), _arr(ref)
    _check_same_shape(p, r)
    return float(np.mean(np.abs(p - r)))


def ncc(pred, ref) -> float:
    """Pearson correlation over all voxels; constant input yields 0."""
    p, r = _arr(pred), _arr(ref)
    _check_same_shape(p, r)
    pc = p - p.mean()
    rc = r - r.mean()
    denom = math.sqrt(float((pc * pc).sum()) * float((rc * rc).sum()))
    if denom == 0.0:
        warnings.warn("ncc of a constant volume is undefined; returning 0")
        return 0.0
    return float((pc * rc).sum() / denom)


def _gaussian_taps(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _local_mean(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    for ax in range(3):
        x = ndimage.correlate1d(x, taps, axis=ax, mode="constant")
    half = len(taps) // 2
    return x[half:-half, half:-half, half:-half]


def ssim3d(pred, ref, data_range: float = 2.0) -> float:
    """Mean local structural similarity over a Gaussian-weighted window."""
    p, r = _arr(pred), _arr(ref)
    _check_same_shape(p, r)
    if any(e < SSIM_WINDOW for e in p.shape):
        raise ContractError(
            f"ssim3d needs extents >= {SSIM_WINDOW}, got {p.shape}"
        )
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_p = _local_mean(p, taps)
    mu_r = _local_mean(r, taps)
    m_pp = _local_mean(p * p, taps)
    m_rr = _local_mean(r * r, taps)
    m_pr = _local_mean(p * r, taps)
    var_p = m_pp - mu_p ** 2
    var_r = m_rr - mu_r ** 2
    cov = m_pr - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def dice(pred_mask, ref_mask) -> float:
    """Overlap 2|A&B|/(|A|+|B|); two empty masks count as perfect (1.0)."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(ref_mask).astype(bool)
    _check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def segment_bone(ct_like, threshold: float = 0.5) -> np.ndarray:
    """Threshold proxy for bone segmentation on CT-scaled volumes."""
    return _arr(ct_like) >= threshold


def evaluate_volumes(pred, ref, labels=None, bone_label: int = 4) -> dict:
    """All scalar metrics for one synthesized/reference pair."""
    out = {
        "psnr": psnr(pred, ref),
        "ssim": ssim3d(pred, ref),
        "mae": mae(pred, ref),
        "ncc": ncc(pred, ref),
    }
    if labels is not None:
        out["bone_dice"] = dice(segment_bone(pred), np.asarray(labels) == bone_label)
    return out


def format_report(values: dict) -> str:
    """Line-oriented key=value rendering (inf spelled 'inf')."""
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, float):
            lines.append(f"{k}={'inf' if math.isinf(v) else f'{v:.6f}'}")
        else:
            lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
