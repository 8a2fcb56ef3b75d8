"""Training loss and image-quality metrics.

Image metrics compare magnitude images and assume the reference is scaled
to peak 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .kspace import MaskLike, as_complex, mask_tensor

SSIM_WINDOW = 7
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def hybrid_loss(u, y, omega: MaskLike) -> torch.Tensor:
    """Normalized L1 + L2 distance between ``u`` and ``y`` restricted to ``omega``."""
    u, y = as_complex(u), as_complex(y)
    m = mask_tensor(omega).bool()
    if u.shape != y.shape or tuple(y.shape) != tuple(m.shape):
        raise ValidationError(f"shape mismatch: {tuple(u.shape)}, {tuple(y.shape)}, {tuple(m.shape)}")
    ys = y[m]
    d = u[m] - ys
    l2 = torch.linalg.vector_norm(ys)
    l1 = ys.abs().sum()
    if float(l2) == 0.0 or float(l1) == 0.0:
        raise ValidationError("reference has zero norm on the mask")
    return torch.linalg.vector_norm(d) / l2 + d.abs().sum() / l1


def _magnitudes(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(as_complex(pred).detach().numpy())
    b = np.abs(as_complex(gt).detach().numpy())
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; ``inf`` for identical magnitudes."""
    a, b = _magnitudes(pred, gt)
    rmse = math.sqrt(float(np.mean((a - b) ** 2)))
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0 / rmse)


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov):
    return ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / (
        (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    )


def ssim(pred, gt, windowed: bool = True, window: int = SSIM_WINDOW) -> float:
    """Structural similarity of the magnitude images.

    ``windowed=False`` uses global statistics over the whole image; otherwise
    the result is the mean over all fully contained ``window`` x ``window``
    uniform windows.
    """
    a, b = _magnitudes(pred, gt)
    if windowed:
        if window > min(a.shape):
            raise ValidationError(f"window {window} larger than image {a.shape}")
        a = sliding_window_view(a, (window, window))
        b = sliding_window_view(b, (window, window))
        axes = (-2, -1)
    else:
        axes = (0, 1)
    mu_a = a.mean(axis=axes, keepdims=True)
    mu_b = b.mean(axis=axes, keepdims=True)
    da, db = a - mu_a, b - mu_b
    s = _ssim_formula(
        mu_a, mu_b, (da * da).mean(axis=axes, keepdims=True), (db * db).mean(axis=axes, keepdims=True),
        (da * db).mean(axis=axes, keepdims=True),
    )
    return float(s.mean())


def error_map(pred, gt) -> np.ndarray:
    a, b = _magnitudes(pred, gt)
    return np.abs(a - b)


def save_error_map(emap: np.ndarray, path) -> None:
    """8-bit grayscale PNG scaled linearly to the map's own maximum."""
    from PIL import Image

    peak = float(emap.max())
    scaled = np.zeros(emap.shape, np.uint8) if peak == 0 else np.round(255 * emap / peak).astype(np.uint8)
    Image.fromarray(scaled, mode="L").save(path)


@dataclass
class MetricRecord:
    item_id: str
    method: str
    psnr_db: float
    ssim: float


def evaluate_pair(item_id: str, method: str, pred, gt, windowed: bool = True) -> MetricRecord:
    return MetricRecord(item_id, method, psnr(pred, gt), ssim(pred, gt, windowed))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def write_metrics_csv(records: Iterable[MetricRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "method", "psnr_db", "ssim"])
        for r in records:
            w.writerow([r.item_id, r.method, _fmt(r.psnr_db), _fmt(r.ssim)])


def read_metrics_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricRecord(r["item_id"], r["method"], float(r["psnr_db"]), float(r["ssim"])) for r in rows]


def mean_psnr(records: Iterable[MetricRecord]) -> float:
    return float(np.mean([r.psnr_db for r in records]))
