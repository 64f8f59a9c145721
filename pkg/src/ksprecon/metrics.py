"""Global image-quality metrics: NMSE and uniform-window SSIM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: Optional[float] = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and positive, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM constants k1, k2 must be positive")
        if self.data_range is not None and self.data_range <= 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def nmse(ref, test) -> float:
    ref, test = _pixels(ref), _pixels(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    denom = np.sum(ref**2)
    if denom == 0:
        raise UndefinedMetricError("NMSE undefined for an all-zero reference")
    return float(np.sum((test - ref) ** 2) / denom)


def ssim(ref, test, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over every window position that lies fully inside the image.

    Window statistics use the unbiased (N-1) covariance normalisation.
    """
    ref, test = _pixels(ref), _pixels(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    w = params.window
    if w > min(ref.shape):
        raise ValueError(f"SSIM window {w} larger than image {ref.shape}")
    data_range = params.data_range if params.data_range is not None else float(ref.max())
    if data_range <= 0:
        raise UndefinedMetricError("SSIM needs a positive data_range")

    c1 = (params.k1 * data_range) ** 2
    c2 = (params.k2 * data_range) ** 2
    n = w * w
    cov_norm = n / (n - 1) if n > 1 else 1.0

    a = sliding_window_view(ref, (w, w))
    b = sliding_window_view(test, (w, w))
    mu_a = a.mean(axis=(-2, -1))
    mu_b = b.mean(axis=(-2, -1))
    var_a = cov_norm * ((a * a).mean(axis=(-2, -1)) - mu_a**2)
    var_b = cov_norm * ((b * b).mean(axis=(-2, -1)) - mu_b**2)
    cov = cov_norm * ((a * b).mean(axis=(-2, -1)) - mu_a * mu_b)

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def volume_metrics(
    references: Mapping[int, np.ndarray],
    images: Mapping[int, np.ndarray],
    params: SsimParams = SsimParams(),
) -> Dict:
    """Per-slice SSIM and NMSE for one subject.

    Reference and test are both divided by the reference-volume maximum before
    SSIM, so the SSIM data range is 1 unless ``params.data_range`` overrides it.
    Slices without a reference get null metrics.
    """
    have_ref = [i for i in sorted(images) if references.get(i) is not None]
    volume_max = max((float(np.max(references[i])) for i in have_ref), default=0.0)
    scale = volume_max if volume_max > 0 else 1.0
    ssim_params = SsimParams(
        params.window, params.k1, params.k2,
        params.data_range / scale if params.data_range is not None else 1.0,
    )
    records = []
    for i in sorted(images):
        ref = references.get(i)
        rec = {"slice": int(i), "ssim": None, "nmse": None}
        if ref is not None:
            ref64 = np.asarray(ref, dtype=np.float64) / scale
            img64 = np.asarray(images[i], dtype=np.float64) / scale
            rec["ssim"] = ssim(ref64, img64, ssim_params)
            try:
                rec["nmse"] = nmse(ref, images[i])
            except UndefinedMetricError:
                pass
        records.append(rec)
    return {"data_range": volume_max if have_ref else None, "slices": records}
