"""Image quality metrics: PSNR and Gaussian-window SSIM."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x, ref, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs report the 100 dB cap."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    if data_range <= 0:
        raise ValueError("psnr: data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # scipy "reflect" mirrors about the edge: (d c b a | a b c d)
    out = correlate1d(img, g, axis=0, mode="reflect")
    return correlate1d(out, g, axis=1, mode="reflect")


def ssim(x, ref, data_range: float = 1.0) -> float:
    """Mean SSIM over a 2D image (11x11 Gaussian window, sigma 1.5,
    K1=0.01, K2=0.03, symmetric boundary extension)."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape or x.ndim != 2:
        raise ValueError(f"ssim: expects equal 2D shapes, got {x.shape} vs {ref.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x, g), _blur(ref, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(ref * ref, g) - my * my
    sxy = _blur(x * ref, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def volume_metrics(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0):
    """Per-slice PSNR/SSIM on outputs clamped to [0, data_range]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, data_range)
    rows = [(psnr(a, b, data_range), ssim(a, b, data_range)) for a, b in zip(x, ref)]
    return np.array(rows)
