"""Reconstruction metrics and pixel-wise uncertainty statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from prism.errors import InsufficientSamples, ShapeMismatch, TooSmall
from prism.grid import as_grid, check_same_shape

SD_FLOOR = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _grid(a):
    return as_grid(getattr(a, "grid", a))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _grid(a), _grid(b)
    check_same_shape(a, b)
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows."""
    a, b = _grid(a), _grid(b)
    check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs grids of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = _gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def kernel_rmse(k1, k2) -> float:
    """Root mean squared difference over the full grid."""
    a, b = _grid(k1), _grid(k2)
    check_same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class PosteriorStats:
    mean: np.ndarray
    sd: np.ndarray
    nll: float
    coverage3sd: float
    outlier_mask: np.ndarray
    abs_error: np.ndarray

    @property
    def mean_abs_error(self) -> float:
        return float(self.abs_error.mean())

    @property
    def mean_sd(self) -> float:
        return float(self.sd.mean())


def posterior_stats(samples, truth, sd_floor: float = SD_FLOOR) -> PosteriorStats:
    """Per-pixel mean/SD of ``samples`` and how well they explain ``truth``.

    The SD is the population SD floored at ``sd_floor``. ``nll`` is the
    per-pixel average Gaussian negative log-likelihood of ``truth``; pixels
    more than 3 SD from the mean are outliers.
    """
    stack = np.asarray([_grid(s) for s in samples]) if not isinstance(samples, np.ndarray) else samples
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(stack)}")
    truth = _grid(truth)
    if stack.shape[1:] != truth.shape:
        raise ShapeMismatch(f"samples {stack.shape[1:]} vs truth {truth.shape}")
    mean = stack.mean(axis=0)
    sd = np.maximum(stack.std(axis=0), sd_floor)
    err = truth - mean
    nll = float(np.mean(0.5 * np.log(2 * np.pi * sd**2) + err**2 / (2 * sd**2)))
    mask = np.abs(err) > 3 * sd
    return PosteriorStats(mean, sd, nll, 1.0 - float(mask.mean()), mask, np.abs(err))


def error_to_sd_map(stats: PosteriorStats, truth) -> np.ndarray:
    truth = _grid(truth)
    check_same_shape(stats.mean, truth)
    return np.abs(truth - stats.mean) / stats.sd


METRIC_FIELDS = ["run_id", "noise_sigma", "mode", "psnr", "ssim", "kernel_rmse", "nll", "coverage3sd"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    return str(value)


def write_metrics_csv(path, rows, fields=METRIC_FIELDS) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})
