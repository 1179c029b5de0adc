"""Image quality metrics and evaluation reports.

PSNR is computed on [0, 1] float intensities (MAX = 1), not on
quantized 8-bit values, so numbers are comparable across runs. SSIM
uses the canonical 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, L=1, computed per channel over valid window positions and
averaged.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .image import ImageTensor

PSNR_CAP_DB = 100.0  # stands in for infinity in aggregates

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _as_array(img) -> np.ndarray:
    """Accept ImageTensor or a raw array of normalized intensities."""
    if isinstance(img, ImageTensor):
        return img.data
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """10*log10(1 / MSE) in dB; math.inf when the images are identical."""
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-d image with a 1-d kernel."""
    k = kernel.size
    h, w = img.shape
    rows = np.zeros((h, w - k + 1), dtype=np.float64)
    for i in range(k):
        rows += kernel[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for i in range(k):
        out += kernel[i] * rows[i : i + h - k + 1, :]
    return out


def ssim(a, b) -> float:
    """Mean local structural similarity over valid window positions."""
    a, b = _as_array(a), _as_array(b)
    _check_pair(a, b)
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise DataError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than the {_SSIM_WINDOW}px SSIM window")
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2

    scores = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch].astype(np.float64)
        y = b[:, :, ch].astype(np.float64)
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x * mu_x
        var_y = _filter_valid(y * y, kernel) - mu_y * mu_y
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class ImageResult:
    name: str
    psnr_db: float
    ssim: float
    seconds: float = 0.0


@dataclass
class EvalReport:
    results: list[ImageResult] = field(default_factory=list)
    stage_peak_bytes: dict[str, int] = field(default_factory=dict)
    host_peak_bytes: int = 0

    def add(self, name: str, psnr_db: float, ssim_value: float, seconds: float = 0.0) -> None:
        self.results.append(ImageResult(name, psnr_db, ssim_value, seconds))

    @property
    def mean_psnr_db(self) -> float:
        if not self.results:
            return 0.0
        return float(np.mean([min(r.psnr_db, PSNR_CAP_DB) for r in self.results]))

    @property
    def mean_ssim(self) -> float:
        if not self.results:
            return 0.0
        return float(np.mean([r.ssim for r in self.results]))

    @property
    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.results))

    def to_text(self) -> str:
        lines = [f"{'image':<40} {'psnr_db':>10} {'ssim':>8} {'seconds':>9}"]
        for r in self.results:
            shown = min(r.psnr_db, PSNR_CAP_DB)
            lines.append(f"{r.name:<40} {shown:>10.4f} {r.ssim:>8.4f} {r.seconds:>9.3f}")
        lines.append(f"{'aggregate':<40} {self.mean_psnr_db:>10.4f} {self.mean_ssim:>8.4f} "
                     f"{self.total_seconds:>9.3f}")
        for stage, peak in self.stage_peak_bytes.items():
            lines.append(f"peak[{stage}] = {peak} bytes")
        if self.host_peak_bytes:
            lines.append(f"peak[host] = {self.host_peak_bytes} bytes")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr_db", "ssim", "seconds"])
            for r in self.results:
                writer.writerow([r.name, min(r.psnr_db, PSNR_CAP_DB), r.ssim, r.seconds])
            writer.writerow(["aggregate", self.mean_psnr_db, self.mean_ssim, self.total_seconds])


def evaluate_pairs(pairs, model=None, mini_batch_size=None) -> EvalReport:
    """Score (hazy, clear) image pairs; with a model, hazy images are
    dehazed first, otherwise the pair is compared directly."""
    from .model import dehaze

    report = EvalReport()
    for name, hazy, clear in pairs:
        start = time.perf_counter()
        candidate = dehaze(hazy, model, mini_batch_size=mini_batch_size) if model is not None else hazy
        elapsed = time.perf_counter() - start
        report.add(name, psnr(candidate, clear), ssim(candidate, clear), elapsed)
    return report
