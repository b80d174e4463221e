"""Attention supervision: Gaussian low-pass filtered, L1-normalized ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class GaussianLowPassSpec:
    """Extent ``sigma`` in frequency-index units of an ``height x width`` spectrum."""

    sigma: float
    height: int
    width: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"invalid canvas {self.height}x{self.width}")

    @classmethod
    def default(cls, height: int, width: int) -> "GaussianLowPassSpec":
        return cls(sigma=width / 8.0, height=height, width=width)


def centered_frequencies(n: int) -> np.ndarray:
    """Frequency indices with zero at position ``n // 2`` (fftshift order)."""
    return np.arange(n) - n // 2


def gaussian_lowpass_mask(spec: GaussianLowPassSpec) -> np.ndarray:
    """exp(-(u^2 + v^2) / (2 sigma^2)) on the centered spectrum."""
    u = centered_frequencies(spec.height)[:, None]
    v = centered_frequencies(spec.width)[None, :]
    return np.exp(-0.5 * (u * u + v * v) / spec.sigma ** 2)


def filtered_ground_truth(gt, spec: GaussianLowPassSpec) -> np.ndarray:
    """Real part of IDFT(DFT(gt) * G), before clamping or normalization."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != (spec.height, spec.width):
        raise ConfigError(f"gt shape {gt.shape} != spec canvas {(spec.height, spec.width)}")
    mask = np.fft.ifftshift(gaussian_lowpass_mask(spec))
    return np.fft.ifft2(np.fft.fft2(gt) * mask).real


def target_spread_map(gt, spec: GaussianLowPassSpec | None = None) -> np.ndarray:
    """Non-negative ``H x W`` density summing to 1 centred on the targets of ``gt``."""
    gt = np.asarray(gt, dtype=np.float64)
    if spec is None:
        spec = GaussianLowPassSpec.default(*gt.shape)
    if not np.any(gt != 0):
        raise DataError("ground truth has no target pixels; spread map is undefined")
    # negatives are rounding noise or truncation ringing of the mask
    f = np.clip(filtered_ground_truth(gt, spec), 0.0, None)
    total = f.sum()
    if not total > 0:
        raise DataError("filtered ground truth is identically zero")
    return f / total
