"""Adaptive-threshold segmentation of confidence maps and blob extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, NumericError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThresholdSpec:
    """``t = max(v_min, mean + k * std)`` over the confidence map."""

    k: float = 4.0
    v_min: float = 0.5

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if not 0 < self.v_min < 1:
            raise ConfigError(f"v_min must lie in (0, 1), got {self.v_min}")


@dataclass
class Detection:
    pixels: np.ndarray      # K x 2 array of (row, col)
    centroid: tuple
    area: int

    @property
    def bbox(self):
        """(row_min, col_min, row_max, col_max), inclusive."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    def to_dict(self):
        return {"centroid": [float(c) for c in self.centroid], "area": self.area,
                "bbox": list(self.bbox)}


def adaptive_threshold(confidence, spec: ThresholdSpec = ThresholdSpec()):
    """Return ``(t_adpt, mask)``.  Population std; empty mask when max < v_min."""
    conf = np.asarray(confidence, dtype=np.float64)
    if not np.all(np.isfinite(conf)):
        raise NumericError("confidence map contains non-finite values")
    lo, hi = float(conf.min()), float(conf.max())
    # summation rounding can push the mean of a constant map past its value
    mu = min(max(float(conf.mean()), lo), hi)
    sigma = float(conf.std()) if hi > lo else 0.0
    t = max(spec.v_min, mu + spec.k * sigma)
    if hi < spec.v_min:
        return t, np.zeros(conf.shape, dtype=bool)
    return t, conf >= t


def connected_components(mask) -> list[Detection]:
    """8-connected components ordered by their first pixel in raster order."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    # ndimage.label numbers components in raster order of their first pixel
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    out = []
    for r, c in zip(np.split(rows, splits), np.split(cols, splits)):
        px = np.stack([r, c], axis=1)
        out.append(Detection(pixels=px, centroid=(float(r.mean()), float(c.mean())), area=len(r)))
    return out


def detect(confidence, spec: ThresholdSpec = ThresholdSpec()) -> list[Detection]:
    """Adaptive threshold followed by component extraction."""
    _, mask = adaptive_threshold(confidence, spec)
    return connected_components(mask)
