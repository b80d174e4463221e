"""Sliding-window patch decomposition and overlap-mean fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor_ops import Tensor, as_tensor, make_result


@dataclass(frozen=True)
class PatchGrid:
    """Top-left coordinates of every ``patch x patch`` window, row-major."""

    height: int
    width: int
    patch: int
    stride: int
    coords: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1:
            raise ConfigError(f"patch and stride must be positive, got {self.patch}, {self.stride}")
        if self.stride > self.patch:
            raise ConfigError(f"stride {self.stride} exceeds patch {self.patch}; "
                              "some pixels would not be covered")
        if self.patch > self.height or self.patch > self.width:
            raise ConfigError(
                f"patch {self.patch} larger than canvas {self.height}x{self.width}")
        if (self.height - self.patch) % self.stride or (self.width - self.patch) % self.stride:
            raise ConfigError(
                f"canvas {self.height}x{self.width} is not divisible into {self.patch}px patches "
                f"at stride {self.stride}: (H - P) and (W - P) must be multiples of the stride")
        coords = tuple((r, c) for r in range(0, self.height - self.patch + 1, self.stride)
                       for c in range(0, self.width - self.patch + 1, self.stride))
        object.__setattr__(self, "coords", coords)

    @property
    def rows(self) -> int:
        return (self.height - self.patch) // self.stride + 1

    @property
    def cols(self) -> int:
        return (self.width - self.patch) // self.stride + 1

    def __len__(self):
        return len(self.coords)

    def coverage(self) -> np.ndarray:
        """Number of patches covering each pixel."""
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for r, c in self.coords:
            cov[r:r + self.patch, c:c + self.patch] += 1
        return cov


def split(image, patch: int, stride: int):
    """Split a ``C x H x W`` (or ``H x W``) map into row-major patches.

    Returns ``(grid, patches)`` where ``patches[n]`` is the sub-array at
    ``grid.coords[n]``.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"split expects H x W or C x H x W, got {arr.shape}")
    grid = PatchGrid(arr.shape[-2], arr.shape[-1], patch, stride)
    patches = [arr[..., r:r + patch, c:c + patch].copy() for r, c in grid.coords]
    return grid, patches


def fuse(grid: PatchGrid, patches) -> np.ndarray:
    """Average overlapping patch values back onto the ``H x W`` canvas."""
    if len(patches) != len(grid):
        raise ShapeError(f"got {len(patches)} patches for a grid of {len(grid)}")
    p = grid.patch
    mean = np.zeros((grid.height, grid.width))
    seen = np.zeros((grid.height, grid.width))
    # running mean, so identical overlapping values reproduce themselves exactly
    for (r, c), pt in zip(grid.coords, patches):
        pt = np.asarray(pt.data if isinstance(pt, Tensor) else pt, dtype=np.float64)
        if pt.shape[-2:] != (p, p):
            raise ShapeError(f"patch shape {pt.shape} does not match patch size {p}")
        win = mean[r:r + p, c:c + p]
        cnt = seen[r:r + p, c:c + p]
        cnt += 1
        win += (pt.reshape(p, p) - win) / cnt
    return mean


def extract_patches(x: Tensor, grid: PatchGrid) -> Tensor:
    """Differentiable split of ``N x C x H x W`` into ``(N * L) x C x P x P``.

    Patches are ordered image-major, then row-major within each image.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if (h, w) != (grid.height, grid.width):
        raise ShapeError(f"input {h}x{w} does not match grid {grid.height}x{grid.width}")
    p, s = grid.patch, grid.stride
    win = sliding_window_view(x.data, (p, p), axis=(2, 3))[:, :, ::s, ::s]
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, c, p, p)

    def backward(g):
        g = g.reshape(n, len(grid), c, p, p)
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k, (r, cc) in enumerate(grid.coords):
            gx[:, :, r:r + p, cc:cc + p] += g[:, k]
        return (gx,)

    return make_result(out, (x,), backward)


def fuse_patches(patches: Tensor, grid: PatchGrid) -> Tensor:
    """Differentiable overlap-mean of ``(N * L) x C x P x P`` into ``N x C x H x W``."""
    L = len(grid)
    if patches.shape[0] % L:
        raise ShapeError(f"{patches.shape[0]} patches is not a multiple of grid size {L}")
    n = patches.shape[0] // L
    c, p = patches.shape[1], grid.patch
    if patches.shape[2:] != (p, p):
        raise ShapeError(f"patch shape {patches.shape[2:]} does not match patch size {p}")
    inv_cov = (1.0 / grid.coverage()).astype(patches.dtype)
    pd = patches.data.reshape(n, L, c, p, p)
    acc = np.zeros((n, c, grid.height, grid.width), dtype=patches.dtype)
    for k, (r, cc) in enumerate(grid.coords):
        acc[:, :, r:r + p, cc:cc + p] += pd[:, k]
    out = acc * inv_cov

    def backward(g):
        gs = g * inv_cov
        gp = np.empty((n, L, c, p, p), dtype=g.dtype)
        for k, (r, cc) in enumerate(grid.coords):
            gp[:, k] = gs[:, :, r:r + p, cc:cc + p]
        return (gp.reshape(patches.shape),)

    return make_result(out, (patches,), backward)
