"""
Target spread maps and the patch grid
=====================================

A synthetic scene, the density the attention branch is trained to match,
and the sliding-window grid the patch network works on.
"""

import numpy as np

from lpnet.datagen import DatasetSpec, sample_scene
from lpnet.patching import fuse, split
from lpnet.target_spread import GaussianLowPassSpec, filtered_ground_truth, target_spread_map

image, mask = sample_scene(DatasetSpec(), seed=7)
print("image", image.shape, "range %.3f..%.3f" % (image.min(), image.max()))
print("target pixels:", int(mask.sum()))

# The low-pass width is measured in frequency bins, so a wide mask in the
# spectrum means a tight blob in space.
m = target_spread_map(mask)
print("spread map sums to %.12f, peak %.4f" % (m.sum(), m.max()))

for sigma in (5.0, 15.0, 40.0):
    spec = GaussianLowPassSpec(sigma, *mask.shape)
    f = filtered_ground_truth(mask, spec)
    share = f[mask].sum() / f.sum()
    print(f"sigma={sigma:5.1f}: fraction of mass on the target pixels {share:.3f}")

# %%
# The patch grid.  Every pixel is covered by at least one window, and the
# fused map is the per-pixel mean of the windows covering it.

for patch, stride in [(20, 10), (30, 10), (30, 15), (40, 20)]:
    grid, patches = split(image, patch, stride)
    cover = grid.coverage()
    print(f"P={patch} S={stride}: {len(grid):3d} patches, "
          f"coverage {int(cover.min())}..{int(cover.max())}")
    assert np.array_equal(fuse(grid, patches), image)
