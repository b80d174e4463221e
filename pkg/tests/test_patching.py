import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpnet.errors import ConfigError, ShapeError
from lpnet.patching import PatchGrid, extract_patches, fuse, fuse_patches, split
from lpnet.tensor_ops import Tensor, grad_check
from oracles import overlap_mean

ABLATION = [(20, 10), (30, 10), (30, 15), (40, 20)]


@pytest.mark.parametrize("patch,stride", ABLATION)
def test_patch_count_120(patch, stride):
    grid = PatchGrid(120, 120, patch, stride)
    assert len(grid) == ((120 - patch) // stride + 1) ** 2


def test_default_grid_has_100_patches():
    assert len(PatchGrid(120, 120, 30, 10)) == 100


def test_row_major_order():
    grid = PatchGrid(6, 8, 4, 2)
    assert grid.coords == ((0, 0), (0, 2), (0, 4), (2, 0), (2, 2), (2, 4))
    assert (grid.rows, grid.cols) == (2, 3)


@pytest.mark.parametrize("args", [(120, 120, 30, 7), (12, 12, 2, 5), (10, 10, 12, 1),
                                  (10, 10, 0, 1), (10, 10, 4, 0)])
def test_invalid_grids(args):
    with pytest.raises(ConfigError):
        PatchGrid(*args)


def test_coverage_counts():
    cov = PatchGrid(6, 6, 4, 2).coverage()
    assert cov[0, 0] == 1
    assert cov[3, 3] == 4
    assert cov[2, 0] == 2


def test_split_copies():
    img = np.arange(36.0).reshape(6, 6)
    grid, patches = split(img, 4, 2)
    patches[0][0, 0] = -1
    assert img[0, 0] == 0
    np.testing.assert_array_equal(patches[2], img[2:6, 0:4])


@pytest.mark.parametrize("patch,stride", ABLATION)
def test_split_fuse_identity_exact(patch, stride):
    img = np.random.default_rng(patch).random((120, 120))
    grid, patches = split(img, patch, stride)
    np.testing.assert_array_equal(fuse(grid, patches), img)


def test_fuse_length_mismatch():
    grid, patches = split(np.zeros((6, 6)), 4, 2)
    with pytest.raises(ShapeError):
        fuse(grid, patches[:-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 3), st.integers(0, 3),
       st.integers(0, 3))
def test_fuse_matches_overlap_oracle(seed, patch, stride, nr, nc):
    stride = min(stride, patch)
    h, w = patch + nr * stride, patch + nc * stride
    grid = PatchGrid(h, w, patch, stride)
    patches = list(np.random.default_rng(seed).standard_normal((len(grid), patch, patch)))
    np.testing.assert_allclose(fuse(grid, patches), overlap_mean(h, w, patch, stride, patches),
                               rtol=0, atol=1e-12)


def test_extract_matches_split():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 10, 10))
    grid = PatchGrid(10, 10, 4, 3)
    out = extract_patches(Tensor(x), grid).data
    assert out.shape == (2 * 9, 3, 4, 4)
    for n in range(2):
        _, ref = split(x[n], 4, 3)
        for k in range(9):
            np.testing.assert_array_equal(out[n * 9 + k], ref[k])


def test_fuse_patches_matches_fuse():
    rng = np.random.default_rng(1)
    grid = PatchGrid(10, 10, 4, 3)
    p = rng.random((2 * 9, 1, 4, 4))
    out = fuse_patches(Tensor(p), grid).data
    for n in range(2):
        np.testing.assert_allclose(out[n, 0], fuse(grid, list(p[n * 9:(n + 1) * 9, 0])),
                                   atol=1e-15)


def test_extract_then_fuse_is_identity():
    x = np.random.default_rng(2).random((1, 2, 9, 9))
    grid = PatchGrid(9, 9, 3, 2)
    np.testing.assert_allclose(fuse_patches(extract_patches(Tensor(x), grid), grid).data, x,
                               atol=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_patch_ops_grad_check(seed):
    rng = np.random.default_rng(seed)
    grid = PatchGrid(7, 7, 3, 2)
    x = Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True)
    assert grad_check(lambda: extract_patches(x, grid), {"x": x}, seed=seed).passed
    p = Tensor(rng.standard_normal((2 * len(grid), 2, 3, 3)), requires_grad=True)
    assert grad_check(lambda: fuse_patches(p, grid), {"p": p}, seed=seed).passed
