"""Finite-difference gradient suite over every differentiable op and a small network."""
from __future__ import annotations

import time

import numpy as np

from . import tensor_ops as T
from .layers import ResidualBlock
from .model import LPNet, NetworkConfig, apply_attention
from .patching import PatchGrid, extract_patches, fuse_patches
from .target_spread import target_spread_map
from .tensor_ops import GradCheckReport, Tensor, grad_check
from .train import attention_loss, gt_patches, patch_losses, total_loss

OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3

# reduced network: 1 x 20 x 20 input, 10 px patches at stride 5
SMALL_NETWORK = NetworkConfig(global_widths=(4, 6, 3), attention_widths=(4, 6, 1),
                              branch_width=2, subnet_widths=(4, 1), patch=10, stride=5,
                              image_size=20)


def _leaf(rng, *shape, low=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 1 - low, shape)
    return Tensor(data, requires_grad=True)


def _op_cases(rng):
    """(name, fn, tensors) triples; inputs are drawn fresh from ``rng``."""
    cases = []

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
    cases.append(("add", lambda: T.add(a, b), {"a": a, "b": b}))
    c, d = _leaf(rng, 2, 3, 4), _leaf(rng, 1, 4)
    cases.append(("mul", lambda: T.mul(c, d), {"a": c, "b": d}))
    e = _leaf(rng, 3, 5)
    cases.append(("square", lambda: T.square(e), {"x": e}))
    f = _leaf(rng, 2, 3, 4)
    cases.append(("sum", lambda: T.tsum(f, axis=1), {"x": f}))
    g = _leaf(rng, 2, 6)
    cases.append(("reshape", lambda: T.reshape(g, (3, 4)), {"x": g}))
    h1, h2 = _leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 2, 3, 3)
    cases.append(("concat", lambda: T.concat([h1, h2], axis=1), {"a": h1, "b": h2}))
    r = _leaf(rng, 2, 3, 4, 4)
    cases.append(("relu", lambda: T.relu(r), {"x": r}))
    s = _leaf(rng, 2, 3, 4)
    cases.append(("sigmoid", lambda: T.sigmoid(s), {"x": s}))
    sm = _leaf(rng, 2, 1, 5, 4)
    cases.append(("softmax", lambda: T.elementwise_softmax(sm), {"x": sm}))

    for k in (1, 3, 5):
        x, w, bias = _leaf(rng, 2, 3, 6, 7), _leaf(rng, 4, 3, k, k), _leaf(rng, 4)
        cases.append((f"conv{k}x{k}", lambda x=x, w=w, bias=bias: T.conv2d(x, w, bias),
                      {"x": x, "weight": w, "bias": bias}))
    x, w = _leaf(rng, 1, 2, 6, 6), _leaf(rng, 3, 2, 3, 3)
    cases.append(("conv_stride2", lambda: T.conv2d(x, w, stride=2), {"x": x, "weight": w}))
    tx, tw, tb = _leaf(rng, 2, 3, 4, 3), _leaf(rng, 3, 2, 1, 1), _leaf(rng, 2)
    cases.append(("transposed_conv", lambda: T.transposed_conv2d(tx, tw, tb),
                  {"x": tx, "weight": tw, "bias": tb}))
    mp = _leaf(rng, 2, 2, 6, 4)
    cases.append(("max_pool", lambda: T.max_pool2d(mp), {"x": mp}))

    bx, gam, bet = _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)
    cases.append(("batch_norm_train",
                  lambda: T.batch_norm(bx, gam, bet, rm.copy(), rv.copy(), training=True),
                  {"x": bx, "gamma": gam, "beta": bet}))
    ex = _leaf(rng, 2, 2, 4, 4)
    erm, erv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    cases.append(("batch_norm_eval",
                  lambda: T.batch_norm(ex, gam, bet, erm, erv, training=False),
                  {"x": ex, "gamma": gam, "beta": bet}))

    block = ResidualBlock(2, 3, rng, np.float64)
    bin_ = _leaf(rng, 2, 2, 5, 5)
    tensors = {"input": bin_, **dict(block.named_parameters())}
    cases.append(("residual_block", lambda: block(bin_), tensors))

    grid = PatchGrid(7, 7, 3, 2)
    px = _leaf(rng, 2, 2, 7, 7)
    cases.append(("extract_patches", lambda: extract_patches(px, grid), {"x": px}))
    pp = _leaf(rng, 2 * len(grid), 2, 3, 3)
    cases.append(("fuse_patches", lambda: fuse_patches(pp, grid), {"patches": pp}))

    fe, den = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 1, 4, 4)
    cases.append(("attention_gate", lambda: apply_attention(fe, den), {"features": fe,
                                                                       "density": den}))
    at = _leaf(rng, 1, 1, 5, 5)
    m_t = rng.random((5, 5))
    cases.append(("attention_loss", lambda: attention_loss(at, m_t / m_t.sum()), {"atn_d": at}))
    lk = _leaf(rng, 3, 1, 4, 4, low=0.05)
    y = (rng.random((3, 4, 4)) < 0.3).astype(np.float64)
    cases.append(("patch_bce", lambda: patch_losses(lk, y), {"likelihood": lk}))
    return cases


def check_ops(seed: int = 0, tolerance: float = OP_TOLERANCE) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    return [grad_check(fn, tensors, tolerance=tolerance, seed=seed, name=name)
            for name, fn, tensors in _op_cases(rng)]


def check_network(seed: int = 0, tolerance: float = NETWORK_TOLERANCE,
                  config: NetworkConfig = SMALL_NETWORK, max_entries: int = 6) -> GradCheckReport:
    """Total loss of a reduced network against finite differences, train mode."""
    rng = np.random.default_rng(seed)
    model = LPNet(config, seed=seed, dtype=np.float64)
    n = config.image_size
    image = Tensor(rng.random((1, 1, n, n)), requires_grad=True)
    mask = np.zeros((n, n), dtype=bool)
    r, c = rng.integers(2, n - 3, size=2)
    mask[r:r + 2, c:c + 2] = True
    grid = model.grid_for(n, n)
    m_t = target_spread_map(mask)[None]
    patches = gt_patches(mask, grid).astype(np.float64)

    def fn():
        return total_loss(model.forward(image), m_t, patches)[0]

    tensors = {"input": image, **dict(model.named_parameters())}
    return grad_check(fn, tensors, tolerance=tolerance, seed=seed, max_entries=max_entries,
                      name="network", skip_kinks=True)


def run_suite(seeds=(0, 1, 2)) -> dict:
    """Every op and the reduced network for each seed; returns a JSON-ready summary."""
    t0 = time.time()
    rows = []
    for seed in seeds:
        for rep in check_ops(seed) + [check_network(seed)]:
            rows.append({"seed": seed, **rep.to_dict()})
    return {"passed": all(r["passed"] for r in rows), "checks": rows,
            "seconds": time.time() - t0}
