import json
from types import SimpleNamespace

import numpy as np
import pytest

from lpnet.errors import ConfigError, DataError, NumericError, ShapeError
from lpnet.model import LPNet, NetworkConfig
from lpnet.patching import PatchGrid
from lpnet.tensor_ops import Tensor, grad_check
from lpnet.train import (Adam, TrainConfig, adam_step, attention_loss, batch_indices,
                         gt_patches, patch_loss, patch_losses, prepare_samples, total_loss, train,
                         train_step)

TINY = NetworkConfig(global_widths=(3, 4), attention_widths=(3, 1), branch_width=2,
                     subnet_widths=(3, 1), patch=8, stride=4, image_size=16)


def tiny_data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    imgs, masks = [], []
    for _ in range(n):
        img = rng.random((16, 16)) * 0.3
        m = np.zeros((16, 16), dtype=bool)
        r, c = rng.integers(2, 12, size=2)
        m[r:r + 2, c:c + 2] = True
        img[m] = 0.9
        imgs.append(img)
        masks.append(m)
    return imgs, masks


def test_attention_loss_value_and_gradient():
    a = Tensor(np.array([[0.2, 0.3], [0.1, 0.4]]), requires_grad=True)
    m = np.array([[0.25, 0.25], [0.25, 0.25]])
    loss = attention_loss(a, m)
    assert float(loss.data) == pytest.approx(0.05 ** 2 * 2 + 0.15 ** 2 * 2)
    loss.backward()
    np.testing.assert_allclose(a.grad, 2 * (a.data - m))
    assert grad_check(lambda: attention_loss(a, m), {"a": a}).passed


def test_attention_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        attention_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


def test_bce_value_and_gradient():
    p = Tensor(np.array([[0.9, 0.2], [0.5, 0.7]]), requires_grad=True)
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss = patch_loss(p, y)
    want = -(np.log(0.9) + np.log(0.8) + np.log(0.5) + np.log(0.3))
    assert float(loss.data) == pytest.approx(want)
    loss.backward()
    np.testing.assert_allclose(p.grad, (p.data - y) / (p.data * (1 - p.data)))
    assert grad_check(lambda: patch_loss(p, y), {"p": p}).passed


def test_bce_clamped_at_saturation():
    p = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    loss = patch_losses(Tensor(p.data[None]), np.array([[1.0, 0.0]]))
    assert np.isfinite(loss.data).all()
    assert float(loss.data[0]) == pytest.approx(-2 * np.log(1e-7), rel=1e-6)


def test_total_loss_matches_recomputation():
    model = LPNet(TINY, seed=0)
    imgs, masks = tiny_data(2)
    out = model.forward(np.stack(imgs)[:, None])
    grid = out.grid
    from lpnet.target_spread import target_spread_map
    m_t = np.stack([target_spread_map(m) for m in masks])
    gts = np.concatenate([gt_patches(m, grid) for m in masks])
    loss, rep = total_loss(out, m_t, gts)
    la = ((out.atn_d.data[:, 0] - m_t) ** 2).sum() / 2
    assert rep.loss_a == pytest.approx(la)
    assert rep.mean_patch_loss == pytest.approx(rep.per_patch.mean())
    assert float(loss.data) == pytest.approx(rep.total)
    assert len(rep.per_patch) == 2 * len(grid)


def test_gt_patches_grid_order():
    mask = np.zeros((6, 6))
    mask[4, 1] = 1
    p = gt_patches(mask, PatchGrid(6, 6, 4, 2))
    assert p.shape == (4, 4, 4)
    assert p[2][2, 1] == 1 and p[0].sum() == 0


def test_adam_first_step_hand_computed():
    param = np.array([1.0, -2.0])
    grad = np.array([0.5, -4.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_step(param, grad, m, v, t=1, lr=0.1)
    # bias correction makes the first update lr * g / (|g| + eps)
    np.testing.assert_allclose(param, [0.9, -1.9], atol=1e-7)
    np.testing.assert_allclose(m, 0.1 * grad)
    np.testing.assert_allclose(v, 0.001 * grad ** 2)


def test_adam_rejects_non_finite():
    with pytest.raises(NumericError):
        adam_step(np.zeros(1), np.array([np.inf]), np.zeros(1), np.zeros(1), 1)


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        x.grad = None
        (x * x).sum().backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(10, 3, seed=0, step=s) for s in range(1, 5)])
    assert sorted(seen) == list(range(10))
    assert not np.array_equal(batch_indices(10, 10, 0, 1), batch_indices(10, 10, 0, 2))


@pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"micro_batch": 0},
                                {"sigma": -1.0}, {"k": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_training_reduces_loss_and_writes_outputs(tmp_path):
    imgs, masks = tiny_data(4)
    model = LPNet(TINY, seed=0)
    cfg = TrainConfig(lr=1e-2, batch_size=2, steps=30, checkpoint_every=10)
    res = train(model, imgs, masks, cfg, out_dir=tmp_path)
    first = np.mean([h["total"] for h in res.history[:4]])
    last = np.mean([h["total"] for h in res.history[-4:]])
    assert last < 0.7 * first
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 30 and json.loads(lines[-1])["step"] == 30
    assert {p.name for p in tmp_path.glob("*.npz")} == {
        "ckpt_000010.npz", "ckpt_000020.npz", "ckpt_000030.npz", "model.npz"}


def test_resume_reproduces_uninterrupted_run(tmp_path):
    imgs, masks = tiny_data(4)
    cfg = TrainConfig(lr=1e-2, batch_size=2, steps=6, checkpoint_every=3)
    full = LPNet(TINY, seed=0)
    train(full, imgs, masks, cfg)
    part = LPNet(TINY, seed=0)
    train(part, imgs, masks, cfg.__class__(**{**cfg.to_dict(), "steps": 3}), out_dir=tmp_path)
    resumed = LPNet(TINY, seed=99)
    train(resumed, imgs, masks, cfg, resume=tmp_path / "ckpt_000003.npz")
    for (k, a), (_, b) in zip(sorted(full.state_dict().items()),
                              sorted(resumed.state_dict().items())):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12, err_msg=k)


def test_micro_batches_accumulate_mean_gradient():
    imgs, masks = tiny_data(2)
    model = LPNet(TINY, seed=0)
    samples = prepare_samples(imgs, masks, model.grid_for(16, 16))
    no_step = SimpleNamespace(step=lambda: None)
    train_step(model, no_step, samples, TrainConfig(batch_size=2, micro_batch=1))
    acc = {k: p.grad.copy() for k, p in model.named_parameters()}
    want = {k: np.zeros_like(g) for k, g in acc.items()}
    for s in samples:
        train_step(model, no_step, [s], TrainConfig(batch_size=1))
        for k, p in model.named_parameters():
            want[k] += 0.5 * p.grad
    for k in acc:
        np.testing.assert_allclose(acc[k], want[k], rtol=1e-10, atol=1e-12, err_msg=k)


def test_empty_or_bad_data():
    model = LPNet(TINY)
    with pytest.raises(DataError):
        train(model, [], [], TrainConfig(steps=1))
    with pytest.raises(DataError):
        train(model, [np.full((16, 16), 2.0)], [np.eye(16, dtype=bool)], TrainConfig(steps=1))


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr=0.1, steps=11, schedule="cosine", final_lr_frac=0.1)
    lrs = [cfg.lr_at(s) for s in range(1, 12)]
    assert lrs[0] == pytest.approx(0.1) and lrs[-1] == pytest.approx(0.01)
    assert lrs[5] == pytest.approx(0.055)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig(lr=0.1).lr_at(7) == 0.1
    with pytest.raises(ConfigError):
        TrainConfig(schedule="step")


def test_recalibrate_bn_averages_batch_statistics():
    from lpnet.train import recalibrate_bn
    imgs, _ = tiny_data(4)
    model = LPNet(TINY, seed=0)
    model.forward(np.stack(imgs)[:, None])  # perturb the running stats first
    recalibrate_bn(model, imgs, batch_size=2)
    assert model.training
    bn = model.extractor[0].bn1
    means = [model.extractor[0].conv1(Tensor(np.stack(imgs[s:s + 2])[:, None])).data
             .mean(axis=(0, 2, 3)) for s in (0, 2)]
    np.testing.assert_allclose(bn.running_mean, np.mean(means, axis=0), rtol=1e-10)
    assert bn.momentum == 0.1
