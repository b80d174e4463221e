"""Losses, Adam and the end-to-end training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from .detect import ThresholdSpec
from .errors import ConfigError, DataError, NumericError, ShapeError
from .layers import BatchNorm2d
from .model import ForwardOutput, LPNet, load_checkpoint, save_checkpoint
from .patching import PatchGrid
from .target_spread import GaussianLowPassSpec, target_spread_map
from .tensor_ops import Tensor, make_result

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def attention_loss(atn_d: Tensor, m_t) -> Tensor:
    """Sum of squared differences between the attention density and the spread map."""
    m_t = np.asarray(m_t, dtype=atn_d.dtype)
    if m_t.size != atn_d.size:
        raise ShapeError(f"attention map {atn_d.shape} and spread map {m_t.shape} differ")
    diff = atn_d - Tensor(m_t.reshape(atn_d.shape))
    return T.tsum(T.square(diff))


def patch_losses(likelihood: Tensor, gt) -> Tensor:
    """Pixel-summed binary cross entropy per patch, shape ``(M,)``.

    Likelihoods are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is the
    analytic one evaluated at the clamped value.
    """
    y = np.asarray(gt, dtype=likelihood.dtype).reshape(likelihood.shape)
    p = np.clip(likelihood.data, BCE_EPS, 1 - BCE_EPS)
    per_px = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    axes = tuple(range(1, likelihood.ndim))
    out = per_px.sum(axis=axes) if axes else per_px

    def backward(g):
        gb = g.reshape(g.shape + (1,) * len(axes))
        return (gb * (p - y) / (p * (1 - p)),)

    return make_result(out, (likelihood,), backward)


def patch_loss(likelihood: Tensor, gt_patch) -> Tensor:
    """BCE summed over the pixels of a single patch."""
    return T.tsum(patch_losses(likelihood, gt_patch))


@dataclass
class LossReport:
    loss_a: float
    mean_patch_loss: float
    total: float
    per_patch: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"loss_a": self.loss_a, "mean_patch_loss": self.mean_patch_loss,
                "total": self.total}


def total_loss(output: ForwardOutput, m_t, gt_patches, attention_weight: float = 1.0):
    """``loss_a + mean_n loss_pn``, averaged over the images of a batch.

    Returns ``(loss tensor, LossReport)``.  ``attention_weight`` scales
    ``loss_a``; 1.0 is the unweighted objective.
    """
    n_img = output.confidence.shape[0]
    n_patch = output.patch_likelihoods.shape[0]
    if n_patch < 1:
        raise ShapeError("need at least one patch")
    la = attention_loss(output.atn_d, m_t) * (1.0 / n_img)
    lp = patch_losses(output.patch_likelihoods, gt_patches)
    mp = T.tsum(lp) * (1.0 / n_patch)
    loss = la * attention_weight + mp if attention_weight != 1.0 else la + mp
    rep = LossReport(float(la.data), float(mp.data), float(la.data) + float(mp.data),
                     lp.data.copy())
    return loss, rep


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place bias-corrected Adam update of ``param``, ``m`` and ``v`` (step ``t`` >= 1)."""
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NumericError(f"{bad} non-finite gradient entries at Adam step {t}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            try:
                adam_step(p.data, grad, self.m[k], self.v[k], self.t, self.lr, *self.betas,
                          self.eps)
            except NumericError as exc:
                raise NumericError(f"{exc} (parameter {k})") from exc

    def state_arrays(self) -> dict:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        out["adam_t"] = np.array(self.t)
        return out

    def load_state_arrays(self, arrays: dict):
        for k in self.params:
            self.m[k][...] = arrays[f"adam_m/{k}"]
            self.v[k][...] = arrays[f"adam_v/{k}"]
        self.t = int(arrays["adam_t"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    steps: int = 1000
    seed: int = 0
    sigma: float | None = None          # spread-map extent; None means width / 8
    k: float = 4.0
    v_min: float = 0.5
    checkpoint_every: int = 100
    attention_weight: float = 1.0
    micro_batch: int | None = None      # split batches for memory; grads are accumulated
    dtype: str = "float32"
    schedule: str = "constant"          # or "cosine", decaying to final_lr_frac * lr
    final_lr_frac: float = 0.02
    recalibrate_bn: bool = False        # refit BN running stats on the training set at the end

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr, batch_size must be positive and steps non-negative")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.final_lr_frac <= 1:
            raise ConfigError("final_lr_frac must lie in (0, 1]")
        ThresholdSpec(self.k, self.v_min)

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = (step - 1) / (self.steps - 1)
        lo = self.final_lr_frac
        return self.lr * (lo + (1 - lo) * 0.5 * (1 + np.cos(np.pi * frac)))

    @property
    def threshold(self) -> ThresholdSpec:
        return ThresholdSpec(self.k, self.v_min)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def gt_patches(mask, grid: PatchGrid) -> np.ndarray:
    """``L x P x P`` ground-truth patches in grid order."""
    p = grid.patch
    return np.stack([mask[r:r + p, c:c + p] for r, c in grid.coords])


@dataclass
class PreparedSample:
    image: np.ndarray
    spread: np.ndarray
    patches: np.ndarray


def prepare_samples(images, masks, grid: PatchGrid, sigma=None, dtype=np.float32):
    """Cast images and precompute each sample's spread map and GT patches once."""
    out = []
    for i, (img, mask) in enumerate(zip(images, masks)):
        img = np.asarray(img)
        if img.shape != (grid.height, grid.width):
            raise DataError(f"sample {i}: size {img.shape} does not match the patch grid")
        if img.min() < 0 or img.max() > 1:
            raise DataError(f"sample {i}: intensities outside [0, 1]")
        mask = np.asarray(mask, dtype=bool)
        spec = GaussianLowPassSpec(sigma if sigma else grid.width / 8.0, grid.height, grid.width)
        out.append(PreparedSample(img.astype(dtype), target_spread_map(mask, spec),
                                  gt_patches(mask, grid).astype(dtype)))
    return out


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n, batch_size, seed, step):
    """Sample indices of 1-based ``step``: seeded shuffled epochs, no reuse inside an epoch."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, k = divmod(step - 1, per_epoch)
    order = epoch_order(n, seed, epoch)
    return order[k * batch_size:(k + 1) * batch_size]


@dataclass
class TrainResult:
    history: list
    model: LPNet
    optimizer: Adam
    checkpoint: Path | None = None


def train_step(model: LPNet, opt: Adam, batch, cfg: TrainConfig) -> LossReport:
    model.train()
    model.zero_grad()
    chunk = cfg.micro_batch or len(batch)
    la = mp = 0.0
    per_patch = []
    for s in range(0, len(batch), chunk):
        part = batch[s:s + chunk]
        x = np.stack([b.image for b in part])[:, None]
        out = model.forward(x)
        loss, rep = total_loss(out, np.stack([b.spread for b in part]),
                               np.concatenate([b.patches for b in part]), cfg.attention_weight)
        frac = len(part) / len(batch)
        (loss * frac).backward()
        la += rep.loss_a * frac
        mp += rep.mean_patch_loss * frac
        per_patch.append(rep.per_patch)
    report = LossReport(la, mp, la + mp, np.concatenate(per_patch))
    if not np.isfinite(report.total):
        raise NumericError(f"loss diverged: {report.to_dict()}")
    opt.step()
    return report


def recalibrate_bn(model: LPNet, images, batch_size: int = 10):
    """Replace every BN running estimate by its average over ``images``.

    Training leaves exponential averages dominated by the last few small
    batches; eval-mode predictions are steadier with statistics taken over
    the whole set.  Each batch gets momentum ``1 / (i + 1)`` so the result
    is the plain mean of the per-batch estimates.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    saved, was_training = [m.momentum for m in bns], model.training
    for m in bns:
        m.running_mean[...] = 0
        m.running_var[...] = 1
    model.train()
    try:
        with T.no_grad():
            for i, s in enumerate(range(0, len(images), batch_size)):
                for m in bns:
                    m.momentum = 1.0 / (i + 1)
                x = np.stack([np.asarray(im, dtype=model.dtype)
                              for im in images[s:s + batch_size]])
                model.forward(x[:, None])
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        model.train(was_training)
    return model


def train(model: LPNet, images, masks, cfg: TrainConfig, out_dir=None, resume=None,
          log_file="train_log.jsonl") -> TrainResult:
    """Train ``model`` in place.

    Writes ``train_log.jsonl`` and checkpoints ``ckpt_XXXXXX.npz`` every
    ``cfg.checkpoint_every`` steps plus ``model.npz`` at the end when
    ``out_dir`` is given.  ``resume`` is a checkpoint path from an earlier run
    with the same configuration.
    """
    if len(images) == 0:
        raise DataError("training set is empty")
    grid = model.grid_for(*np.asarray(images[0]).shape)
    samples = prepare_samples(images, masks, grid, cfg.sigma, model.dtype)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    start = 1
    if resume is not None:
        loaded, meta, arrays = load_checkpoint(resume, model.config)
        model.load_state_dict(loaded.state_dict())
        opt.load_state_arrays(arrays)
        start = int(meta["extra"]["step"]) + 1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logf = open(out_dir / log_file, "a") if out_dir is not None else None
    history, last_ckpt = [], None
    t0 = time.time()

    def checkpoint(step, name):
        path = out_dir / name
        save_checkpoint(path, model, extra={"step": step, "train_config": cfg.to_dict()},
                        arrays=opt.state_arrays())
        return path

    try:
        for step in range(start, cfg.steps + 1):
            idx = batch_indices(len(samples), cfg.batch_size, cfg.seed, step)
            opt.lr = cfg.lr_at(step)
            rep = train_step(model, opt, [samples[i] for i in idx], cfg)
            row = {"step": step, **rep.to_dict(), "wall_time": time.time() - t0}
            history.append(row)
            if logf is not None:
                logf.write(json.dumps(row) + "\n")
                logf.flush()
            if step % 10 == 0 or step == start:
                log.info("step %d total %.5g (attention %.3g, patch %.5g)", step, rep.total,
                         rep.loss_a, rep.mean_patch_loss)
            if out_dir is not None and step % cfg.checkpoint_every == 0:
                last_ckpt = checkpoint(step, f"ckpt_{step:06d}.npz")
        if cfg.recalibrate_bn:
            recalibrate_bn(model, [s.image for s in samples], cfg.micro_batch or cfg.batch_size)
        if out_dir is not None:
            last_ckpt = checkpoint(cfg.steps, "model.npz")
    finally:
        if logf is not None:
            logf.close()
    return TrainResult(history, model, opt, last_ckpt)
