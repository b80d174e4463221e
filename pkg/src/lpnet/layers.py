"""Parameter-holding layers built on :mod:`lpnet.tensor_ops`."""
from __future__ import annotations

import numpy as np

from . import tensor_ops as T
from .tensor_ops import ConvSpec, Tensor


class Module:
    """Minimal container: named parameters, named buffers, train/eval flag."""

    training = True

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def _own(self, kind):
        for key, val in vars(self).items():
            if kind == "param" and isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif kind == "buffer" and isinstance(val, np.ndarray):
                yield key, val

    def named_parameters(self, prefix=""):
        for key, val in self._own("param"):
            yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix=""):
        for key, val in self._own("buffer"):
            yield prefix + key, val
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    """Same-padded convolution; fan-in scaled uniform weights, zero bias."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float64, bias=True):
        self.spec = ConvSpec(in_channels, out_channels, kernel_size)
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        self.weight = _param(rng.uniform(-bound, bound, self.spec.weight_shape), dtype)
        self.bias = _param(np.zeros(out_channels), dtype) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, spec=self.spec)


class TransposedConv2d(Module):
    """1x1 stride-2 deconvolution doubling the spatial size."""

    def __init__(self, in_channels, out_channels, rng, dtype=np.float64):
        bound = 1.0 / np.sqrt(in_channels)
        self.weight = _param(rng.uniform(-bound, bound, (in_channels, out_channels, 1, 1)), dtype)
        self.bias = _param(np.zeros(out_channels), dtype)

    def forward(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ResidualBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus shortcut, then ReLU.

    The shortcut is the identity when the channel count is unchanged and a
    1x1 convolution otherwise.  No pooling: spatial size is preserved.
    """

    def __init__(self, in_channels, out_channels, rng, dtype=np.float64):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype)
        self.shortcut = (Conv2d(in_channels, out_channels, 1, rng, dtype)
                         if in_channels != out_channels else None)

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(h + skip)


class KConv(Module):
    """Convolution + batch norm + ReLU (one inception branch)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float64):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, dtype)
        self.bn = BatchNorm2d(out_channels, dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


def residual_block(x, in_channels, out_channels, seed=0, dtype=np.float64, training=True):
    """Functional convenience: a freshly initialized residual block applied to ``x``."""
    block = ResidualBlock(in_channels, out_channels, np.random.default_rng(seed), dtype)
    block.train(training)
    return block(x)
