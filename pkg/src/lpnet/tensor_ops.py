"""Dense tensors with reverse-mode gradients and the neural ops LPNet needs.

Only a handful of operations are supported: the ones used by the network and
its losses.  Every op records a closure that maps the output gradient to the
gradients of its inputs; :meth:`Tensor.backward` replays them in reverse
topological order.

Layout is ``N x C x H x W`` throughout.  Ops that accept unbatched
``C x H x W`` input return unbatched output.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError

_GRAD_ENABLED = True
# when a list, relu and max_pool2d append their branch decisions to it
_KINK_LOG: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_branches():
    """Collect the relu sign patterns and pooling choices of the enclosed forward pass."""
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


class Tensor:
    """A numpy array plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def make_result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output, recording ``backward`` only when a parent needs gradients."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Broadcasting element-wise product."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return make_result(out, tensors, backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    out = np.maximum(x.data, 0)
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(x.data > 0).tobytes())
    return make_result(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def elementwise_softmax(x: Tensor) -> Tensor:
    """Softmax over every element of each sample (all non-batch axes).

    A ``1 x H x W`` input is treated as a single sample; ``N x 1 x H x W``
    input is normalized per sample.
    """
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ShapeError(f"elementwise_softmax expects a single channel, got {x.shape}")
        flat = x.data.reshape(1, -1)
    elif x.ndim == 4:
        if x.shape[1] != 1:
            raise ShapeError(f"elementwise_softmax expects a single channel, got {x.shape}")
        flat = x.data.reshape(x.shape[0], -1)
    else:
        raise ShapeError(f"elementwise_softmax expects 1xHxW or Nx1xHxW, got {x.shape}")
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    out = s.reshape(x.shape)

    def backward(g):
        gf = g.reshape(s.shape)
        return ((s * (gf - (gf * s).sum(axis=1, keepdims=True))).reshape(x.shape),)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size not in (1, 3, 5):
            raise ConfigError(f"kernel_size must be 1, 3 or 5, got {self.kernel_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")


def _padded_flat(xd, p):
    """``C x (N * Hp * Wp)`` zero-padded copy of an ``N x C x H x W`` array."""
    n, c, h, w = xd.shape
    xt = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xd.dtype)
    xt[:, :, p:p + h, p:p + w] = xd.transpose(1, 0, 2, 3)
    return xt.reshape(c, -1)


def _same_conv(xd, wd):
    """Stride-1 zero-padded cross-correlation.

    Works on the flattened padded canvas: tap (di, dj) is a constant offset
    ``di * Wp + dj`` in flat index space, so every tap is one GEMM over a
    strided view with no im2col copy.
    """
    n, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    if k == 1:
        out = wd[:, :, 0, 0] @ xd.transpose(1, 0, 2, 3).reshape(c, -1)
        return np.ascontiguousarray(out.reshape(o, n, h, w).transpose(1, 0, 2, 3))
    flat = _padded_flat(xd, p)
    total = flat.shape[1]
    span = total - (k - 1) * (wp + 1)
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    out = np.zeros((o, total), dtype=xd.dtype)
    acc = out[:, :span]
    for di in range(k):
        for dj in range(k):
            s = di * wp + dj
            acc += taps[di, dj] @ flat[:, s:s + span]
    res = out.reshape(o, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(res)


def _same_conv_backward(g, xd, wd):
    n, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    if k == 1:
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        xm = xd.transpose(1, 0, 2, 3).reshape(c, -1)
        gx = (wd[:, :, 0, 0].T @ gm).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), (gm @ xm.T).reshape(wd.shape)
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    flat = _padded_flat(xd, p)
    total = flat.shape[1]
    span = total - (k - 1) * (wp + 1)
    gfull = np.zeros((o, n, hp, wp), dtype=g.dtype)
    gfull[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
    gflat = gfull.reshape(o, -1)[:, :span]
    taps_t = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
    gw = np.empty((k, k, o, c), dtype=wd.dtype)
    gx = np.zeros((c, total), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            s = di * wp + dj
            gw[di, dj] = gflat @ flat[:, s:s + span].T
            gx[:, s:s + span] += taps_t[di, dj] @ gflat
    gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
    gx = gx.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           spec: ConvSpec | None = None) -> Tensor:
    """2-D cross-correlation with zero "same" padding of ``k // 2``.

    At stride 1 the spatial size is preserved.  Larger strides sample the
    stride-1 result at every ``stride``-th position.
    """
    x, squeezed = _batched(x)
    if spec is not None:
        stride = spec.stride
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"weight shape {weight.shape} does not match {spec}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"weight must be O x C x k x k with odd k, got {weight.shape}")
    n, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise ShapeError(f"input has {c} channels but weight expects {wc}")
    if h < k or w < k:
        raise ShapeError(f"spatial size {h}x{w} smaller than kernel {k}x{k}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")

    full = _same_conv(x.data, weight.data)
    out = full[:, :, ::stride, ::stride]
    if stride > 1:
        out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        if stride > 1:
            gs = np.zeros(full.shape, dtype=g.dtype)
            gs[:, :, ::stride, ::stride] = g
            g = gs
        gx, gw = _same_conv_backward(g, x.data, weight.data)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else (as_tensor(0.0),))
    res = make_result(out, parents, backward)
    return reshape(res, res.shape[1:]) if squeezed else res


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 transposed convolution, stride 2, output padding 1.

    ``weight`` is ``C_in x C_out`` (trailing 1x1 axes optional).  Input pixel
    (i, j) lands on output (2i, 2j); every odd-index position holds the bias.
    """
    x, squeezed = _batched(x)
    n, c, h, w = x.shape
    if min(x.shape) <= 0:
        raise ShapeError(f"non-positive input dimensions {x.shape}")
    wmat = weight.data.reshape(weight.shape[0], weight.shape[1])
    if wmat.shape[0] != c:
        raise ShapeError(f"input has {c} channels but weight expects {wmat.shape[0]}")
    o = wmat.shape[1]
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    core = (wmat.T @ xm).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    out = np.zeros((n, o, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = core
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gs = g[:, :, ::2, ::2].transpose(1, 0, 2, 3).reshape(o, -1)
        gx = (wmat @ gs).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        gw = (xm @ gs.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else (as_tensor(0.0),))
    res = make_result(out, parents, backward)
    return reshape(res, res.shape[1:]) if squeezed else res


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first index."""
    x, squeezed = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    win = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    if _KINK_LOG is not None:
        _KINK_LOG.append(idx.astype(np.uint8).tobytes())
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (gx,)

    res = make_result(out, (x,), backward)
    return reshape(res, res.shape[1:]) if squeezed else res


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over N, H and W.

    In training mode the batch statistics are used and the running
    statistics are updated in place (``running_var`` with the unbiased
    estimate).  In eval mode the running statistics are used.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects N x C x H x W, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    shp = (1, c, 1, 1)
    g_ = gamma.data.reshape(shp)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            # xhat is recomputed from the retained input rather than stored
            xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * g_
            dx = (inv.reshape(shp) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        mean, var = running_mean.copy(), running_var.copy()
        inv = 1.0 / np.sqrt(var + eps)

        def backward(g):
            xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
            return (g * (g_ * inv.reshape(shp)), (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    out = (x.data - mean.reshape(shp)) * (inv.reshape(shp) * g_) + beta.data.reshape(shp)
    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    probes: int = 0
    skipped: int = 0       # probes whose +-step evaluations took a different relu/pool branch

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        # a check that had to discard most probes has not shown anything
        return self.max_rel_error < self.tolerance and self.skipped <= self.probes // 4

    def to_dict(self):
        return {"name": self.name, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "passed": self.passed,
                "probes": self.probes, "skipped": self.skipped, "errors": dict(self.errors)}


def relative_error(analytic, numeric, floor=0.0) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(fn: Callable[[], Tensor], tensors: dict | Iterable, step: float = 1e-6,
               tolerance: float = 1e-4, seed: int = 0, max_entries: int | None = None,
               name: str = "op", skip_kinks: bool = False) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a projected loss.

    ``fn`` recomputes the op output from ``tensors`` (a mapping or iterable of
    leaf tensors, all double precision).  The scalar loss is
    ``sum(r * fn())`` for a fixed random ``r``.  When ``max_entries`` is set,
    that many randomly chosen coordinates per tensor are probed.

    With ``skip_kinks`` a probe is discarded when either perturbed
    evaluation changes a relu sign or a pooling choice, since the central
    difference then straddles a kink.  Deep nets with batch norm amplify
    small features enough for a 1e-6 step to cross one now and then.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ConfigError(f"step must lie in [1e-6, 1e-3], got {step}")
    if not isinstance(tensors, dict):
        tensors = {f"t{i}": t for i, t in enumerate(tensors)}
    for key, t in tensors.items():
        if t.dtype != np.float64:
            raise ConfigError(f"grad_check needs float64 tensors; {key} is {t.dtype}")
        t.requires_grad = True
        t.grad = None

    # separate stream: must not coincide with test inputs drawn from default_rng(seed)
    rng = np.random.default_rng([seed, 0x5EED])
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"{name}: non-finite output")
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()
    # gradients that are truly zero (e.g. a bias feeding batch norm) only carry
    # finite-difference rounding noise; measure those against the loss scale
    floor = 1e-5 * max(1.0, float(np.abs(out.data * proj).sum()))

    def loss():
        with no_grad():
            return float((fn().data * proj).sum())

    def loss_and_branches():
        with record_branches() as log:
            val = loss()
        return val, log

    base = loss_and_branches()[1] if skip_kinks else None
    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(len(idx))
        keep = np.ones(len(idx), dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp, bp = loss_and_branches() if skip_kinks else (loss(), None)
            flat[i] = orig - step
            lm, bm = loss_and_branches() if skip_kinks else (loss(), None)
            flat[i] = orig
            numeric[j] = (lp - lm) / (2.0 * step)
            if skip_kinks and (bp != base or bm != base):
                keep[j] = False
        report.probes += len(idx)
        report.skipped += int((~keep).sum())
        a = analytic.reshape(-1)[idx][keep]
        numeric = numeric[keep]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            raise NumericError(f"{name}: non-finite gradient for {key}")
        report.errors[key] = relative_error(a, numeric, floor)
    return report
