"""LPNet: global feature extractor, supervised attention, patch net, fusion."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from .errors import ConfigError, DataError, ShapeError
from .layers import Conv2d, KConv, BatchNorm2d, Module, ResidualBlock, TransposedConv2d
from .patching import PatchGrid, extract_patches, fuse_patches
from .tensor_ops import Tensor, as_tensor

CHECKPOINT_VERSION = 1
PAPER_PARAM_COUNT = 925108


@dataclass(frozen=True)
class NetworkConfig:
    global_widths: tuple = (64, 128, 64, 8)
    attention_widths: tuple = (32, 64, 128, 64, 32, 1)
    kernel_sizes: tuple = (1, 3, 5)
    branch_width: int = 8
    subnet_widths: tuple = (32, 32, 1)
    # None keeps the concatenated inception width through the deconvolution
    deconv_channels: int | None = None
    patch: int = 30
    stride: int = 10
    image_size: int = 120

    def __post_init__(self):
        for name in ("global_widths", "attention_widths", "kernel_sizes", "subnet_widths"):
            val = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, val)
            if not val or min(val) < 1:
                raise ConfigError(f"{name} must be a non-empty list of positive ints")
        if self.attention_widths[-1] != 1:
            raise ConfigError("the last attention block must have width 1")
        if self.subnet_widths[-1] != 1:
            raise ConfigError("the last sub-net block must have width 1")
        if self.branch_width < 1:
            raise ConfigError("branch_width must be positive")
        if self.deconv_channels is not None and self.deconv_channels < 1:
            raise ConfigError("deconv_channels must be positive")
        if self.patch % 2:
            raise ConfigError(f"patch size must be even, got {self.patch}")
        # validates divisibility
        PatchGrid(self.image_size, self.image_size, self.patch, self.stride)

    @property
    def feature_channels(self) -> int:
        return self.global_widths[-1]

    @property
    def inception_channels(self) -> int:
        return self.branch_width * len(self.kernel_sizes)

    @property
    def upsampled_channels(self) -> int:
        return self.deconv_channels or self.inception_channels

    def replace(self, **changes) -> "NetworkConfig":
        d = asdict(self)
        d.update(changes)
        return NetworkConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# about 15x cheaper than the default; sized so training fits a single CPU core
DESK_CONFIG = NetworkConfig(global_widths=(16, 32, 16, 8), attention_widths=(8, 16, 32, 16, 8, 1),
                            branch_width=4, subnet_widths=(8, 8, 1))
PRESETS = {"default": NetworkConfig(), "desk": DESK_CONFIG}


def _conv_count(cin, cout, k, bias=True):
    return cin * cout * k * k + (cout if bias else 0)


def _block_count(cin, cout):
    n = _conv_count(cin, cout, 3) + _conv_count(cout, cout, 3) + 4 * cout
    if cin != cout:
        n += _conv_count(cin, cout, 1)
    return n


def param_count(config: NetworkConfig) -> int:
    """Scalar trainable parameters implied by ``config`` (independent of image size)."""
    total = 0
    cin = 1
    for w in config.global_widths:
        total += _block_count(cin, w)
        cin = w
    for w in config.attention_widths:
        total += _block_count(cin, w)
        cin = w
    total += _conv_count(1, 1, 1)
    f = config.feature_channels
    for k in config.kernel_sizes:
        total += _conv_count(f, config.branch_width, k) + 2 * config.branch_width
    d = config.upsampled_channels
    total += config.inception_channels * d + d + 2 * d
    cin = d
    for w in config.subnet_widths:
        total += _block_count(cin, w)
        cin = w
    total += _conv_count(1, 1, 1)
    return total


@dataclass
class ForwardOutput:
    atn_d: Tensor               # N x 1 x H x W, each sample sums to 1
    patch_likelihoods: Tensor   # (N * L) x 1 x P x P
    confidence: Tensor          # N x 1 x H x W
    grid: PatchGrid


class LPNet(Module):
    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype=np.float64):
        self.config = config = config or NetworkConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        blocks, cin = [], 1
        for w in config.global_widths:
            blocks.append(ResidualBlock(cin, w, rng, dtype))
            cin = w
        self.extractor = blocks

        blocks = []
        for w in config.attention_widths:
            blocks.append(ResidualBlock(cin, w, rng, dtype))
            cin = w
        self.attention = blocks
        self.attention_head = Conv2d(1, 1, 1, rng, dtype)

        f = config.feature_channels
        self.inception = [KConv(f, config.branch_width, k, rng, dtype) for k in config.kernel_sizes]
        d = config.upsampled_channels
        self.deconv = TransposedConv2d(config.inception_channels, d, rng, dtype)
        self.deconv_bn = BatchNorm2d(d, dtype)
        blocks, cin = [], d
        for w in config.subnet_widths:
            blocks.append(ResidualBlock(cin, w, rng, dtype))
            cin = w
        self.subnet = blocks
        self.head = Conv2d(1, 1, 1, rng, dtype)

    # -- stages --------------------------------------------------------------

    def _input(self, image):
        x = as_tensor(image)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        if x.ndim == 2:
            x = Tensor(x.data[None, None])
        elif x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected a single-channel image, got shape {x.shape}")
        return x

    def global_features(self, image) -> Tensor:
        x = self._input(image)
        for block in self.extractor:
            x = block(x)
        return x

    def attention_density(self, features: Tensor) -> Tensor:
        if features.shape[1] != self.config.feature_channels:
            raise ShapeError(
                f"attention expects {self.config.feature_channels} channels, got {features.shape[1]}")
        x = features
        for block in self.attention:
            x = block(x)
        return T.elementwise_softmax(self.attention_head(x))

    def patch_likelihood(self, patches: Tensor) -> Tensor:
        """``M x F x P x P`` gated feature patches to ``M x 1 x P x P`` likelihoods."""
        if patches.shape[-1] % 2 or patches.shape[-2] % 2:
            raise ConfigError(f"patch size must be even, got {patches.shape[-2:]}")
        x = T.concat([branch(patches) for branch in self.inception], axis=1)
        x = T.relu(self.deconv_bn(self.deconv(x)))
        for block in self.subnet:
            x = block(x)
        x = T.max_pool2d(x)
        return T.sigmoid(self.head(x))

    def grid_for(self, height, width) -> PatchGrid:
        return PatchGrid(height, width, self.config.patch, self.config.stride)

    def forward(self, image) -> ForwardOutput:
        x = self._input(image)
        grid = self.grid_for(x.shape[2], x.shape[3])
        feats = self.global_features(x)
        atn_d = self.attention_density(feats)
        gated = apply_attention(feats, atn_d)
        likelihoods = self.patch_likelihood(extract_patches(gated, grid))
        confidence = fuse_patches(likelihoods, grid)
        return ForwardOutput(atn_d, likelihoods, confidence, grid)

    def predict(self, image) -> np.ndarray:
        """Eval-mode confidence map(s), without building a graph."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(image)
        finally:
            self.train(was)
        conf = out.confidence.data[:, 0]
        ndim = image.ndim if isinstance(image, Tensor) else np.ndim(image)
        return conf[0] if ndim == 2 else conf

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict:
        state = {f"param/{k}": v.data.copy() for k, v in self.named_parameters()}
        state.update({f"buffer/{k}": v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise DataError(f"state is missing {len(missing)} arrays, e.g. {sorted(missing)[0]}")
        for k, p in params.items():
            arr = state[f"param/{k}"]
            if arr.shape != p.shape:
                raise DataError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]


def apply_attention(features: Tensor, atn_d: Tensor) -> Tensor:
    """Channel-broadcast product of feature maps with the attention density."""
    if features.ndim != atn_d.ndim or features.shape[-2:] != atn_d.shape[-2:]:
        raise ShapeError(f"cannot gate features {features.shape} with density {atn_d.shape}")
    if atn_d.shape[-3] != 1:
        raise ShapeError(f"attention density must be single-channel, got {atn_d.shape}")
    return T.mul(features, atn_d)


def save_checkpoint(path, model: LPNet, extra: dict | None = None, arrays: dict | None = None):
    """Write config, parameters, BN statistics and optional extras to ``.npz``."""
    meta = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
            "dtype": model.dtype.name, "extra": extra or {}}
    payload = dict(model.state_dict())
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = v
    payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path, config: NetworkConfig | None = None):
    """Return ``(model, meta, extra_arrays)``; raise on version or config mismatch."""
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in data:
        raise DataError(f"{path} is not an LPNet checkpoint (no metadata)")
    meta = json.loads(data.pop("meta").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('format_version')}")
    stored = NetworkConfig.from_dict(meta["config"])
    if config is not None and config != stored:
        raise ConfigError(f"checkpoint config {stored} does not match requested {config}")
    model = LPNet(stored, dtype=meta.get("dtype", "float64"))
    model.load_state_dict(data)
    extras = {k[len("extra/"):]: v for k, v in data.items() if k.startswith("extra/")}
    return model, meta, extras
