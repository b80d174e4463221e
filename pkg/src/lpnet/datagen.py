"""Synthetic infrared scenes: Gaussian point targets over procedural clutter.

Datasets are written as 8-bit PNG images and 0/255 masks plus a JSON-lines
manifest, and read back bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

BACKGROUND_KINDS = ("flat", "gradient", "cloudy")
MAX_FOOTPRINT = 81


@dataclass(frozen=True)
class SceneSpec:
    height: int = 120
    width: int = 120
    background: str = "cloudy"
    noise: float = 0.02
    seed: int = 0
    level: float = 0.0          # value of a flat background

    def __post_init__(self):
        if self.background not in BACKGROUND_KINDS:
            raise ConfigError(f"unknown background kind {self.background!r}")
        if self.height < 1 or self.width < 1:
            raise ConfigError("scene dimensions must be positive")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")


@dataclass(frozen=True)
class TargetSpec:
    center: tuple
    amplitude: float = 1.0
    sigma_x: float = 1.0        # along rows
    sigma_y: float = 1.0        # along columns

    def __post_init__(self):
        if not 0 < self.amplitude <= 1:
            raise ConfigError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ConfigError("target sigmas must be positive")


def synth_background(spec: SceneSpec) -> np.ndarray:
    """Background in [0, 1]; deterministic per ``spec.seed``."""
    h, w = spec.height, spec.width
    if spec.background == "flat":
        return np.full((h, w), float(spec.level))
    rng = np.random.default_rng(spec.seed)
    if spec.background == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        rr, cc = np.mgrid[0:h, 0:w]
        ramp = np.cos(theta) * rr + np.sin(theta) * cc
    else:
        # 4 octaves of smoothed white noise, coarse to fine, halving amplitude
        ramp = np.zeros((h, w))
        base = max(h, w) / 6.0
        for octave in range(4):
            layer = ndimage.gaussian_filter(rng.standard_normal((h, w)), base / 2 ** octave,
                                            mode="wrap")
            ramp += layer / (layer.std() + 1e-12) * 0.5 ** octave
    lo, hi = ramp.min(), ramp.max()
    return (ramp - lo) / (hi - lo) if hi > lo else np.zeros((h, w))


def synth_target(tspec: TargetSpec, shape=(120, 120)):
    """Gaussian intensity on an ``shape`` canvas and its half-amplitude mask."""
    ci, cj = tspec.center
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    intensity = tspec.amplitude * np.exp(
        -((rr - ci) ** 2 / (2 * tspec.sigma_x ** 2) + (cc - cj) ** 2 / (2 * tspec.sigma_y ** 2)))
    mask = intensity >= 0.5 * tspec.amplitude
    area = int(mask.sum())
    if not 1 <= area <= MAX_FOOTPRINT:
        raise ConfigError(f"target footprint {area} px is outside the small-target range "
                          f"[1, {MAX_FOOTPRINT}]")
    return intensity, mask


def compose(background, targets, noise: float = 0.0, seed: int = 0):
    """``clip(background + targets + noise, 0, 1)`` and the union of target masks.

    Target masks must be disjoint and not 8-adjacent, so each stays a
    separate connected component of the ground truth.
    """
    bg = np.asarray(background, dtype=np.float64)
    image = bg.copy()
    gt = np.zeros(bg.shape, dtype=bool)
    halo = np.zeros(bg.shape, dtype=bool)
    for t in targets:
        intensity, mask = synth_target(t, bg.shape)
        if np.any(mask & halo):
            raise ConfigError(f"target at {t.center} overlaps or touches another target")
        image += intensity
        gt |= mask
        halo |= ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool))
    if noise > 0:
        image += noise * np.random.default_rng(seed).standard_normal(bg.shape)
    return np.clip(image, 0.0, 1.0), gt


@dataclass(frozen=True)
class DatasetSpec:
    """Distribution the dataset writer samples scenes and targets from."""

    height: int = 120
    width: int = 120
    backgrounds: tuple = ("cloudy", "cloudy", "gradient", "flat")
    background_range: tuple = (0.05, 0.55)   # clutter is mapped into this intensity band
    noise_range: tuple = (0.01, 0.03)
    targets_per_image: tuple = (1, 3)
    amplitude_range: tuple = (0.3, 0.6)
    sigma_range: tuple = (0.7, 1.5)
    margin: int = 4
    min_separation: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.targets_per_image[0] < 1:
            raise ConfigError("every image needs at least one target")

    def to_dict(self):
        return asdict(self)


def sample_scene(dist: DatasetSpec, seed: int):
    """One (image, mask) pair drawn from ``dist``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    kind = dist.backgrounds[rng.integers(len(dist.backgrounds))]
    lo, hi = dist.background_range
    scene = SceneSpec(dist.height, dist.width, kind, 0.0, int(rng.integers(2 ** 31)),
                      level=0.5)
    bg = lo + (hi - lo) * synth_background(scene)
    if kind == "flat":
        bg = np.full_like(bg, rng.uniform(lo, hi))
    n = int(rng.integers(dist.targets_per_image[0], dist.targets_per_image[1] + 1))
    targets = []
    for _ in range(200):
        if len(targets) == n:
            break
        c = (rng.uniform(dist.margin, dist.height - 1 - dist.margin),
             rng.uniform(dist.margin, dist.width - 1 - dist.margin))
        if any(np.hypot(c[0] - t.center[0], c[1] - t.center[1]) < dist.min_separation
               for t in targets):
            continue
        targets.append(TargetSpec(c, float(rng.uniform(*dist.amplitude_range)),
                                  float(rng.uniform(*dist.sigma_range)),
                                  float(rng.uniform(*dist.sigma_range))))
    noise = float(rng.uniform(*dist.noise_range))
    return compose(bg, targets, noise, int(rng.integers(2 ** 31)))


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


@dataclass
class Dataset:
    root: Path
    records: list = field(default_factory=list)
    images: list = field(default_factory=list)   # float arrays in [0, 1]
    masks: list = field(default_factory=list)    # bool arrays

    def split(self, name) -> "Dataset":
        keep = [i for i, r in enumerate(self.records) if r["split"] == name]
        return Dataset(self.root, [self.records[i] for i in keep],
                       [self.images[i] for i in keep], [self.masks[i] for i in keep])

    def __len__(self):
        return len(self.records)


def write_dataset(root, n_train: int, n_test: int, dist: DatasetSpec = DatasetSpec(),
                  seed: int = 0) -> list:
    """Generate and write a dataset; returns the manifest records."""
    if n_train < 0 or n_test < 0:
        raise ConfigError("split sizes must be non-negative")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test)
    records = []
    for idx in range(n_train + n_test):
        split = "train" if idx < n_train else "test"
        sid = f"{split}_{idx:05d}"
        img_seed = int(seeds[idx])
        image, mask = sample_scene(dist, img_seed)
        if not mask.any():
            raise DataError(f"sample {sid} has an empty mask")
        Image.fromarray(to_uint8(image)).save(root / "images" / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(root / "masks" / f"{sid}.png")
        records.append({"id": sid, "image": f"images/{sid}.png", "mask": f"masks/{sid}.png",
                        "split": split, "seed": img_seed})
    with open(root / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    with open(root / "dataset.json", "w") as fh:
        json.dump({"seed": seed, "n_train": n_train, "n_test": n_test,
                   "distribution": dist.to_dict()}, fh, indent=2)
    return records


def load_png(path, what="image") -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{what} {path} is not single-channel grayscale")
    return arr


def read_dataset(root, split: str | None = None) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest.jsonl in {root}")
    ds = Dataset(root)
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["image"], rec["mask"], rec["split"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"manifest line {lineno} is malformed: {exc}") from exc
            if split is not None and rec["split"] != split:
                continue
            img = load_png(root / rec["image"], f"image of {rec.get('id')}")
            mask = load_png(root / rec["mask"], f"mask of {rec.get('id')}")
            if img.shape != mask.shape:
                raise DataError(f"entry {rec.get('id')}: image and mask sizes differ")
            ds.records.append(rec)
            ds.images.append(img.astype(np.float64) / 255.0)
            ds.masks.append(mask > 127)
    return ds
