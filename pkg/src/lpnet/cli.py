"""Command-line front end: data generation, training, evaluation and inference.

Configuration is resolved in three layers, later ones winning: built-in
defaults, the JSON file given by ``--config``, then individual flags.  The
resolved configuration is written to ``run_config.json`` next to the
outputs and can be passed back through ``--config`` to repeat a run.

Every subcommand writes into a hidden staging directory and moves the
finished files under ``--out`` only on success.  Failures print a single
JSON line to stderr and exit with 2 (configuration), 3 (data) or 4
(numerics).
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import datagen, gradcheck, metrics
from .detect import ThresholdSpec, adaptive_threshold, connected_components
from .errors import ConfigError, DataError, LPNetError, NumericError, ShapeError
from .model import PAPER_PARAM_COUNT, PRESETS, LPNet, NetworkConfig, load_checkpoint, param_count
from .target_spread import GaussianLowPassSpec, target_spread_map
from .train import TrainConfig, train

log = logging.getLogger("lpnet")

EXIT_CODES = {ConfigError: 2, ShapeError: 3, DataError: 3, NumericError: 4}


def exit_code(exc: BaseException) -> int:
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: ThresholdSpec = field(default_factory=ThresholdSpec)
    sigma: float | None = None          # spread-map extent; None means width / 8
    data: dict = field(default_factory=dict)
    io: dict = field(default_factory=dict)
    out: str | None = None
    seed: int = 0

    def to_dict(self):
        return {"seed": self.seed, "out": self.out,
                "network": self.network.to_dict(), "train": self.train.to_dict(),
                "threshold": asdict(self.threshold), "spread": {"sigma": self.sigma},
                "data": dict(self.data), "io": dict(self.io)}


DATA_DEFAULTS = {"root": None, "split": "test", "n_train": 200, "n_test": 50,
                 "distribution": {}}
SECTIONS = {"seed", "out", "network", "train", "threshold", "spread", "data", "io"}


def _section(d, name):
    val = d.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(val)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(d) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return d


def resolve_config(args) -> RunConfig:
    """Merge defaults, ``--config`` and flag overrides into a validated RunConfig."""
    d = load_config_file(args.config) if getattr(args, "config", None) else {}
    seed = int(d.get("seed", 0)) if args.seed is None else args.seed

    net = _section(d, "network")
    preset = net.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network preset {preset!r}; choose from {sorted(PRESETS)}")
    net = {**PRESETS[preset].to_dict(), **net}
    if args.patch is not None:
        net["patch"] = args.patch
    if args.step is not None:
        net["stride"] = args.step

    thr = {**asdict(ThresholdSpec()), **_section(d, "threshold")}
    if args.k is not None:
        thr["k"] = args.k
    if args.vmin is not None:
        thr["v_min"] = args.vmin

    sigma = _section(d, "spread").get("sigma")
    if args.sigma is not None:
        sigma = args.sigma

    tr = _section(d, "train")
    overrides = {"lr": args.lr, "batch_size": args.batch, "steps": args.steps}
    tr.update({k: v for k, v in overrides.items() if v is not None})
    tr.update(seed=seed, sigma=sigma, k=thr["k"], v_min=thr["v_min"])

    data = {**DATA_DEFAULTS, **_section(d, "data")}
    for key in ("root", "split", "n_train", "n_test"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    io = _section(d, "io")
    for key in ("checkpoint", "image", "mask", "resume", "predictions"):
        val = getattr(args, key, None)
        if val is not None:
            io[key] = val
    out = args.out if args.out is not None else d.get("out")
    try:
        return RunConfig(network=NetworkConfig.from_dict(net), train=TrainConfig.from_dict(tr),
                         threshold=ThresholdSpec(**thr), sigma=sigma, data=data,
                         io=io, out=out, seed=seed)
    except TypeError as exc:
        raise ConfigError(f"bad configuration value: {exc}") from exc


# ---------------------------------------------------------------------------
# output staging
# ---------------------------------------------------------------------------


@contextmanager
def staged_output(out):
    """Yield a scratch directory whose files are moved into ``out`` on success."""
    if out is None:
        raise ConfigError("--out is required")
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield stage
        out.mkdir(exist_ok=True)
        for item in sorted(stage.iterdir()):
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            item.replace(dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def save_u16(path, arr, scale):
    """Save ``arr / scale`` in [0, 1] as a 16-bit grayscale PNG."""
    q = np.round(np.clip(np.asarray(arr) / scale, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_image(path) -> np.ndarray:
    arr = datagen.load_png(path)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, stage: Path) -> dict:
    try:
        dist = datagen.DatasetSpec(**cfg.data.get("distribution", {}))
    except TypeError as exc:
        raise ConfigError(f"bad data.distribution entry: {exc}") from exc
    recs = datagen.write_dataset(stage, int(cfg.data["n_train"]), int(cfg.data["n_test"]),
                                 dist, seed=cfg.seed)
    return {"images": len(recs)}


def _masks_for_spread(cfg: RunConfig):
    if cfg.io.get("mask"):
        path = Path(cfg.io["mask"])
        return [(path.stem, datagen.load_png(path, "mask") > 127)]
    if cfg.data.get("root"):
        ds = datagen.read_dataset(cfg.data["root"], cfg.data.get("split"))
        return [(r["id"], m) for r, m in zip(ds.records, ds.masks)]
    raise ConfigError("spread-map needs --mask or --data")


def cmd_spread_map(cfg: RunConfig, stage: Path) -> dict:
    items = _masks_for_spread(cfg)
    for name, mask in items:
        h, w = mask.shape
        spec = GaussianLowPassSpec(cfg.sigma or w / 8.0, h, w)
        m = target_spread_map(mask, spec)
        np.save(stage / f"{name}_spread.npy", m)
        save_u16(stage / f"{name}_spread.png", m, m.max())
    return {"maps": len(items)}


def _dataset(cfg: RunConfig, split):
    root = cfg.data.get("root")
    if not root:
        raise ConfigError("--data is required")
    ds = datagen.read_dataset(root, split)
    if len(ds) == 0:
        raise DataError(f"dataset {root} has no {split!r} images")
    return ds


def cmd_train(cfg: RunConfig, stage: Path) -> dict:
    ds = _dataset(cfg, "train")
    model = LPNet(cfg.network, seed=cfg.seed, dtype=cfg.train.dtype)
    res = train(model, ds.images, ds.masks, cfg.train, out_dir=stage,
                resume=cfg.io.get("resume"))
    last = res.history[-1] if res.history else {}
    return {"steps": cfg.train.steps, "final_loss": last.get("total"),
            "checkpoint": "model.npz"}


def _load_model(cfg: RunConfig) -> LPNet:
    ckpt = cfg.io.get("checkpoint")
    if not ckpt:
        raise ConfigError("--checkpoint is required")
    model, _, _ = load_checkpoint(ckpt)
    return model


def _saved_predictions(root, ds):
    confs = []
    for rec in ds.records:
        path = Path(root) / f"{rec['id']}_confidence.npy"
        if not path.exists():
            raise DataError(f"no prediction {path.name} for entry {rec['id']}")
        conf = np.load(path)
        if conf.shape != ds.images[len(confs)].shape:
            raise DataError(f"prediction for {rec['id']} has shape {conf.shape}")
        confs.append(conf)
    return confs


def cmd_eval(cfg: RunConfig, stage: Path) -> dict:
    ds = _dataset(cfg, cfg.data.get("split"))
    if cfg.io.get("predictions"):
        confs = _saved_predictions(cfg.io["predictions"], ds)
    else:
        model = _load_model(cfg)
        confs = [model.predict(img) for img in ds.images]
    report = metrics.evaluate(confs, ds.masks, threshold_spec=cfg.threshold)
    out = report.to_dict()
    out["images"] = len(ds)
    write_json(stage / "metrics.json", out)
    (stage / "pd_fa_curve.tsv").write_text(report.curve_text())
    return {"pd_at_fa": report.pd_at_fa, "auc": report.auc, "target_f1": report.target.f1,
            "pixel_f1": report.pixel.f1}


def overlay(image, dets) -> np.ndarray:
    rgb = np.repeat(datagen.to_uint8(image)[..., None], 3, axis=-1)
    for d in dets:
        r0, c0, r1, c1 = d.bbox
        r0, c0 = max(r0 - 2, 0), max(c0 - 2, 0)
        r1, c1 = min(r1 + 2, rgb.shape[0] - 1), min(c1 + 2, rgb.shape[1] - 1)
        for r, c in ((slice(r0, r1 + 1), c0), (slice(r0, r1 + 1), c1),
                     (r0, slice(c0, c1 + 1)), (r1, slice(c0, c1 + 1))):
            rgb[r, c] = (255, 0, 0)
    return rgb


def cmd_infer(cfg: RunConfig, stage: Path) -> dict:
    model = _load_model(cfg)
    path = cfg.io.get("image")
    if not path:
        raise ConfigError("--image is required")
    image = load_image(path)
    model.grid_for(*image.shape)
    conf = model.predict(image)
    t, mask = adaptive_threshold(conf, cfg.threshold)
    dets = connected_components(mask)
    stem = Path(path).stem
    np.save(stage / f"{stem}_confidence.npy", conf)
    save_u16(stage / f"{stem}_confidence.png", conf, 1.0)
    write_json(stage / f"{stem}_detections.json",
               {"image": str(path), "threshold": t, "detections": [d.to_dict() for d in dets]})
    Image.fromarray(overlay(image, dets)).save(stage / f"{stem}_overlay.png")
    return {"detections": len(dets), "threshold": t}


def cmd_grad_check(cfg: RunConfig, stage: Path) -> dict:
    summary = gradcheck.run_suite(seeds=(cfg.seed, cfg.seed + 1, cfg.seed + 2))
    write_json(stage / "grad_check.json", summary)
    failed = [f"{c['name']}@{c['seed']}" for c in summary["checks"] if not c["passed"]]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return {"checks": len(summary["checks"]), "passed": True,
            "seconds": round(summary["seconds"], 1)}


def cmd_param_count(cfg: RunConfig, stage: Path) -> dict:
    n = param_count(cfg.network)
    rel = (n - PAPER_PARAM_COUNT) / PAPER_PARAM_COUNT
    info = {"param_count": n, "reference": PAPER_PARAM_COUNT, "relative_difference": rel,
            "within_20_percent": abs(rel) <= 0.2}
    write_json(stage / "param_count.json", info)
    return info


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset"),
    "spread-map": (cmd_spread_map, "write target spread maps for masks"),
    "train": (cmd_train, "train a network on a dataset's train split"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset split"),
    "infer": (cmd_infer, "confidence map, detections and overlay for one image"),
    "grad-check": (cmd_grad_check, "finite-difference gradient suite"),
    "param-count": (cmd_param_count, "trainable parameter count of a configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--sigma", type=float, help="spread-map extent (frequency units)")
    common.add_argument("--patch", type=int, help="patch size P")
    common.add_argument("--step", type=int, help="patch stride S")
    common.add_argument("--k", type=float, help="adaptive threshold: std multiplier")
    common.add_argument("--vmin", type=float, help="adaptive threshold: floor")
    common.add_argument("--lr", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lpnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("gen-data", "spread-map", "train", "eval"):
            p.add_argument("--data", dest="root", help="dataset directory")
        if name == "gen-data":
            p.add_argument("--n-train", type=int)
            p.add_argument("--n-test", type=int)
        if name in ("spread-map", "eval"):
            p.add_argument("--split")
        if name == "spread-map":
            p.add_argument("--mask", help="single mask PNG")
        if name in ("eval", "infer"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--predictions", help="directory of <id>_confidence.npy maps "
                                                 "to score instead of running a checkpoint")
        if name == "infer":
            p.add_argument("--image")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data" and cfg.out is None:
            cfg.out = cfg.data.get("root")
        func = COMMANDS[args.command][0]
        with staged_output(cfg.out) as stage:
            result = func(cfg, stage)
            write_json(stage / "run_config.json", cfg.to_dict())
    except (LPNetError, OSError) as exc:
        err = {"error": type(exc).__name__, "exit_code": exit_code(exc) if
               isinstance(exc, LPNetError) else 3, "command": args.command, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return err["exit_code"]
    print(json.dumps({"command": args.command, "out": str(cfg.out), **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
