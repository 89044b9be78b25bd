"""Command-line surface: train, infer, eval and gabor-dump.

Configuration is a flat ``key = value`` UTF-8 file with ``#`` comments.
Precedence, lowest to highest: built-in defaults, config file, the
``OCE_SEED`` environment variable (seed only), command-line flags.  Every
run writes the fully resolved configuration next to its outputs as
``resolved_config.txt``; for train and infer the snapshot parses as a config
file again, which is what makes runs reproducible, and ``infer`` picks up
the snapshot sitting next to its checkpoint automatically.

Exit codes: 0 success, 1 configuration or usage problems, 2 file and I/O
problems, 3 numeric failures during computation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigError, ContractError, DimensionError, IoError,
                     NumericError)
from .gabor import GaborParams, gen_gabor, orientation_angles
from .metrics import (MetricReport, cal_metrics, disk, evaluate_pair,
                      separate_thin, write_report)
from .network import NetworkConfig, OCENet
from .pipeline import (TrainConfig, infer_full_image, load_dataset, load_image,
                       preprocess, sample_patches, save_png, stitch_windows,
                       to_grayscale, train)
from .uarm import HIGH_THRESHOLD, LOW_THRESHOLD

_NETWORK_FIELDS = {f.name: f.type for f in fields(NetworkConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
CONFIG_KEYS = {**_TRAIN_FIELDS, **_NETWORK_FIELDS}


# -- configuration plumbing -----------------------------------------------------

def _coerce(key: str, value) -> object:
    kind = CONFIG_KEYS[key]
    if not isinstance(value, str):
        return value
    text = value.strip()
    if kind == "bool":
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {text!r}")
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {text!r}") from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {text!r}") from None
    return text


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; unknown keys are configuration errors."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve_config(config_path, flag_values: dict) -> dict:
    """Merge defaults, file, OCE_SEED and flags into one typed mapping."""
    resolved = {f.name: f.default for f in fields(TrainConfig)}
    resolved.update({f.name: f.default for f in fields(NetworkConfig)})
    if config_path is not None:
        resolved.update(parse_config_file(config_path))
    env_seed = os.environ.get("OCE_SEED")
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"OCE_SEED must be an integer, got {env_seed!r}") from None
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = _coerce(key, value)
    return resolved


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_snapshot(path, resolved: dict, notes: list | None = None) -> None:
    lines = ["# written by oce-net; edit or pass back via --config"]
    for note in notes or []:
        lines.append(f"# {note}")
    for key in sorted(resolved):
        lines.append(f"{key} = {_format_value(resolved[key])}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _network_config(resolved: dict, ablations) -> NetworkConfig:
    config = NetworkConfig(**{k: resolved[k] for k in _NETWORK_FIELDS}).validate()
    for pair in ablations or []:
        if "=" not in pair:
            raise ConfigError(f"--ablate expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        config = config.with_ablation(key.strip(), value.strip())
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


# -- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    flag_values = {"epochs": args.epochs, "batch_size": args.batch,
                   "num_patches": args.patches, "patch_size": args.patch_size,
                   "lr": args.lr, "seed": args.seed}
    resolved = resolve_config(args.config, flag_values)
    net_config = _network_config(resolved, args.ablate)
    resolved.update({k: getattr(net_config, k) for k in _NETWORK_FIELDS})
    train_config = TrainConfig(**{k: resolved[k] for k in _TRAIN_FIELDS}).validate()

    out = _out_dir(args)
    write_snapshot(out / "resolved_config.txt", resolved,
                   notes=[f"train: data={args.data}"])

    pairs = load_dataset(args.data)
    images = [preprocess(image) for _, image, _ in pairs]
    labels = [label for _, _, label in pairs]
    dataset = sample_patches(images, labels, train_config.num_patches,
                             train_config.patch_size, seed=train_config.seed)

    model = OCENet(net_config, seed=train_config.seed)
    result = train(model, dataset, train_config)

    save_checkpoint(out / "checkpoint.ocen", model.state_dict())
    try:
        with open(out / "loss_curve.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for row in result.history:
                writer.writerow([row.epoch, format(row.lr, ".10g"),
                                 format(row.train_loss, ".10g"),
                                 format(row.val_loss, ".10g")])
    except OSError as exc:
        raise IoError(f"cannot write loss curve: {exc}") from exc
    print(f"trained {len(result.history)} epochs, best val loss "
          f"{result.best_val:.4f}; checkpoint at {out / 'checkpoint.ocen'}")
    return 0


# -- infer ----------------------------------------------------------------------

def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.is_file() and p.suffix.lower() == ".png")
        if not files:
            raise IoError(f"no PNG files in {path}")
        return files
    if path.is_file():
        return [path]
    raise IoError(f"input path {path} does not exist")


def _dump_gabor_kernels(out: Path, num_orientations: int, scale: int) -> list[Path]:
    written = []
    for i, theta in enumerate(orientation_angles(num_orientations)):
        kernel = gen_gabor(GaborParams(theta=theta)).astype(np.float64)
        spread = np.ptp(kernel)
        flat = (kernel - kernel.min()) / (spread if spread else 1.0)
        image = np.clip(np.round(flat * 255.0), 0, 255).astype(np.uint8)
        image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
        target = out / f"gabor_{i:02d}.png"
        save_png(target, image)
        written.append(target)
    return written


def cmd_infer(args) -> int:
    checkpoint_path = Path(args.checkpoint)
    config_path = args.config
    if config_path is None:
        sibling = checkpoint_path.parent / "resolved_config.txt"
        if sibling.is_file():
            config_path = sibling
    resolved = resolve_config(config_path, {})
    net_config = _network_config(resolved, None)

    state = load_checkpoint(checkpoint_path)
    model = OCENet(net_config, seed=resolved["seed"])
    model.load_state_dict(state)
    model.eval()
    model.set_temperature(resolved["temperature_end"])

    out = _out_dir(args)
    write_snapshot(out / "resolved_config.txt", resolved,
                   notes=[f"infer: checkpoint={checkpoint_path} "
                          f"stride={args.stride} threshold={args.threshold}"])

    if args.dump_gabor:
        if not net_config.use_dcoa:
            raise ConfigError("--dump-gabor needs a configuration with use_dcoa")
        _dump_gabor_kernels(out, net_config.num_orientations, scale=32)
    if args.dump_uarm_regions and not net_config.use_uarm:
        raise ConfigError("--dump-uarm-regions needs a configuration with use_uarm")

    def uarm_prob(windows: np.ndarray) -> np.ndarray:
        model.uarm.record_prob = True
        try:
            with no_grad():
                model(Tensor(windows))
        finally:
            model.uarm.record_prob = False
        return model.uarm.last_prob[:, 0]

    for source in _input_images(Path(args.images)):
        image = load_image(source)
        prepared = preprocess(image)
        prob, mask = infer_full_image(model, prepared, stride=args.stride,
                                      threshold=args.threshold)
        save_png(out / f"{source.stem}_prob.png",
                 np.clip(np.round(prob * 255.0), 0, 255).astype(np.uint8))
        save_png(out / f"{source.stem}_mask.png", (mask * 255).astype(np.uint8))
        if args.overlay:
            gray = to_grayscale(image)
            overlay = np.stack([gray, gray, gray], axis=2)
            overlay[mask.astype(bool)] = (0, 255, 0)
            save_png(out / f"{source.stem}_overlay.png", overlay)
        if args.dump_uarm_regions:
            confidence = stitch_windows(uarm_prob, prepared, stride=args.stride)
            regions = np.where(confidence < LOW_THRESHOLD, 0,
                               np.where(confidence < HIGH_THRESHOLD, 128,
                                        255)).astype(np.uint8)
            save_png(out / f"{source.stem}_uarm_regions.png", regions)
        print(f"{source.name}: wrote prob/mask maps to {out}")
    return 0


# -- eval -----------------------------------------------------------------------

def _png_stems(directory: Path) -> dict:
    if not directory.is_dir():
        raise IoError(f"directory {directory} does not exist")
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() == ".png"}


def _binary_png(path: Path) -> np.ndarray:
    return (to_grayscale(load_image(path)) > 127).astype(np.uint8)


def cmd_eval(args) -> int:
    pred_files = _png_stems(Path(args.pred))
    gt_files = _png_stems(Path(args.gt))
    if not gt_files:
        raise IoError(f"no PNG files in {args.gt}")
    odd = sorted(set(pred_files) ^ set(gt_files))
    if odd:
        raise IoError(f"unpaired prediction/ground-truth stems: {', '.join(odd)}")
    prob_files = None
    if args.prob is not None:
        prob_files = _png_stems(Path(args.prob))
        missing = sorted(set(gt_files) - set(prob_files))
        if missing:
            raise IoError(f"missing probability maps for stems: {', '.join(missing)}")

    out = _out_dir(args)
    rows, thin_rows, thick_rows = [], [], []
    for stem in sorted(gt_files):
        pred = _binary_png(pred_files[stem])
        gt = _binary_png(gt_files[stem])
        prob = None
        if prob_files is not None:
            prob = to_grayscale(load_image(prob_files[stem])).astype(np.float64) / 255.0
        rows.append((stem, evaluate_pair(pred, gt, prob)))
        if args.thin:
            for part, bucket in zip(separate_thin(gt), (thin_rows, thick_rows)):
                near = pred & ndimage.binary_dilation(part, structure=disk(2))
                c, a, length, overall = cal_metrics(near.astype(np.uint8),
                                                    part.astype(np.uint8))
                nan = float("nan")
                bucket.append((stem, MetricReport(
                    nan, nan, nan, nan, nan, nan, c, a, length, overall,
                    ("structural scores only",))))

    write_report(out / "report.csv", rows)
    if args.thin:
        write_report(out / "report_thin.csv", thin_rows)
        write_report(out / "report_thick.csv", thick_rows)
    write_snapshot(out / "resolved_config.txt", {},
                   notes=[f"eval: pred={args.pred} gt={args.gt} "
                          f"prob={args.prob} thin={args.thin}"])
    flagged = sum(1 for _, report in rows if report.flags)
    print(f"evaluated {len(rows)} image(s), {flagged} with flags; report at "
          f"{out / 'report.csv'}")
    return 0


# -- gabor-dump -------------------------------------------------------------------

def cmd_gabor_dump(args) -> int:
    out = _out_dir(args)
    written = _dump_gabor_kernels(out, args.orientations, args.scale)
    write_snapshot(out / "resolved_config.txt", {},
                   notes=[f"gabor-dump: orientations={args.orientations} "
                          f"scale={args.scale}"])
    print(f"wrote {len(written)} kernel images to {out}")
    return 0


# -- entry ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oce-net",
        description="Orientation and cross-correlation entangled vessel segmentation.")
    commands = parser.add_subparsers(dest="command", required=True)

    train_p = commands.add_parser("train", help="train a model on a dataset directory")
    train_p.add_argument("--data", required=True, help="dataset root with images/ and labels/")
    train_p.add_argument("--out", required=True, help="output directory")
    train_p.add_argument("--config", help="key = value configuration file")
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--batch", type=int)
    train_p.add_argument("--patches", type=int)
    train_p.add_argument("--patch-size", type=int, dest="patch_size")
    train_p.add_argument("--lr", type=float)
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--ablate", action="append", metavar="KEY=VALUE",
                         help="network ablation, repeatable")
    train_p.set_defaults(func=cmd_train)

    infer_p = commands.add_parser("infer", help="segment images with a checkpoint")
    infer_p.add_argument("--checkpoint", required=True)
    infer_p.add_argument("--images", required=True, help="PNG file or directory")
    infer_p.add_argument("--out", required=True)
    infer_p.add_argument("--config", help="config file (default: checkpoint sibling)")
    infer_p.add_argument("--stride", type=int, default=24)
    infer_p.add_argument("--threshold", type=float, default=0.5)
    infer_p.add_argument("--overlay", action="store_true",
                         help="write green vessel overlays")
    infer_p.add_argument("--dump-gabor", action="store_true",
                         help="write the orientation kernel images")
    infer_p.add_argument("--dump-uarm-regions", action="store_true",
                         help="write the confidence region maps")
    infer_p.set_defaults(func=cmd_infer)

    eval_p = commands.add_parser("eval", help="score predictions against ground truth")
    eval_p.add_argument("--pred", required=True, help="directory of prediction masks")
    eval_p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    eval_p.add_argument("--prob", help="directory of probability maps for AUC")
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--thin", action="store_true",
                        help="also score thin and thick vessels separately")
    eval_p.set_defaults(func=cmd_eval)

    gabor_p = commands.add_parser("gabor-dump", help="write oriented kernel images")
    gabor_p.add_argument("--out", required=True)
    gabor_p.add_argument("--orientations", type=int, default=8)
    gabor_p.add_argument("--scale", type=int, default=32)
    gabor_p.set_defaults(func=cmd_gabor_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())
