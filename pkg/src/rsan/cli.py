"""Command-line entry point: train, eval, predict, synth, selftest.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
error. Flags mirror the training-protocol hyperparameter names; an optional
JSON config file supplies defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (Sample, load_dataset, load_image, pad_to, crop_to,
                   save_dataset, synth_vessels)
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     GradientMissingError, RsanError, ShapeError)
from .layers import DropBlockConfig
from .metrics import evaluate, metrics_csv, metrics_table
from .network import (Network, NetworkConfig, build, load_checkpoint,
                      parameter_count, save_checkpoint, save_state)
from .selftest import run_selftest
from .tensor import Tensor
from .training import TrainConfig, train, write_loss_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_TRAIN_DEFAULTS = {
    "variant": "rsan",
    "keep_prob": 0.85,
    "block_size": 7,
    "batch_size": 2,
    "epochs": 200,
    "phase1_epochs": 150,
    "lr_phase1": 1e-3,
    "lr_phase2": 1e-4,
    "stage_channels": "16,32,64,128",
    "val_count": 2,
    "sa_placement": "branch",
}


def _resolve(args, file_cfg: dict, key: str):
    value = getattr(args, key)
    if value is not None:
        return value
    if key in file_cfg:
        return file_cfg[key]
    return _TRAIN_DEFAULTS[key]


def _parse_channels(spec) -> tuple:
    if isinstance(spec, (list, tuple)):
        return tuple(int(c) for c in spec)
    try:
        return tuple(int(c) for c in str(spec).split(","))
    except ValueError as e:
        raise ConfigError(f"bad stage channels {spec!r}: {e}") from e


def cmd_train(args) -> int:
    file_cfg = {}
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
    get = lambda key: _resolve(args, file_cfg, key)

    net_config = NetworkConfig(
        variant=get("variant"),
        stage_channels=_parse_channels(get("stage_channels")),
        dropblock=DropBlockConfig(block_size=int(get("block_size")),
                                  keep_prob=float(get("keep_prob"))),
        sa_placement=get("sa_placement"),
    )
    train_config = TrainConfig(
        batch_size=int(get("batch_size")),
        total_epochs=int(get("epochs")),
        phase1_epochs=int(get("phase1_epochs")),
        lr_phase1=float(get("lr_phase1")),
        lr_phase2=float(get("lr_phase2")),
        seed=args.seed,
        validation_count=int(get("val_count")),
    )
    dataset = load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    net = build(net_config, args.seed)
    print(f"training {net_config.variant} ({parameter_count(net)} parameters) "
          f"on {len(dataset.train_ids)} images, {train_config.total_epochs} epochs")
    result = train(net, dataset.train_samples(), train_config)

    write_loss_history(result.history, out / "loss_history.csv")
    save_checkpoint(net, out / "final.ckpt")
    if result.best_state is not None:
        save_state(net.config, result.best_state, out / "best.ckpt")
        print(f"best validation epoch {result.best_epoch} "
              f"(val loss {result.best_val_loss:.6f})")
    else:
        save_checkpoint(net, out / "best.ckpt")  # no validation: best == final
    print(f"final train loss {result.history[-1].train_loss:.6f}")
    print(f"wrote {out / 'final.ckpt'}, {out / 'best.ckpt'}, {out / 'loss_history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    samples = dataset.test_samples() if args.split == "test" else dataset.train_samples()
    if not samples:
        raise ConfigError(f"dataset {dataset.name!r} has no {args.split} samples")
    result = evaluate(net, samples, threshold=args.threshold)
    table = metrics_table(result)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(result))
        (out / "metrics.txt").write_text(table)
        print(f"wrote {out / 'metrics.csv'}, {out / 'metrics.txt'}")
    return EXIT_OK


def _pad_multiple(v: int, m: int = 8) -> int:
    return int(math.ceil(v / m) * m)


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for image_path in args.images:
        try:
            image = load_image(image_path)
        except (OSError, RsanError) as e:
            print(f"error: {image_path}: {e}", file=sys.stderr)
            failures += 1
            continue
        h, w = image.shape[:2]
        padded = pad_to(image, (_pad_multiple(h), _pad_multiple(w)))
        from .tensor import no_grad
        with no_grad():
            prob = net.forward(Tensor(padded[None]), "eval").data[0]
        prob = crop_to(prob, (h, w))[..., 0]
        stem = Path(image_path).stem
        prob_img = np.rint(prob * 255).astype(np.uint8)
        mask_img = np.where(prob >= args.threshold, 255, 0).astype(np.uint8)
        Image.fromarray(prob_img, mode="L").save(out / f"{stem}_prob.png")
        Image.fromarray(mask_img, mode="L").save(out / f"{stem}_mask.png")
        print(f"{image_path} -> {out / (stem + '_prob.png')}, {out / (stem + '_mask.png')}")
    if failures == len(args.images):
        return EXIT_IO
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.test_count >= args.count:
        raise ConfigError(f"--test-count {args.test_count} must be < --count {args.count}")
    ds = synth_vessels(args.count, (args.size, args.size), args.seed,
                       noise_level=args.noise_level)
    if args.test_count:
        ds.test_ids = ds.train_ids[-args.test_count:]
        ds.train_ids = ds.train_ids[:-args.test_count]
    manifest = save_dataset(ds, args.out)
    fractions = [float(s.mask.mean()) for s in ds.samples]
    print(f"wrote {len(ds.samples)} samples ({len(ds.train_ids)} train / "
          f"{len(ds.test_ids)} test) to {manifest}")
    print(f"vessel fraction min {min(fractions):.3f} max {max(fractions):.3f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsan",
                                     description="vessel segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--variant", choices=("backbone", "backbone_dropblock", "rsan"))
    p.add_argument("--keep-prob", dest="keep_prob", type=float)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int)
    p.add_argument("--lr-phase1", dest="lr_phase1", type=float)
    p.add_argument("--lr-phase2", dest="lr_phase2", type=float)
    p.add_argument("--stage-channels", dest="stage_channels")
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--sa-placement", dest="sa_placement", choices=("branch", "post"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability and mask images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise-level", dest="noise_level", type=float, default=0.04)
    p.add_argument("--test-count", dest="test_count", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="run the built-in verification suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, GradientMissingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
