"""Command-line surface: train, infer, bench, sparsity.

Every command is deterministic given its seed and inputs (wall-clock columns
excepted).  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.  The default GEMM worker count is 1 (fair single-thread
timing); override per call with ``--workers`` or globally with the
``LCCN_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import flops, serialization, training
from .data import dataset_from_config, load_dataset
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .graph import build_resnet_cifar, build_resnet_imagenet, build_small_testnet
from .tensor import DTYPE
from .training import SgdConfig

PRESETS = {
    "toy-resnet8-aftaft": {"strategy": "aft-aft"},
    "toy-resnet8-aftbef": {"strategy": "aft-bef"},
    "toy-resnet8-befbef": {"strategy": "bef-bef"},
    "toy-resnet8-befaft": {"strategy": "bef-aft"},
    "toy-resnet8-nobn": {"strategy": "aft-aft", "use_bn_in_lccl": False},
}


def _toy_preset(overrides: dict) -> dict:
    model = {
        "family": "cifar",
        "depth": 8,
        "widen": 1,
        "accel_preset": "all",
        "strategy": "aft-aft",
        "lccl_form": "shared",
        "use_bn_in_lccl": True,
        "num_classes": 4,
        "input_size": 8,
        "seed": 0,
    }
    model.update(overrides)
    return {
        "model": model,
        "dataset": {
            "kind": "toy",
            "num_classes": 4,
            "size": 8,
            "channels": 3,
            "n_train": 256,
            "n_val": 64,
            "noise": 0.3,
            "seed": 0,
        },
        "train": {"total_epochs": 50, "batch_size": 32, "seed": 0},
    }


def resolve_config(args) -> dict:
    if args.preset is not None and args.config is not None:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {args.preset!r}; available: {', '.join(sorted(PRESETS))}"
            )
        cfg = _toy_preset(PRESETS[args.preset])
    elif args.config is not None:
        with open(args.config) as fh:
            cfg = json.load(fh)
    else:
        raise ConfigError("one of --preset or --config is required")
    if args.seed is not None:
        cfg["model"]["seed"] = args.seed
        cfg["dataset"]["seed"] = args.seed
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.epochs is not None:
        cfg.setdefault("train", {})["total_epochs"] = args.epochs
    if args.strategy is not None:
        cfg["model"]["strategy"] = args.strategy
    return cfg


def build_model(mcfg: dict):
    mcfg = dict(mcfg)
    family = mcfg.pop("family", "cifar")
    if family == "cifar":
        return build_resnet_cifar(**mcfg)
    if family == "imagenet":
        return build_resnet_imagenet(**mcfg)
    if family == "small-testnet":
        return build_small_testnet(**mcfg)
    raise ConfigError(f"unknown model family {family!r}")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    graph = build_model(cfg["model"])
    dataset = dataset_from_config(cfg.get("dataset", {}))
    train_cfg = SgdConfig(**cfg.get("train", {}))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "training_log.csv")
    logs = training.train(graph, dataset, train_cfg, log_path=log_path)
    _, per_layer = training.evaluate(graph, dataset.train_images, dataset.train_labels)
    metadata = {
        "config": cfg,
        "epochs": train_cfg.total_epochs,
        "seed": train_cfg.seed,
        "final": logs[-1],
        "per_layer_sparsity": per_layer,
    }
    model_path = os.path.join(args.out, "model")
    serialization.save(graph, model_path, metadata=metadata)
    last = logs[-1]
    print(
        f"trained {graph.name}: loss {last['loss']:.4f} "
        f"train_acc {last['train_acc']:.3f} val_acc {last['val_acc']:.3f} "
        f"mean_sparsity {last['mean_sparsity']:.3f}"
    )
    print(f"wrote {model_path}.manifest, {model_path}.weights, {log_path}")
    return 0


def cmd_infer(args) -> int:
    graph = serialization.load(args.model)
    x = serialization.load_tensor(args.input)
    logits, stats = _infer_forward(graph, x, args.workers)
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    for i, p in enumerate(probs):
        print(f"class {i}: {p:.6f}")
    if args.stats_out:
        with open(args.stats_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["layer", "form", "sparsity", "kept", "dense_macs",
                 "performed_macs", "skipped_macs", "lccl_macs"]
            )
            for rec in stats.records:
                if rec.kind == "accel":
                    writer.writerow(
                        [rec.name, rec.form, rec.sparsity, rec.kept, rec.dense_macs,
                         rec.performed_macs, rec.skipped_macs, rec.lccl_macs]
                    )
    return 0


def _infer_forward(graph, x, workers):
    from .graph import forward

    logits, stats = forward(graph, x, mode="infer", workers=workers)
    return logits.array, stats


def cmd_bench(args) -> int:
    graph = serialization.load(args.model)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    x = rng.standard_normal(graph.input_shape).astype(DTYPE)
    report = flops.compare_realistic(
        graph,
        x,
        repetitions=args.reps,
        workers=args.workers,
        force_kept=args.force_kept,
        warmup=args.warmup,
    )
    print(report.format_table())
    if args.out:
        report.write_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_sparsity(args) -> int:
    graph = serialization.load(args.model)
    dataset = load_dataset(args.data)
    _, per_layer = training.evaluate(graph, dataset.train_images, dataset.train_labels)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "form", "sparsity", "kept", "samples"])
        forms = {
            conv.name: conv.block.lccl_form for _, conv in graph.accel_layers()
        }
        for name in sorted(per_layer):
            writer.writerow(
                [name, forms[name], per_layer[name], 1.0 - per_layer[name],
                 dataset.train_images.shape[0]]
            )
    print(f"wrote {args.out}")
    if args.dump_masks:
        _dump_masks(graph, dataset, args.dump_masks, args.dump_limit)
    return 0


def _dump_masks(graph, dataset, out_dir, limit):
    """Portable graymaps of each collaborative map's zero pattern."""
    from .graph import _forward_arrays

    os.makedirs(out_dir, exist_ok=True)
    n = min(limit, dataset.train_images.shape[0])
    for i in range(n):
        caches: dict = {}
        xb = dataset.train_images[i : i + 1]
        _forward_arrays(graph, xb, mode="infer", accel_mode="gate", fast=True, tape=caches)
        for unit in graph.units:
            ucache = caches.get(unit.name)
            if ucache is None:
                continue
            for conv, ccache in zip(unit.convs, ucache["convs"]):
                if ccache.get("kind") != "accel":
                    continue
                vp = ccache["vp"][0]
                mask = (vp[:, :, 0] != 0).astype(np.uint8) * 255
                path = os.path.join(out_dir, f"{conv.name}_img{i}.pgm")
                _write_pgm(mask, path)


def _write_pgm(mask: np.ndarray, path):
    with open(path, "w") as fh:
        fh.write(f"P2\n{mask.shape[1]} {mask.shape[0]}\n255\n")
        for row in mask:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("LCCN_WORKERS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lccn",
        description="Train, run and benchmark convolutional networks with "
        "collaborative zero-skipping layers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on the toy task")
    p_train.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    p_train.add_argument("--config", help="path to a JSON config")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--strategy", help="connection strategy, e.g. aft-aft or bef-aft")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="classify one stored input tensor")
    p_infer.add_argument("--model", required=True)
    p_infer.add_argument("--input", required=True, help="tensor manifest path")
    p_infer.add_argument("--stats-out", help="per-layer sparsity/MAC CSV")
    p_infer.add_argument("--workers", type=int, default=_default_workers())
    p_infer.set_defaults(func=cmd_infer)

    p_bench = sub.add_parser("bench", help="theoretical vs measured speedup")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--workers", type=int, default=_default_workers())
    p_bench.add_argument("--warmup", type=int, default=3)
    p_bench.add_argument("--force-kept", type=float, default=None,
                         help="pin every collaborative map to this kept fraction")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", help="CSV output path")
    p_bench.set_defaults(func=cmd_bench)

    p_sp = sub.add_parser("sparsity", help="per-layer sparsity over a dataset")
    p_sp.add_argument("--model", required=True)
    p_sp.add_argument("--data", required=True, help="dataset config JSON")
    p_sp.add_argument("--out", required=True, help="CSV output path")
    p_sp.add_argument("--dump-masks", help="directory for mask graymaps")
    p_sp.add_argument("--dump-limit", type=int, default=4)
    p_sp.set_defaults(func=cmd_sparsity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ShapeError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
