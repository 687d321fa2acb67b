"""Command-line surface tying the library together.

Exit codes: 0 success, 1 usage/configuration error, 2 numeric or
verification failure. Every command is deterministic given --seed.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import accounting, configfile
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_optimizer_state,
    save_checkpoint,
)
from .model import PRESETS, build_mixed_depth, build_model, preset
from .tensor import ConfigError, NumericError, Tensor, grad_check_finite_diff
from .train import (
    AdamW,
    SynthDataset,
    TrainSettings,
    landscape_slice,
    load_image_dir,
    smoothed_ce_loss,
    train_loop,
    write_landscape_csv,
    write_metrics_csv,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _load_config(args) -> tuple:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config, settings = configfile.parse_config(fh.read())
    elif getattr(args, "preset", None):
        config, settings = preset(args.preset), TrainSettings()
    else:
        raise UsageError("provide --preset or --config")
    if getattr(args, "recursions", None):
        stages = [[s[0]] * args.recursions for s in config.group_schedule.stages]
        config = replace(
            config,
            recursions_per_block=args.recursions,
            group_schedule=replace(config.group_schedule, stages=stages),
        )
    if getattr(args, "resolution", None):
        config = replace(config, input_resolution=args.resolution)
    if getattr(args, "classes", None):
        config = replace(config, num_classes=args.classes)
    config.validate()
    return config, settings


def cmd_count(args) -> int:
    config, _ = _load_config(args)
    report = accounting.count_macs(config)
    print(report.format_table())
    if args.csv:
        report.write_csv(args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_verify(args) -> int:
    result = accounting.verify_theorem1(args.L, args.D, args.N, args.G)
    status = "holds" if result.holds else "VIOLATED"
    print(
        f"core-cost ratio (N={args.N} recursions of G={args.G}-way slices vs one "
        f"global attention) = {result.ratio} ; expected N/G = {result.expected} ; {status}"
    )
    if args.L % args.G:
        print(
            f"error: groups={args.G} does not divide sequence length {args.L}; "
            "the analytic ratio above is not realizable as an integer slicing",
            file=sys.stderr,
        )
        return 1
    return 0 if result.holds else 2


_GROUPS = (
    ("attention", lambda n: ".attn." in n),
    ("ffn", lambda n: ".ffn." in n and ".nll" not in n),
    ("nll", lambda n: ".nll" in n),
    ("lrc", lambda n: ".lrc." in n),
    ("stem", lambda n: n.startswith(("stem.", "pool"))),
    ("embed", lambda n: n.startswith(("pos_embed", "patch_embed"))),
    ("head", lambda n: n.startswith(("head.", "unrolled_head."))),
    ("norms", lambda n: (".norm" in n or "final_norm" in n) and ".nll" not in n),
)


def cmd_gradcheck(args) -> int:
    config, _ = _load_config(args)
    config = replace(config, num_classes=min(config.num_classes, 10))
    model = build_model(config, np.random.default_rng(args.seed), dtype=np.float64)
    data_rng = np.random.default_rng([args.seed, 1])
    images = Tensor(
        data_rng.normal(size=(2, 3, config.input_resolution, config.input_resolution)),
        dtype=np.float64,
    )
    labels = data_rng.integers(0, config.num_classes, size=2)

    def loss_fn() -> Tensor:
        rng = np.random.default_rng(args.seed)  # same permutations every call
        logits = model.forward(images, mode="train", rng=rng)
        return smoothed_ce_loss(logits, labels, 0.0)

    rng = np.random.default_rng([args.seed, 2])
    worst_overall = 0.0
    print(f"{'module':<12} {'params':>7} {'max rel err':>12}  status")
    for group, match in _GROUPS:
        params = [t for n, t in model.registry.items() if match(n)]
        if not params:
            continue
        err = grad_check_finite_diff(
            loss_fn, params, samples_per_param=args.samples, rng=rng
        )
        worst_overall = max(worst_overall, err)
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{group:<12} {len(params):>7} {err:>12.3e}  {status}")
    print(f"{'overall':<12} {'':>7} {worst_overall:>12.3e}")
    return 0 if worst_overall < args.threshold else 2


def _make_dataset(args, config, seed: int):
    if args.data_dir:
        return load_image_dir(args.data_dir)
    return SynthDataset(
        seed=seed,
        num_classes=config.num_classes,
        resolution=config.input_resolution,
        samples=args.samples,
    )


def cmd_train(args) -> int:
    config, settings = _load_config(args)
    for attr, flag in (
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("lr", args.lr),
        ("warmup_epochs", args.warmup),
        ("label_smoothing", args.label_smoothing),
    ):
        if flag is not None:
            settings = replace(settings, **{attr: flag})
    settings = replace(settings, seed=args.seed)

    teacher = None
    if args.distill:
        teacher, _ = load_checkpoint(args.distill)
        settings = replace(settings, loss_mode="distill")
        if teacher.config.num_classes != config.num_classes:
            raise ConfigError(
                f"teacher predicts {teacher.config.num_classes} classes, "
                f"student expects {config.num_classes}"
            )

    model = build_model(config, np.random.default_rng(args.seed))
    if args.mixed_depth:
        model = build_mixed_depth(model)
    optimizer = AdamW(model.registry, lr=settings.lr, weight_decay=settings.weight_decay)
    start_epoch = 0
    if args.resume:
        model, _ = load_checkpoint(args.resume, model)
        start_epoch = load_optimizer_state(args.resume, optimizer)

    dataset = _make_dataset(args, config, args.seed)
    history, optimizer = train_loop(
        model, dataset, settings, teacher=teacher, optimizer=optimizer,
        start_epoch=start_epoch,
    )

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(model, ckpt, step=settings.epochs, optimizer=optimizer)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), history)
    if history:
        last = history[-1]
        print(
            f"epoch {last.epoch}: loss {last.loss:.4f} "
            f"train_acc {last.train_acc:.3f} eval_acc {last.eval_acc:.3f}"
        )
    print(f"wrote {ckpt}")
    return 0


def cmd_landscape(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    config = model.config
    dataset = _make_dataset(args, config, args.seed)
    surface = landscape_slice(
        model, dataset, radius=args.radius, grid=args.grid, seed=args.seed
    )
    write_landscape_csv(args.out, surface)
    center = surface[args.grid // 2, args.grid // 2]
    print(f"{args.grid}x{args.grid} slice, radius {args.radius}; "
          f"center loss {center:.6f}; wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sret", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, resolution=True):
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--config", help="path to a config file")
        p.add_argument("--recursions", type=int, help="override recursions per block")
        if resolution:
            p.add_argument("--resolution", type=int, help="override input resolution")

    p = sub.add_parser("count", help="parameter and MAC accounting table")
    add_config_flags(p)
    p.add_argument("--csv", help="also write per-layer CSV here")
    p.set_defaults(fn=cmd_count, classes=None)

    p = sub.add_parser("verify", help="check the grouped-attention cost equivalence")
    p.add_argument("--L", type=int, required=True, help="sequence length")
    p.add_argument("--D", type=int, required=True, help="embedding dim")
    p.add_argument("--N", type=int, required=True, help="recursions")
    p.add_argument("--G", type=int, required=True, help="groups")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=4, help="coordinates per parameter")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck, preset_default="sret_desk", classes=None)

    p = sub.add_parser("train", help="train on synthetic or directory data")
    add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--label-smoothing", type=float)
    p.add_argument("--classes", type=int, help="override class count")
    p.add_argument("--samples", type=int, default=256, help="synthetic dataset size")
    p.add_argument("--data-dir", help="directory of .npy images + labels.csv")
    p.add_argument("--distill", metavar="TEACHER_CKPT",
                   help="soft distillation from this teacher checkpoint")
    p.add_argument("--mixed-depth", action="store_true",
                   help="dual recursive + unrolled branches")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("landscape", help="loss surface on a 2-d weight-space slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="landscape.csv")
    p.add_argument("--classes", type=int)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_landscape)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "preset", None) is None and getattr(args, "config", None) is None:
            default = getattr(args, "preset_default", None)
            if default:
                args.preset = default
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
