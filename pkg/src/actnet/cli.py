"""Command-line entry points.

Exit codes: 0 on success, 1 for usage problems (bad flags, malformed
spec strings, missing required combinations), 2 for runtime failures
(missing files, malformed datasets, diverging runs).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .config import TrainConfig, load_config
from .data import generate_synthetic, load_dataset
from .metrics import class_names_for, evaluate_model, write_report
from .models import InvalidSpecError, ModelSpec, flops_breakdown
from .training import (
    load_checkpoint,
    model_from_checkpoint,
    pretrain_mean_teacher,
    train_act,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common_train_flags(p: _Parser) -> None:
    p.add_argument("--data", required=True, help="dataset root with manifest.tsv")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="per-iteration metrics CSV path")
    p.add_argument("--config", help="config file; explicit flags override it")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--iters", type=int, help="total training iterations")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--labeled-batch", type=int, help="labeled slices per batch")
    p.add_argument("--unlabeled-batch", type=int, help="unlabeled slices per batch")
    p.add_argument("--eval-every", type=int, help="validation cadence in iterations")
    p.add_argument("--checkpoint-every", type=int, help="mid-run checkpoint cadence")
    p.add_argument("--classes", type=int, help="number of classes incl. background")
    p.add_argument("--in-channels", type=int, help="image channels")


_COMMON_OVERRIDES = (
    ("seed", "seed"),
    ("iters", "t_max"),
    ("lr", "base_lr"),
    ("labeled_batch", "labeled_batch"),
    ("unlabeled_batch", "unlabeled_batch"),
    ("eval_every", "eval_every"),
    ("checkpoint_every", "checkpoint_every"),
    ("classes", "num_classes"),
    ("in_channels", "in_channels"),
)


def _merge_config(args, default_mode: str, extra=()) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig(mode=default_mode)
    overrides = {}
    for attr, key in (*_COMMON_OVERRIDES, *extra):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return replace(base, **overrides)


def _progress_printer(t_max: int):
    every = max(1, t_max // 20)

    def report(stats):
        done = stats.iteration + 1
        if stats.val_mean_dsc is None and done % every:
            return
        line = f"  iter {done}/{t_max}  lr {stats.lr:.5f}  loss {stats.loss_total:.4f}"
        if stats.val_mean_dsc is not None:
            line += f"  val DSC {stats.val_mean_dsc:.4f}"
        print(line)

    return report


def _cmd_synth_data(args) -> int:
    summary = generate_synthetic(
        args.out,
        count=args.count,
        side=args.side,
        seed=args.seed,
        labeled_fraction=args.labeled_fraction,
    )
    print(f"wrote {summary.count} slices ({summary.side}x{summary.side}) under {summary.root}")
    print(
        f"  train: {summary.train_labeled} labeled + {summary.train_unlabeled} unlabeled, "
        f"val: {summary.val}, test: {summary.test}"
    )
    return 0


def _cmd_pretrain(args) -> int:
    extra = (("layers", "student_layers"), ("width", "student_width"), ("mode", "mode"))
    config = _merge_config(args, "MT", extra)
    data = load_dataset(args.data, expected_classes=config.num_classes)
    spec = config.student_spec()
    print(f"pretraining {spec.label()} in {config.mode} mode on {data.summary()}")
    result, _ = pretrain_mean_teacher(
        spec,
        data,
        config,
        out_path=args.out,
        metrics_path=args.metrics,
        progress=_progress_printer(config.t_max),
    )
    if result.best:
        print(f"best val DSC {result.best['mean_dsc']:.4f} at iteration {result.best['iteration']}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_train_act(args) -> int:
    extra = (
        ("layers", "student_layers"),
        ("width", "student_width"),
        ("teacher_layers", "teacher_layers"),
        ("teacher_width", "teacher_width"),
        ("lambda_kd", "lambda_kd"),
        ("lambda_co", "lambda_co"),
        ("temperature", "temperature"),
        ("mode", "mode"),
    )
    config = _merge_config(args, "ACT", extra)
    if args.student_init and args.from_scratch:
        raise _UsageError("--student-init and --from-scratch are mutually exclusive")
    if not args.student_init and not args.from_scratch:
        raise _UsageError("pass --student-init CHECKPOINT, or --from-scratch to skip it")
    if config.lambda_kd > 0 and not args.teacher:
        raise _UsageError("distillation is active (lambda_kd > 0) but no --teacher was given")
    data = load_dataset(args.data, expected_classes=config.num_classes)
    print(
        f"training student {config.student_spec().label()} in {config.mode} mode "
        f"on {data.summary()}"
    )
    result, _ = train_act(
        data,
        config,
        args.teacher,
        student_init=args.student_init,
        out_path=args.out,
        metrics_path=args.metrics,
        progress=_progress_printer(config.t_max),
    )
    if result.best:
        print(f"best val DSC {result.best['mean_dsc']:.4f} at iteration {result.best['iteration']}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, expected_classes=ckpt.config.num_classes)
    pools = {"train": data.train_labeled, "val": data.val, "test": data.test}
    samples = pools[args.split]
    model = model_from_checkpoint(ckpt, use_best=not args.final_params)
    report = evaluate_model(
        model,
        samples,
        class_names_for(ckpt.config.num_classes),
        split=args.split,
    )
    which = "final" if args.final_params else "best-validation"
    print(
        f"{ckpt.config.student_spec().label()} ({which} parameters) "
        f"on {args.split}, {report.sample_count} slices"
    )
    print(report.table())
    if args.report:
        write_report(report, args.report)
        print(f"report written to {args.report}")
    return 0


def _parse_spec_arg(text: str, in_channels: int, classes: int, side: int) -> ModelSpec:
    try:
        layers_str, width_str = text.split(",")
        return ModelSpec(
            num_encoder_layers=int(layers_str),
            initial_channels=int(width_str),
            in_channels=in_channels,
            num_classes=classes,
            input_side=side,
        )
    except (ValueError, InvalidSpecError) as exc:
        raise _UsageError(f"bad --spec {text!r}: {exc}") from exc


def _cmd_complexity(args) -> int:
    spec_args = args.spec or ["4,16", "5,32", "6,64"]
    reports = [
        flops_breakdown(_parse_spec_arg(s, args.in_channels, args.classes, args.input_side))
        for s in spec_args
    ]

    print(f"{'model':>14} {'params':>12} {'params(M)':>10} {'size(MB)':>9} {'GFLOPs':>8}")
    for rep in reports:
        print(
            f"{rep.spec.label():>14} {rep.param_count:>12,} "
            f"{rep.param_count / 1e6:>10.2f} {rep.param_bytes / 2**20:>9.2f} "
            f"{rep.flops_total / 1e9:>8.2f}"
        )
    print(f"(forward pass at {args.input_side}x{args.input_side}, 1 MAC = 2 FLOPs)")
    if len(reports) > 1:
        biggest = max(reports, key=lambda r: r.param_count)
        smallest = min(reports, key=lambda r: r.param_count)
        ratio = biggest.param_count / smallest.param_count
        print(
            f"parameter ratio {biggest.spec.label()} / {smallest.spec.label()}: {ratio:.1f}x"
        )
    if args.detail:
        for rep in reports:
            print(f"\nper-layer FLOPs for {rep.spec.label()}:")
            for layer in rep.layers:
                c, h, w = layer.out_shape
                print(f"  {layer.name:>12} {layer.kind:>5} [{c}x{h}x{w}] {layer.flops:>14,}")
            for kind, total in sorted(rep.flops_by_kind.items()):
                print(f"  {kind} total: {total:,}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["label", "layers", "width", "params", "param_bytes", "flops", "input_side"]
            )
            for rep in reports:
                writer.writerow(
                    [
                        rep.spec.label(),
                        rep.spec.num_encoder_layers,
                        rep.spec.initial_channels,
                        rep.param_count,
                        rep.param_bytes,
                        rep.flops_total,
                        args.input_side,
                    ]
                )
        print(f"csv written to {args.csv}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="actnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic slice dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.set_defaults(handler=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="phase 1: mean-teacher pretraining of one network")
    _add_common_train_flags(p)
    p.add_argument("--layers", type=int, help="encoder depth of the trained network")
    p.add_argument("--width", type=int, help="first-stage channels of the trained network")
    p.add_argument("--mode", choices=["MT", "FS"], help="consistency on (MT) or plain supervised (FS)")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("train-act", help="phase 2: co-teach the student from teacher + EMA")
    _add_common_train_flags(p)
    p.add_argument("--teacher", help="phase-1 checkpoint of the big teacher")
    p.add_argument("--student-init", help="phase-1 checkpoint of the student")
    p.add_argument("--from-scratch", action="store_true", help="train the student from scratch")
    p.add_argument("--layers", type=int, help="student encoder depth")
    p.add_argument("--width", type=int, help="student first-stage channels")
    p.add_argument("--teacher-layers", type=int)
    p.add_argument("--teacher-width", type=int)
    p.add_argument("--lambda-kd", type=float, help="distillation weight")
    p.add_argument("--lambda-co", type=float, help="self-consistency weight")
    p.add_argument("--temperature", type=float, help="distillation softening temperature")
    p.add_argument("--mode", choices=["ACT", "KD"])
    p.set_defaults(handler=_cmd_train_act)

    p = sub.add_parser("eval", help="score a checkpoint on one dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", help="write the report as JSON here")
    p.add_argument(
        "--final-params",
        action="store_true",
        help="score the final parameters instead of the best-validation ones",
    )
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("complexity", help="parameter and FLOP table for family members")
    p.add_argument("--spec", action="append", help="L,N1 (repeatable); default: 4,16 5,32 6,64")
    p.add_argument("--input-side", type=int, default=256)
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--csv", help="also write the table to this CSV path")
    p.add_argument("--detail", action="store_true", help="print per-layer FLOPs")
    p.set_defaults(handler=_cmd_complexity)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
