"""Command-line entry point: ``ssgan {split,train,eval,generate,gradcheck,synth}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data, evaluation, gradcheck, training
from .config import REPORT_FORMATS, RunConfig, load_config, serialize_config
from .errors import ConfigError, DataError, ShapeError, SSGANError
from .models import build_discriminator, build_generator
from .tensor import RandomSource, inject_fault

log = logging.getLogger("ssgan")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(SSGANError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _unit_interval(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return v


def _grid(text):
    try:
        rows, cols = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


def _shape(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 3x64x64, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("shape needs three dimensions")
    return dims


def _widths(text):
    return tuple(int(p) for p in text.split(","))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ssgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("split", parents=[common], help="write a train/test + label manifest")
    s.add_argument("--root", help="dataset directory, one subdirectory per class")
    s.add_argument("--protocol", help="eth | indian | fraction:<p>")
    s.add_argument("--unlabeled", type=_unit_interval, help="fraction of train labels withheld")
    s.add_argument("--image-shape", type=_shape, help="CxHxW, e.g. 3x64x64")
    s.add_argument("--manifest", help="output manifest path (default <out>/manifest.json)")

    t = sub.add_parser("train", parents=[common], help="run SSGAN or vanilla GAN training")
    t.add_argument("--manifest")
    t.add_argument("--algorithm", choices=training.ALGORITHMS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-interval", type=int, help="epochs between test evaluations")
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--generator-loss", choices=("feature_matching", "nonsaturating"))
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--channel-widths", type=_widths)
    t.add_argument("--time-budget", type=float, help="stop after this many seconds")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--format", action="append", choices=REPORT_FORMATS, dest="formats")

    g = sub.add_parser("generate", parents=[common], help="write a PNG grid of generator samples")
    g.add_argument("--checkpoint")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--grid", type=_grid, default=(8, 8))
    g.add_argument("--png", help="output file (default <out>/samples.png)")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--precision", choices=("double", "single"), default="double")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--ops", help="comma-separated subset of checks")
    c.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)

    y = sub.add_parser("synth", parents=[common], help="write a synthetic shapes dataset tree")
    y.add_argument("--classes", type=int, default=4)
    y.add_argument("--per-class", type=int, default=100)
    y.add_argument("--side", type=int, default=16)
    return p


def _resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed, "out": args.out,
        "root": getattr(args, "root", None),
        "protocol": getattr(args, "protocol", None),
        "unlabeled_fraction": getattr(args, "unlabeled", None),
        "manifest": getattr(args, "manifest", None),
        "algorithm": getattr(args, "algorithm", None),
        "iterations": getattr(args, "iterations", None),
        "batch_size": getattr(args, "batch_size", None),
        "eval_interval": getattr(args, "eval_interval", None),
        "checkpoint_interval": getattr(args, "checkpoint_interval", None),
        "generator_loss": getattr(args, "generator_loss", None),
        "latent_dim": getattr(args, "latent_dim", None),
        "time_budget": getattr(args, "time_budget", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "resume": getattr(args, "resume", None),
    }
    widths = getattr(args, "channel_widths", None)
    if widths is not None:
        overrides["channel_widths"] = list(widths)
    shape = getattr(args, "image_shape", None)
    if shape is not None:
        overrides["image_shape"] = list(shape)
    formats = getattr(args, "formats", None)
    if formats:
        overrides["report_formats"] = list(dict.fromkeys(formats))
    return cfg.replace(**overrides).validate()


def _manifest_path(cfg):
    return cfg.manifest or os.path.join(cfg.out, "manifest.json")


def cmd_split(cfg):
    if not cfg.root:
        raise ConfigError("split needs --root", field="root")
    ds = data.load_dataset(cfg.root, tuple(cfg.image_shape))
    ds = data.split_train_test(ds, cfg.protocol, cfg.seed)
    ds = data.strip_labels(ds, cfg.unlabeled_fraction, cfg.seed)
    path = _manifest_path(cfg)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data.save_manifest(ds, path)
    n_lab = sum(s.labeled for s in ds.train)
    print(f"wrote {path}: {ds.num_classes} classes, {len(ds.train)} train "
          f"({n_lab} labeled), {len(ds.test)} test")
    return EXIT_OK


def _load_manifest(cfg):
    path = _manifest_path(cfg)
    if not os.path.exists(path):
        raise ConfigError(f"manifest {path!r} not found; run `ssgan split` first", field="manifest")
    return data.load_from_manifest(path)


def _models(cfg, ds):
    tcfg = cfg.training()
    widths = tcfg.channel_widths or None
    root = RandomSource(cfg.seed)
    head = "sigmoid" if cfg.algorithm == "vanilla" else "softmax"
    g = build_generator(cfg.latent_dim, ds.image_shape, widths, root.fork("init.g"))
    d = build_discriminator(ds.num_classes, ds.image_shape, widths, cfg.noise_std,
                            root.fork("init.d"), head)
    return g, d


def cmd_train(cfg):
    ds = _load_manifest(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "run.toml"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    metrics = os.path.join(cfg.out, "metrics.csv")
    if cfg.resume:
        state = training.restore_state(training.load_checkpoint(cfg.resume))
        _check_classes(state.d, ds)
        g, d = state.g, state.d
        sink = training.CsvMetricsSink(metrics, append=True)
    else:
        state = None
        g, d = _models(cfg, ds)
        sink = training.CsvMetricsSink(metrics)
    try:
        ckpt, history = training.train(g, d, ds, cfg.training(), [sink], resume=state,
                                       out_dir=cfg.out)
    finally:
        sink.close()
    for row in history:
        print(f"iter {row['iter']} epoch {row['epoch']}: top1={row['top1']:.2f} "
              f"top5={row['top5']:.2f} top10={row['top10']:.2f}")
    name = "last.ssgn" if ckpt.iteration else "initial.ssgn"
    print(f"finished at iteration {ckpt.iteration}; checkpoint {os.path.join(cfg.out, name)}")
    return EXIT_OK


def _check_classes(d, ds):
    if d.num_classes != ds.num_classes:
        raise ShapeError(f"checkpoint discriminator has k={d.num_classes} classes (tensor "
                         f"'d.head.weight' width {d.head_width}) but the manifest lists "
                         f"{ds.num_classes}", field="d.head.weight")


def _checkpoint_path(cfg):
    path = cfg.checkpoint
    if not path:
        path = os.path.join(cfg.out, "last.ssgn")
        initial = os.path.join(cfg.out, "initial.ssgn")
        if not os.path.exists(path) and os.path.exists(initial):
            path = initial
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path!r} not found", field="checkpoint")
    return path


def cmd_eval(cfg):
    ds = _load_manifest(cfg)
    path = _checkpoint_path(cfg)
    state = training.restore_state(training.load_checkpoint(path))
    _check_classes(state.d, ds)
    if state.d.head != "softmax":
        raise ConfigError("only k+1 softmax discriminators can classify", field="checkpoint")
    report = evaluation.evaluate(state.d, ds.test, model_id=os.path.basename(path),
                                 class_names=ds.class_names)
    os.makedirs(cfg.out, exist_ok=True)
    ext = {"csv": "csv", "json": "json", "table": "txt"}
    title = f"Accuracy (%) over {ds.num_classes} classes ({ds.meta.get('protocol', 'custom')})"
    for fmt in cfg.report_formats:
        out = os.path.join(cfg.out, f"report.{ext[fmt]}")
        evaluation.write_report(report, out, fmt, title=title)
        print(f"wrote {out}")
    print(evaluation.report_to_table(report, title), end="")
    return EXIT_OK


def cmd_generate(cfg, args):
    rows, cols = args.grid
    if args.count < 1 or args.count > rows * cols:
        raise ConfigError(f"--count {args.count} does not fit a {rows}x{cols} grid", field="count")
    state = training.restore_state(training.load_checkpoint(_checkpoint_path(cfg)))
    png = args.png or os.path.join(cfg.out, "samples.png")
    rng = RandomSource(cfg.seed).fork("generate")
    evaluation.write_image_grid(state.g, args.count, (rows, cols), png, rng)
    print(f"wrote {png}")
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    names = args.ops.split(",") if args.ops else None
    if names:
        unknown = [n for n in names if n not in gradcheck.CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}", field="ops")
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1", field="trials")
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            results = gradcheck.run_suite(args.trials, cfg.seed, args.precision, names)
    else:
        results = gradcheck.run_suite(args.trials, cfg.seed, args.precision, names)
    print(f"precision={args.precision} trials={args.trials} threshold={gradcheck.THRESHOLD:g}")
    print(gradcheck.format_table(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_synth(cfg, args):
    ds = data.make_synthetic(args.classes, args.per_class, args.side, cfg.seed)
    data.write_dataset_tree(ds, cfg.out)
    print(f"wrote {len(ds.train)} images in {ds.num_classes} classes to {cfg.out}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "split":
            return cmd_split(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "generate":
            return cmd_generate(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        return cmd_synth(cfg, args)
    except (ConfigError, DataError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SSGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
