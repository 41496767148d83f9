"""Command-line entry point: ``sdkd <subcommand> --config FILE [--set key=value ...]``.

Subcommands: gen-data, train-teacher, train-student, distill, eval, spectra,
bench, and pipeline (all stages in one go). Every subcommand accepts
``--config``, ``--seed`` and ``--out-dir``. Failures print a single line

    sdkd-error: <kind>: <message>

to stderr and exit non-zero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .dataset import ChecksumError, load_dataset
from .nn.models import build_model
from .train import set_deterministic


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, e.g. train.epochs=5")


def _models_arg(p, required=False):
    p.add_argument(
        "--model", action="append", default=[], required=required, metavar="NAME=PATH",
        help="checkpoint or run directory; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdkd", description="Spectral decoupled knowledge distillation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset into --out-dir")
    _common(p)

    p = sub.add_parser("train-teacher", help="pretrain one teacher on the task loss")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher-index", type=int, default=0, help="which entry of config.teachers")

    p = sub.add_parser("train-student", help="train the undistilled student baseline")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("distill", help="distil the student from frozen teacher checkpoints")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", action="append", default=[], help="teacher checkpoint or run dir; repeatable")

    for name, text in (("eval", "write metrics.csv"), ("spectra", "write band_errors.csv, spectra.csv and plots")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", required=True)
        _models_arg(p)
        p.add_argument("--untrained", action="store_true", help="also evaluate freshly initialised teacher/student")

    p = sub.add_parser("bench", help="time forward passes; speedups relative to the first model")
    _common(p)
    _models_arg(p)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)
    p.add_argument("--no-bench", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def _named_models(items) -> dict:
    models = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        models[name] = pipeline.load_model(path)
    return models


def _untrained(cfg: ExperimentConfig) -> dict:
    spec = cfg.teacher_specs()[0]
    return {
        f"untrained_{spec.kind}": build_model(spec, seed=cfg.seed),
        "untrained_student": build_model(cfg.student_spec(), seed=cfg.seed),
    }


def run(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir)
    set_deterministic(cfg.seed, cfg.train.deterministic)
    cmd = args.command

    if cmd == "gen-data":
        pipeline.make_dataset(cfg, out)
        dump_config(cfg, out / "config.yaml")
        return
    if cmd == "pipeline":
        pipeline.run_pipeline(cfg, out, bench=not args.no_bench)
        return
    if cmd == "bench":
        models = _named_models(args.model) if args.model else _untrained(cfg)
        first = next(iter(models.values()))
        grid = first.spec.grid if first.spec.kind == "mlp_mixer" else cfg.data.grid
        pipeline.bench_models(models, (first.spec.in_channels, *grid), cfg, out)
        return

    data = load_dataset(args.data)
    if cmd == "train-teacher":
        if not 0 <= args.teacher_index < len(cfg.teachers):
            raise ConfigError(f"teacher index {args.teacher_index} out of range ({len(cfg.teachers)} teachers)")
        pipeline.train_teacher(cfg, data, args.teacher_index, out)
    elif cmd == "train-student":
        pipeline.train_baseline(cfg, data, cfg.seed, out)
    elif cmd == "distill":
        if not args.teacher:
            raise UsageError("distill needs at least one --teacher checkpoint")
        teachers = [pipeline.load_model(t) for t in args.teacher]
        cfg.distill.check_teachers(len(teachers) if cfg.distill.mode != "single" else 1)
        pipeline.train_distilled(cfg, data, teachers, cfg.seed, out)
    elif cmd in ("eval", "spectra"):
        models = _named_models(args.model)
        if args.untrained or not models:
            models.update(_untrained(cfg))
        if cmd == "eval":
            pipeline.evaluate_models(models, data, cfg, out)
        else:
            pipeline.spectra_models(models, data, cfg, out)


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"sdkd-error: usage: {_one_line(err)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except UsageError as err:
        print(f"sdkd-error: usage: {_one_line(err)}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, ChecksumError, ValueError, RuntimeError) as err:
        print(f"sdkd-error: {type(err).__name__}: {_one_line(err)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
