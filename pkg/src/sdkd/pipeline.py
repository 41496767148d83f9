"""End-to-end stages: data -> teachers -> baseline / distilled student -> reports.

Every stage writes into a run directory and can be driven on its own (the
CLI does that) or chained by ``run_pipeline``. Seeding: the dataset and the
teachers derive from ``cfg.seed`` (teacher ``i`` initialises with
``seed + i``); students initialise and shuffle with the seed passed to them.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import statistics
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, dump_config
from .dataset import LoadedDataset, generate_ns_dataset, generate_wave_dataset, load_dataset, save_dataset
from .evaluate import bench_inference, evaluate_model, spectral_report, write_metrics_csv, write_timing_csv
from .nn.models import build_model
from .nn.params import load_checkpoint
from .train import distill_student, pretrain_teacher, set_deterministic

log = logging.getLogger(__name__)


def make_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    d = cfg.data
    if d.generator == "waves":
        manifest, blobs = generate_wave_dataset(
            d.n_sequences, d.T, d.modes, grid=d.wave_grid, dt=d.wave_dt, seed=cfg.seed,
            input_len=d.input_len, horizon=d.horizon, counts=d.counts,
        )
    else:
        manifest, blobs = generate_ns_dataset(
            d.ns_config(cfg.seed), d.n_sequences, d.T, d.input_len, d.horizon, d.counts
        )
    save_dataset(manifest, blobs, out_dir)
    return Path(out_dir)


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint directory or a run directory (uses its best checkpoint)."""
    path = Path(path)
    for cand in (path, path / "checkpoints" / "best"):
        if (cand / "manifest.json").exists():
            return cand
    raise FileNotFoundError(f"no checkpoint found at {path}")


def load_model(path) -> torch.nn.Module:
    model, _ = load_checkpoint(resolve_checkpoint(path))
    model.eval()
    return model


def train_teacher(cfg: ExperimentConfig, data: LoadedDataset, index: int, run_dir):
    spec = cfg.teacher_specs()[index]
    model = build_model(spec, seed=cfg.seed + index)
    record = pretrain_teacher(model, data, cfg.teacher_train_config(), run_dir)
    return model, record


def train_baseline(cfg: ExperimentConfig, data: LoadedDataset, seed: int, run_dir):
    model = build_model(cfg.student_spec(), seed=seed)
    record = pretrain_teacher(model, data, dataclasses.replace(cfg.train, seed=seed), run_dir)
    return model, record


def train_distilled(cfg: ExperimentConfig, data: LoadedDataset, teachers, seed: int, run_dir):
    plan = cfg.distill
    if plan.mode == "single":
        teachers = teachers[:1]
    model = build_model(cfg.student_spec(), seed=seed)
    record = distill_student(
        model, list(teachers), data, plan, dataclasses.replace(cfg.train, seed=seed), cfg.a2d, run_dir
    )
    return model, record


def evaluate_models(models: dict, data: LoadedDataset, cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {name: evaluate_model(m, data, cfg.eval.split, cfg.eval.cutoff) for name, m in models.items()}
    write_metrics_csv(reports, out / "metrics.csv")
    return reports


def spectra_models(models: dict, data: LoadedDataset, cfg: ExperimentConfig, out_dir):
    return spectral_report(models, data, cfg.eval.split, cfg.eval.cutoff, out_dir, plot=cfg.eval.plot)


def bench_models(models: dict, data_shape, cfg: ExperimentConfig, out_dir):
    shape = (cfg.eval.bench_batch,) + tuple(data_shape)
    reports = bench_inference(models, shape, cfg.eval.bench_repeats)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_timing_csv(reports, out / "timing.csv")
    return reports


def run_pipeline(cfg: ExperimentConfig, out_dir, bench: bool = True) -> dict:
    """gen-data -> pretrain teachers -> baseline + distilled student -> eval -> spectra -> bench."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    set_deterministic(cfg.seed, cfg.train.deterministic)
    data = load_dataset(make_dataset(cfg, out / "data"))

    teachers = {}
    for i, spec in enumerate(cfg.teacher_specs()):
        model, _ = train_teacher(cfg, data, i, out / "runs" / f"teacher{i}_{spec.kind}")
        teachers[f"teacher{i}_{spec.kind}"] = model
    baseline, _ = train_baseline(cfg, data, cfg.seed, out / "runs" / "baseline")
    distilled, _ = train_distilled(cfg, data, list(teachers.values()), cfg.seed, out / "runs" / "distilled")

    models = {**teachers, "baseline": baseline, "distilled": distilled}
    reports = evaluate_models(models, data, cfg, out / "eval")
    spectra_models(models, data, cfg, out / "eval")
    result = {"out_dir": out, "reports": reports}
    if bench:
        first = next(iter(teachers.values()))
        shape = (first.spec.in_channels, *data.grid)
        result["timing"] = bench_models({"teacher": first, "student": distilled}, shape, cfg, out / "eval")
    return result


TREND_FIELDS = ("seed", "baseline_mse", "distilled_mse", "baseline_high", "distilled_high", "baseline_low", "distilled_low")


def run_trend(cfg: ExperimentConfig, out_dir, seeds=(42, 43, 44)) -> dict:
    """Distilled vs undistilled student over several student seeds (teachers and data fixed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    set_deterministic(cfg.seed, cfg.train.deterministic)
    data = load_dataset(make_dataset(cfg, out / "data"))
    teachers = [train_teacher(cfg, data, i, out / "runs" / f"teacher{i}")[0] for i in range(len(cfg.teachers))]

    rows = []
    for seed in seeds:
        base, _ = train_baseline(cfg, data, seed, out / "runs" / f"baseline_s{seed}")
        dist, _ = train_distilled(cfg, data, teachers, seed, out / "runs" / f"distilled_s{seed}")
        rb = evaluate_model(base, data, cfg.eval.split, cfg.eval.cutoff)
        rd = evaluate_model(dist, data, cfg.eval.split, cfg.eval.cutoff)
        rows.append(
            dict(seed=seed, baseline_mse=rb.mse, distilled_mse=rd.mse, baseline_high=rb.high_band_err,
                 distilled_high=rd.high_band_err, baseline_low=rb.low_band_err, distilled_low=rd.low_band_err)
        )
        log.info("seed %d: baseline mse %.5g high %.5g | distilled mse %.5g high %.5g",
                 seed, rb.mse, rb.high_band_err, rd.mse, rd.high_band_err)

    with open(out / "trend.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, TREND_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (v if k == "seed" else f"{v:.10e}") for k, v in r.items()})
    summary = {k: statistics.median(r[k] for r in rows) for k in TREND_FIELDS[1:]}
    summary["rows"] = rows
    summary["teacher_mse"] = [evaluate_model(t, data, cfg.eval.split, cfg.eval.cutoff).mse for t in teachers]
    return summary


def persistence_mse(data: LoadedDataset, split: str = "test") -> float:
    """Error of repeating the last input frame over the horizon (a sanity reference)."""
    arr = data.arrays[split].astype(np.float64)
    last = arr[:, data.input_len - 1 : data.input_len]
    target = arr[:, data.input_len : data.input_len + data.horizon]
    return float(np.mean((target - last) ** 2))
