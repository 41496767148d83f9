"""Forecast metrics, spectral error reports and inference benchmarks."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import LoadedDataset
from .nn.complexity import count_flops, count_params
from .spectral import SpectralConfig, plancherel_decompose_error, radial_energy_spectrum

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def psnr(pred, target, data_range: float) -> float:
    """``10 log10(range^2 / mse)``; identical inputs give ``inf``."""
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    err = mse(pred, target)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def ssim(pred, target, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window x window`` patches of every 2-D slice.

    Uniform window weights, population (1/n) moments.
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if window % 2 == 0 or window > min(pred.shape[-2:]):
        raise ValueError(f"window {window} must be odd and <= min(H, W) = {min(pred.shape[-2:])}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    px = sliding_window_view(pred, (window, window), axis=(-2, -1))
    py = sliding_window_view(target, (window, window), axis=(-2, -1))
    mx, my = px.mean(axis=(-2, -1)), py.mean(axis=(-2, -1))
    vx = (px**2).mean(axis=(-2, -1)) - mx**2
    vy = (py**2).mean(axis=(-2, -1)) - my**2
    cxy = (px * py).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class MetricReport:
    mse: float
    mae: float
    psnr: float
    ssim: float
    low_band_err: float
    high_band_err: float
    n_samples: int


def metric_report(pred, target, data_range: float, spectral: SpectralConfig | float | None = None) -> MetricReport:
    low, high, _ = plancherel_decompose_error(pred, target, spectral)
    return MetricReport(
        mse=mse(pred, target),
        mae=mae(pred, target),
        psnr=psnr(pred, target, data_range),
        ssim=ssim(pred, target, data_range=data_range),
        low_band_err=low,
        high_band_err=high,
        n_samples=len(pred),
    )


def predict(model: torch.nn.Module, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(torch.as_tensor(x[i : i + batch_size], dtype=dtype)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_model(model, dataset: LoadedDataset, split: str = "test", cutoff: float | None = None) -> MetricReport:
    x, y = dataset.xy(split)
    pred = predict(model, x)
    return metric_report(pred, y.astype(np.float64), dataset.data_range, cutoff)


def write_metrics_csv(reports: Mapping[str, MetricReport], path) -> None:
    fields = list(MetricReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", *fields])
        for name, rep in reports.items():
            row = [name]
            for f in fields:
                v = getattr(rep, f)
                row.append(v if isinstance(v, int) else ("inf" if math.isinf(v) else f"{v:.10e}"))
            w.writerow(row)


def mean_spectrum(fields: np.ndarray) -> np.ndarray:
    """Radial spectrum averaged over every 2-D slice of ``fields``."""
    flat = np.asarray(fields, dtype=np.float64).reshape((-1,) + fields.shape[-2:])
    return np.mean([radial_energy_spectrum(f) for f in flat], axis=0)


def spectral_report(models: Mapping[str, torch.nn.Module], dataset: LoadedDataset, split: str = "test", cutoff: float | None = None, out_dir=None, plot: bool = True):
    """Band errors and radial spectra of each model's predictions on ``split``.

    Returns ``(band_rows, spectrum_rows)`` where band rows are
    ``(model, band, error)`` and spectrum rows are
    ``(model, shell, pred_energy, target_energy)``.
    """
    x, y = dataset.xy(split)
    y = y.astype(np.float64)
    target_spec = mean_spectrum(y)
    band_rows, spec_rows = [], []
    for name, model in models.items():
        pred = predict(model, x)
        low, high, total = plancherel_decompose_error(pred, y, cutoff)
        band_rows += [(name, "low", low), (name, "high", high), (name, "total", total)]
        ps = mean_spectrum(pred)
        spec_rows += [(name, k, float(ps[k]), float(target_spec[k])) for k in range(len(ps))]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "band_errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "band", "error"])
            w.writerows((m, b, f"{e:.10e}") for m, b, e in band_rows)
        with open(out / "spectra.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "shell", "pred_energy", "target_energy"])
            w.writerows((m, k, f"{p:.10e}", f"{t:.10e}") for m, k, p, t in spec_rows)
        if plot:
            _plot_spectra(band_rows, spec_rows, out)
    return band_rows, spec_rows


def _plot_spectra(band_rows, spec_rows, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(dict.fromkeys(r[0] for r in band_rows))
    fig, ax = plt.subplots(figsize=(5, 4))
    target_done = False
    for name in names:
        rows = [r for r in spec_rows if r[0] == name and r[1] > 0]
        k = [r[1] for r in rows]
        ax.loglog(k, [max(r[2], 1e-16) for r in rows], label=name)
        if not target_done:
            ax.loglog(k, [max(r[3], 1e-16) for r in rows], "k--", label="target")
            target_done = True
    ax.set_xlabel("shell k")
    ax.set_ylabel("E(k)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "spectra.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        errs = {b: e for m, b, e in band_rows if m == name}
        ax.bar(np.arange(2) + i * width, [errs["low"], errs["high"]], width, label=name)
    ax.set_xticks(np.arange(2) + 0.4 - width / 2)
    ax.set_xticklabels(["low band", "high band"])
    ax.set_ylabel("squared error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "band_errors.png", dpi=100)
    plt.close(fig)


@dataclass
class TimingReport:
    model: str
    mean_forward_s: float
    flops: int
    params: int
    speedup: float
    repeats: int


TIMING_GROUPS = 5


def timed_passes(repeats: int, groups: int = TIMING_GROUPS) -> int:
    """Number of timed forward passes: at least 6 per group and at least ``repeats``."""
    return groups * max(6, -(-repeats // groups))


def time_forward(model, x: torch.Tensor, repeats: int = 30, warmup: int = 5, groups: int = TIMING_GROUPS) -> float:
    """Median of group means of single forward passes, after ``warmup`` untimed passes."""
    per_group = timed_passes(repeats, groups) // groups
    model.eval()
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        means = []
        for _ in range(groups):
            t0 = time.perf_counter()
            for _ in range(per_group):
                model(x)
            means.append((time.perf_counter() - t0) / per_group)
    return statistics.median(means)


def bench_inference(models: Mapping[str, torch.nn.Module], input_shape, repeats: int = 30) -> list[TimingReport]:
    """Time each model on the same input; speedups are relative to the first model."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    x = torch.randn(shape, generator=torch.Generator().manual_seed(0))
    reports = []
    for name, model in models.items():
        t = time_forward(model, x.to(next(model.parameters()).dtype), repeats)
        reports.append(
            TimingReport(name, t, count_flops(model, shape), count_params(model, trainable_only=False), 1.0, timed_passes(repeats))
        )
    ref = reports[0].mean_forward_s if reports else 1.0
    for r in reports:
        r.speedup = ref / r.mean_forward_s
    return reports


def write_timing_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(TimingReport.__dataclass_fields__))
        for r in reports:
            w.writerow([v if not isinstance(v, float) else f"{v:.6e}" for v in asdict(r).values()])
