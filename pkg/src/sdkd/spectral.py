"""Fourier-domain utilities: band masks, low/high splits, radial spectra.

Frequencies are integer grid-index wavenumbers (``fftfreq * n``), so a field
``cos(3x)`` sampled on ``[0, 2pi)`` sits at radius 3. Radial shells bin
``round(|k|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
import torch


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_grid(h: int, w: int) -> None:
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"grid ({h}, {w}) must be powers of two")


@dataclass(frozen=True)
class SpectralConfig:
    grid: tuple[int, int]
    cutoff: float | None = None

    def __post_init__(self):
        h, w = self.grid
        check_grid(h, w)
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", float(min(h, w) // 8))
        if self.cutoff < 0:
            raise ValueError(f"cutoff must be >= 0, got {self.cutoff}")

    @property
    def radial_nyquist(self) -> float:
        return (min(self.grid) // 2) * np.sqrt(2.0)


@lru_cache(maxsize=64)
def wavenumber_radius(h: int, w: int) -> np.ndarray:
    ky = np.fft.fftfreq(h, 1.0 / h)
    kx = np.fft.fftfreq(w, 1.0 / w)
    r = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    r.setflags(write=False)
    return r


def shell_index(h: int, w: int) -> np.ndarray:
    return np.rint(wavenumber_radius(h, w)).astype(np.int64)


def n_shells(h: int, w: int) -> int:
    return int(shell_index(h, w).max()) + 1


class BandMask(NamedTuple):
    low: np.ndarray
    high: np.ndarray


def band_masks(cfg: SpectralConfig) -> BandMask:
    low = wavenumber_radius(*cfg.grid) <= cfg.cutoff
    return BandMask(low=low, high=~low)


class SpectralFeatures(NamedTuple):
    low_component: np.ndarray | torch.Tensor
    high_component: np.ndarray | torch.Tensor


def _cfg_for(field, cfg: SpectralConfig | float | None) -> SpectralConfig:
    grid = tuple(field.shape[-2:])
    if isinstance(cfg, SpectralConfig):
        if cfg.grid != grid:
            raise ValueError(f"field grid {grid} does not match config grid {cfg.grid}")
        return cfg
    return SpectralConfig(grid=grid, cutoff=cfg)


def band_split(field, cfg: SpectralConfig | float | None = None) -> SpectralFeatures:
    """Split ``field`` into low (``|k| <= cutoff``) and high band parts.

    Works on numpy arrays and torch tensors over the trailing two axes; the
    torch path is differentiable. ``high`` is computed in Fourier space too,
    not as ``field - low``, so each part is an exact band projection.
    """
    cfg = _cfg_for(field, cfg)
    low_mask = band_masks(cfg).low
    if isinstance(field, torch.Tensor):
        m = torch.as_tensor(low_mask, device=field.device)
        f_hat = torch.fft.fft2(field)
        zero = torch.zeros((), dtype=f_hat.dtype, device=field.device)
        low = torch.fft.ifft2(torch.where(m, f_hat, zero)).real
        high = torch.fft.ifft2(torch.where(m, zero, f_hat)).real
        return SpectralFeatures(low, high)
    field = np.asarray(field, dtype=np.float64)
    f_hat = np.fft.fft2(field)
    low_c = np.fft.ifft2(np.where(low_mask, f_hat, 0.0))
    high_c = np.fft.ifft2(np.where(low_mask, 0.0, f_hat))
    # hermitian-symmetric masks: imaginary residue is pure roundoff
    resid = max(np.abs(low_c.imag).max(initial=0.0), np.abs(high_c.imag).max(initial=0.0))
    scale = max(np.abs(field).max(initial=0.0), 1.0)
    assert resid < 1e-12 * scale * field.shape[-1] * field.shape[-2], resid
    return SpectralFeatures(low_c.real, high_c.real)


def radial_energy_spectrum(field) -> np.ndarray:
    """Energy per integer shell, normalised so ``E.sum() == mean(field**2)``."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {field.shape}")
    h, w = field.shape
    power = np.abs(np.fft.fft2(field)) ** 2 / float(h * w) ** 2
    return np.bincount(shell_index(h, w).ravel(), weights=power.ravel(), minlength=n_shells(h, w))


def plancherel_decompose_error(pred, target, cfg: SpectralConfig | float | None = None):
    """Return ``(low_err, high_err, total_err)`` for the residual ``pred - target``.

    ``total_err`` is the squared error summed over the grid and averaged over
    all leading axes, i.e. ``mse * H * W``; the band terms are the same sum
    restricted to Fourier indices inside / outside the cutoff.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    cfg = _cfg_for(pred, cfg)
    h, w = cfg.grid
    lead = int(np.prod(pred.shape[:-2], dtype=np.int64))
    power = np.abs(np.fft.fft2(pred - target)) ** 2 / float(h * w)
    power = power.reshape(lead, h, w).sum(axis=0) / lead
    low = band_masks(cfg).low
    low_err = float(power[low].sum())
    high_err = float(power[~low].sum())
    return low_err, high_err, low_err + high_err


def fit_spectrum_slope(energy, shell_range: tuple[int, int]) -> float:
    """Least-squares slope of ``log E`` against ``log k`` over shells k0..k1 inclusive."""
    k0, k1 = shell_range
    if k0 < 1 or k1 <= k0:
        raise ValueError(f"invalid shell range {shell_range}")
    e = np.asarray(energy, dtype=np.float64)[k0 : k1 + 1]
    if len(e) != k1 - k0 + 1:
        raise ValueError(f"spectrum has only {len(energy)} shells")
    if np.any(e <= 0):
        raise ValueError("spectrum has non-positive energy inside the fit range")
    k = np.arange(k0, k1 + 1, dtype=np.float64)
    slope, _ = np.polyfit(np.log(k), np.log(e), 1)
    return float(slope)


def shell_probe_field(h: int, w: int, shell: int) -> np.ndarray:
    """Real field made of every Fourier mode in ``shell`` with equal weight, unit mean square."""
    mask = shell_index(h, w) == shell
    f = np.fft.ifft2(mask.astype(np.complex128)).real
    return f / np.sqrt(np.mean(f**2))


def frequency_response_probe(block: Callable, cfg: SpectralConfig, channels: int = 1) -> np.ndarray:
    """Per-shell energy gain of ``block`` on single-shell inputs.

    ``block`` maps a ``[1, channels, H, W]`` float64 tensor to a tensor of the
    same spatial grid. Entry k is output mean-square energy over input
    mean-square energy for the shell-k probe (shell 0 is the constant field).
    """
    h, w = cfg.grid
    gains = np.zeros(n_shells(h, w))
    with torch.no_grad():
        for k in range(len(gains)):
            probe = shell_probe_field(h, w, k)
            x = torch.from_numpy(np.broadcast_to(probe, (1, channels, h, w)).copy())
            y = block(x)
            y = y.detach().cpu().double().numpy() if isinstance(y, torch.Tensor) else np.asarray(y)
            gains[k] = np.mean(y**2) / np.mean(probe**2)
    return gains


def spectrum_to_csv(energy, path, header: tuple[str, str] = ("shell", "energy")) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k, e in enumerate(np.asarray(energy)):
            fh.write(f"{k},{e:.10e}\n")
