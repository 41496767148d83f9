"""Synthetic spatiotemporal datasets and their on-disk container.

Two generators:

* ``generate_ns_dataset``: 2-D incompressible Navier-Stokes in vorticity
  form on the periodic box ``[0, 2pi)^2``, pseudo-spectral with 2/3-rule
  dealiasing, Heun (RK2) for advection and an exact integrating factor for
  diffusion.
* ``generate_wave_dataset``: superpositions of travelling cosines with a
  known closed form, for spectral property tests.

A dataset directory holds ``manifest.json`` and one little-endian float32
blob per split, laid out ``[N, T, C, H, W]`` row-major, each guarded by a
CRC-32.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .spectral import check_grid

log = logging.getLogger(__name__)

SPLITS = ("train", "eval", "test")
FORMAT_VERSION = 1
BLOWUP_LIMIT = 1e6


class CFLError(RuntimeError):
    pass


class ChecksumError(IOError):
    pass


@dataclass
class SpatioTemporalSequence:
    data: np.ndarray  # [T, C, H, W]
    dt: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected [T, C, H, W], got shape {self.data.shape}")
        t, c, h, w = self.data.shape
        if t < 1 or c < 1:
            raise ValueError(f"need T >= 1 and C >= 1, got {self.data.shape}")
        check_grid(h, w)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sequence contains non-finite values")


@dataclass
class ForecastTask:
    input_len: int
    horizon: int
    sequence: SpatioTemporalSequence

    def __post_init__(self):
        if self.input_len < 1 or self.horizon < 1:
            raise ValueError("input_len and horizon must be >= 1")
        if self.input_len + self.horizon > self.sequence.data.shape[0]:
            raise ValueError(
                f"input_len + horizon = {self.input_len + self.horizon} exceeds "
                f"T = {self.sequence.data.shape[0]}"
            )

    @property
    def x(self) -> np.ndarray:
        return self.sequence.data[: self.input_len]

    @property
    def y(self) -> np.ndarray:
        return self.sequence.data[self.input_len : self.input_len + self.horizon]


@dataclass(frozen=True)
class NSConfig:
    grid: tuple[int, int] = (32, 32)
    viscosity: float = 1e-3
    forcing_amplitude: float = 0.1
    dt: float = 0.02
    steps_per_frame: int = 10
    seed: int = 0
    # initial condition: gaussian field with |w_hat| ~ (k^2 + k0^2)^(-init_decay/2)
    init_decay: float = 3.0
    init_k0: float = 2.0
    init_rms: float = 1.0
    burn_in_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        check_grid(*self.grid)
        if self.viscosity <= 0:
            raise ValueError("viscosity must be > 0")
        if self.forcing_amplitude < 0:
            raise ValueError("forcing_amplitude must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.steps_per_frame < 1:
            raise ValueError("steps_per_frame must be >= 1")

    @property
    def frame_dt(self) -> float:
        return self.dt * self.steps_per_frame


# -- pseudo-spectral Navier-Stokes -------------------------------------------


@dataclass(frozen=True)
class _NSOperators:
    kx: np.ndarray
    ky: np.ndarray
    inv_k2: np.ndarray  # 0 at the mean mode
    dealias: np.ndarray
    decay: np.ndarray  # exp(-nu k^2 dt)
    forcing_hat: np.ndarray


@lru_cache(maxsize=16)
def _operators(cfg: NSConfig) -> _NSOperators:
    h, w = cfg.grid
    ky = np.fft.fftfreq(h, 1.0 / h)[:, None]
    kx = np.fft.fftfreq(w, 1.0 / w)[None, :]
    k2 = kx**2 + ky**2
    inv_k2 = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    dealias = (np.abs(kx) < w / 3.0) & (np.abs(ky) < h / 3.0)
    y, x = grid_coords(h, w)
    forcing = cfg.forcing_amplitude * (np.sin(x + y) + np.cos(x + y))
    return _NSOperators(
        kx=kx,
        ky=ky,
        inv_k2=inv_k2,
        dealias=dealias,
        decay=np.exp(-cfg.viscosity * k2 * cfg.dt),
        forcing_hat=np.fft.fft2(forcing) * dealias,
    )


def grid_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Physical ``(y, x)`` coordinates on ``[0, 2pi)^2``, shaped ``[H, W]``."""
    y = 2 * np.pi * np.arange(h) / h
    x = 2 * np.pi * np.arange(w) / w
    return np.meshgrid(y, x, indexing="ij")


def velocity(w_hat: np.ndarray, cfg: NSConfig) -> tuple[np.ndarray, np.ndarray]:
    ops = _operators(cfg)
    psi_hat = w_hat * ops.inv_k2
    u = np.fft.ifft2(1j * ops.ky * psi_hat).real
    v = np.fft.ifft2(-1j * ops.kx * psi_hat).real
    return u, v


def kinetic_energy(w_hat: np.ndarray, cfg: NSConfig) -> float:
    """``0.5 * mean(u^2 + v^2)`` computed spectrally."""
    h, w = cfg.grid
    ops = _operators(cfg)
    return float(0.5 * np.sum(np.abs(w_hat) ** 2 * ops.inv_k2) / float(h * w) ** 2)


def _rhs(w_hat: np.ndarray, cfg: NSConfig, check_cfl: bool) -> np.ndarray:
    ops = _operators(cfg)
    u, v = velocity(w_hat, cfg)
    if check_cfl:
        umax = float(np.sqrt(u**2 + v**2).max())
        courant = cfg.dt * umax * max(cfg.grid) / (2 * np.pi)
        if not courant < 1.0:
            raise CFLError(
                f"CFL violated: dt*max|u|*N/(2pi) = {courant:.3f} >= 1 "
                f"(max|u| = {umax:.3g}); use a smaller dt"
            )
    wx = np.fft.ifft2(1j * ops.kx * w_hat).real
    wy = np.fft.ifft2(1j * ops.ky * w_hat).real
    return -np.fft.fft2(u * wx + v * wy) * ops.dealias + ops.forcing_hat


def ns_step(w_hat: np.ndarray, cfg: NSConfig) -> np.ndarray:
    """Advance the vorticity spectrum by one step of ``cfg.dt``."""
    ops = _operators(cfg)
    n0 = _rhs(w_hat, cfg, check_cfl=True)
    w1 = ops.decay * (w_hat + cfg.dt * n0)
    n1 = _rhs(w1, cfg, check_cfl=False)
    return ops.decay * w_hat + 0.5 * cfg.dt * (ops.decay * n0 + n1)


def random_vorticity(cfg: NSConfig, rng: np.random.Generator) -> np.ndarray:
    """Random dealiased initial vorticity spectrum with rms ``cfg.init_rms``."""
    h, w = cfg.grid
    ops = _operators(cfg)
    noise_hat = np.fft.fft2(rng.standard_normal((h, w)))
    k2 = ops.kx**2 + ops.ky**2
    shape = (k2 + cfg.init_k0**2) ** (-cfg.init_decay / 2.0)
    w_hat = noise_hat * shape * ops.dealias
    w_hat[0, 0] = 0.0
    rms = np.sqrt(np.sum(np.abs(w_hat) ** 2)) / (h * w)
    return w_hat * (cfg.init_rms / rms)


def simulate_ns(w_hat: np.ndarray, cfg: NSConfig, n_frames: int) -> np.ndarray:
    """Roll out ``n_frames`` frames (first frame is the input state) as ``[T, H, W]``."""
    frames = np.empty((n_frames,) + cfg.grid)
    for t in range(n_frames):
        if t:
            for _ in range(cfg.steps_per_frame):
                w_hat = ns_step(w_hat, cfg)
        frames[t] = np.fft.ifft2(w_hat).real
    return frames


def _ns_sequence(cfg: NSConfig, index: int, n_frames: int, events: list) -> np.ndarray:
    attempt = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, attempt]))
        try:
            w_hat = random_vorticity(cfg, rng)
            for _ in range(cfg.burn_in_frames * cfg.steps_per_frame):
                w_hat = ns_step(w_hat, cfg)
            frames = simulate_ns(w_hat, cfg, n_frames)
        except (CFLError, FloatingPointError) as err:
            reason = str(err)
        else:
            peak = np.abs(frames).max()
            if np.isfinite(peak) and peak <= BLOWUP_LIMIT:
                return frames
            reason = f"max|w| = {peak:.3g} exceeds {BLOWUP_LIMIT:g}"
        log.warning("sequence %d attempt %d blew up (%s); regenerating", index, attempt, reason)
        events.append({"sequence": index, "attempt": attempt, "reason": reason})
        attempt += 1
        if attempt > 20:
            raise RuntimeError(f"sequence {index} keeps blowing up; last: {reason}")


def split_counts(n: int, counts: Sequence[int] | None = None) -> dict[str, int]:
    """Sequence counts per split; default 8/1/1 by index."""
    if counts is None:
        n_ev = n_te = n // 10
        counts = (n - n_ev - n_te, n_ev, n_te)
    counts = tuple(int(c) for c in counts)
    if sum(counts) != n or min(counts) < 0:
        raise ValueError(f"split counts {counts} do not partition {n} sequences")
    return dict(zip(SPLITS, counts))


def _split(arr: np.ndarray, counts: dict[str, int]) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for name in SPLITS:
        out[name] = arr[start : start + counts[name]]
        start += counts[name]
    return out


def generate_ns_dataset(
    cfg: NSConfig,
    n_sequences: int,
    T: int,
    input_len: int = 10,
    horizon: int = 10,
    counts: Sequence[int] | None = None,
    name: str = "ns2d",
) -> tuple[dict, dict[str, np.ndarray]]:
    """Generate vorticity sequences; returns ``(manifest, blobs)``.

    Blobs are float64 in memory. Sequence ``i`` draws from its own stream
    seeded by ``(cfg.seed, i)`` so results do not depend on generation order.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if input_len < 1 or horizon < 1:
        raise ValueError("input_len and horizon must be >= 1")
    if input_len + horizon > T:
        raise ValueError(f"input_len + horizon = {input_len + horizon} exceeds T = {T}")
    events: list = []
    data = np.stack([_ns_sequence(cfg, i, T, events) for i in range(n_sequences)])[:, :, None]
    split = split_counts(n_sequences, counts)
    config = asdict(cfg)
    config["grid"] = list(cfg.grid)
    manifest = {
        "name": name,
        "generator": "navier_stokes",
        "config": config,
        "shape": [T, 1, *cfg.grid],
        "dt": cfg.frame_dt,
        "input_len": input_len,
        "horizon": horizon,
        "counts": split,
        "events": events,
    }
    return manifest, _split(data, split)


@dataclass
class WaveMode:
    kx: int
    ky: int
    amplitude: float
    phase_speed: float
    phase: float = 0.0


def wave_frames(
    modes: Sequence[WaveMode], grid: tuple[int, int], T: int, dt: float, phase_offsets=None
) -> np.ndarray:
    """Closed form ``sum_i a_i cos(kx_i x + ky_i y - c_i t + phi_i)`` as ``[T, H, W]``."""
    y, x = grid_coords(*grid)
    out = np.zeros((T,) + tuple(grid))
    for i, m in enumerate(modes):
        phi = m.phase + (0.0 if phase_offsets is None else phase_offsets[i])
        for t in range(T):
            out[t] += m.amplitude * np.cos(m.kx * x + m.ky * y - m.phase_speed * t * dt + phi)
    return out


def generate_wave_dataset(
    n_sequences: int,
    T: int,
    modes: Sequence,
    grid: tuple[int, int] = (32, 32),
    dt: float = 1.0,
    seed: int = 0,
    random_phase: bool = True,
    input_len: int | None = None,
    horizon: int | None = None,
    counts: Sequence[int] | None = None,
    name: str = "waves",
) -> tuple[dict, dict[str, np.ndarray]]:
    """Travelling-wave sequences with per-sequence random phase offsets.

    ``modes`` holds ``WaveMode`` or tuples ``(kx, ky, amplitude, phase_speed[, phase])``.
    """
    grid = tuple(int(g) for g in grid)
    check_grid(*grid)
    modes = [m if isinstance(m, WaveMode) else WaveMode(*m) for m in modes]
    h, w = grid
    for m in modes:
        if abs(m.kx) >= w / 2 or abs(m.ky) >= h / 2:
            raise ValueError(f"mode ({m.kx}, {m.ky}) is at or beyond Nyquist for grid {grid}")
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    input_len = T // 2 if input_len is None else input_len
    horizon = T - input_len if horizon is None else horizon
    if input_len < 1 or horizon < 1:
        raise ValueError("input_len and horizon must be >= 1")
    if input_len + horizon > T:
        raise ValueError(f"input_len + horizon = {input_len + horizon} exceeds T = {T}")
    rng = np.random.default_rng(seed)
    phases = (
        rng.uniform(0, 2 * np.pi, size=(n_sequences, len(modes)))
        if random_phase
        else np.zeros((n_sequences, len(modes)))
    )
    data = np.stack([wave_frames(modes, grid, T, dt, phases[n]) for n in range(n_sequences)])
    split = split_counts(n_sequences, counts)
    manifest = {
        "name": name,
        "generator": "waves",
        "config": {"grid": list(grid), "dt": dt, "seed": seed, "random_phase": random_phase},
        "closed_form": {
            "expression": "sum_i a_i*cos(kx_i*x + ky_i*y - c_i*t*dt + phase_i + offset[n,i])",
            "modes": [asdict(m) for m in modes],
            "phase_offsets": phases.tolist(),
        },
        "shape": [T, 1, *grid],
        "dt": dt,
        "input_len": input_len,
        "horizon": horizon,
        "counts": split,
        "events": [],
    }
    return manifest, _split(data[:, :, None], split)


# -- container ---------------------------------------------------------------


def _blob_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_dataset(manifest: dict, blobs: dict[str, np.ndarray], path) -> dict:
    """Write blobs and manifest under ``path``; returns the manifest as written."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["layout"] = "little-endian float32, row-major [N, T, C, H, W]"
    shape = list(manifest["shape"])
    entries = {}
    for split in SPLITS:
        arr = blobs[split]
        if list(arr.shape[1:]) != shape or arr.shape[0] != manifest["counts"][split]:
            raise ValueError(f"{split} blob shape {arr.shape} disagrees with manifest")
        raw = _blob_bytes(arr)
        fname = f"{split}.bin"
        (path / fname).write_bytes(raw)
        entries[split] = {"file": fname, "count": int(arr.shape[0]), "crc32": zlib.crc32(raw)}
    manifest["blobs"] = entries
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class LoadedDataset:
    manifest: dict
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def input_len(self) -> int:
        return self.manifest["input_len"]

    @property
    def horizon(self) -> int:
        return self.manifest["horizon"]

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.manifest["shape"][2:])

    @property
    def channels(self) -> int:
        return self.manifest["shape"][1]

    @property
    def data_range(self) -> float:
        train = self.arrays["train"]
        return float(train.max() - train.min()) if train.size else 1.0

    def tasks(self, split: str = "train") -> Iterator[ForecastTask]:
        for seq in self.arrays[split]:
            yield ForecastTask(
                self.input_len, self.horizon, SpatioTemporalSequence(seq, self.manifest["dt"])
            )

    def xy(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Inputs ``[N, I*C, H, W]`` and targets ``[N, D*C, H, W]`` with time folded into channels."""
        arr = self.arrays[split]
        n, _, c, h, w = arr.shape
        i, d = self.input_len, self.horizon
        x = arr[:, :i].reshape(n, i * c, h, w)
        y = arr[:, i : i + d].reshape(n, d * c, h, w)
        return x, y

    def __iter__(self) -> Iterator[ForecastTask]:
        for split in SPLITS:
            yield from self.tasks(split)


def load_dataset(path) -> LoadedDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    shape = tuple(manifest["shape"])
    arrays = {}
    for split in SPLITS:
        entry = manifest["blobs"][split]
        blob = path / entry["file"]
        if not blob.exists():
            raise FileNotFoundError(f"missing blob {blob}")
        raw = blob.read_bytes()
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"checksum mismatch for blob {entry['file']}")
        n = entry["count"]
        if n != manifest["counts"][split] or len(raw) != 4 * n * int(np.prod(shape)):
            raise ValueError(f"blob {entry['file']} size does not match manifest shape")
        arrays[split] = np.frombuffer(raw, dtype="<f4").reshape((n,) + shape).astype(np.float32)
    return LoadedDataset(manifest, arrays)


def dataset_checksums(path) -> dict[str, int]:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    return {s: e["crc32"] for s, e in manifest["blobs"].items()}
