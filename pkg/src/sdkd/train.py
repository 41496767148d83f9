"""Teacher pretraining and offline student distillation.

A run directory contains ``config.json``, ``metrics.csv`` (one row per epoch)
and ``checkpoints/{best,last}``; ``last`` carries optimizer state and the
loss history so an interrupted run resumes on the same trajectory.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import LoadedDataset
from .distill import (
    A2DConfig,
    DistillPlan,
    ProjectionHead,
    a2d_step,
    aver_mkd_target,
    distill_term,
    student_features,
    task_loss,
    teacher_features,
)
from .nn.models import alternation_groups, latent_channels
from .nn.params import load_checkpoint, load_module_state, save_checkpoint, save_module_state

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "task_term", "kd_term", "wall_s")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 42
    early_stop_patience: int = 20
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    deterministic: bool = True
    # teacher pretraining only: update the conv parameters on even epochs and
    # the attention parameters on odd epochs instead of both jointly
    alternate: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.early_stop_patience < self.epochs:
            raise ValueError("early_stop_patience must be smaller than epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    task_term: list[float] = field(default_factory=list)
    kd_term: list[float] = field(default_factory=list)
    wall_s: list[float] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: str | None = None
    stopped_early: bool = False

    @property
    def best_val(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    def to_dict(self) -> dict:
        return asdict(self)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def batch_order(n: int, seed: int, epoch: int, batch_size: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _tensors(dataset: LoadedDataset, split: str):
    x, y = dataset.xy(split)
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(np.ascontiguousarray(y))


def evaluate_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int = 32) -> float:
    """Task MSE over a whole split, accumulated in float64 in a fixed order."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            err = (model(x[i : i + batch_size]) - y[i : i + batch_size]).double() ** 2
            total += float(err.sum())
            count += err.numel()
    model.train()
    return total / max(count, 1)


def _write_metrics(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for e in range(len(record.train_loss)):
            w.writerow(
                [e]
                + [
                    f"{v:.10e}"
                    for v in (record.train_loss[e], record.val_loss[e], record.task_term[e], record.kd_term[e])
                ]
                + [f"{record.wall_s[e]:.3f}"]
            )


StepFn = Callable[[np.ndarray, int], tuple[float, float, float]]


def _fit(
    model: nn.Module,
    dataset: LoadedDataset,
    cfg: TrainConfig,
    run_dir,
    make_step: Callable[[torch.optim.Optimizer], StepFn],
    extra_modules: Sequence[nn.Module] = (),
    config_snapshot: dict | None = None,
    resume: bool = False,
) -> RunRecord:
    run_dir = Path(run_dir) if run_dir is not None else None
    params = [p for m in (model, *extra_modules) for p in m.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, cfg)
    step = make_step(optimizer)
    x_val, y_val = _tensors(dataset, "eval")
    n_train = dataset.manifest["counts"]["train"]
    record, start, bad_epochs = RunRecord(), 0, 0

    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        snapshot = {"train": asdict(cfg), **(config_snapshot or {})}
        (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        last = run_dir / "checkpoints" / "last"
        if resume and (last / "manifest.json").exists():
            restored, manifest = load_checkpoint(last, optimizer=optimizer)
            model.load_state_dict(restored.state_dict())
            for i, mod in enumerate(extra_modules):
                load_module_state(last / f"extra{i}", mod)
            state = manifest["extra"]
            record = RunRecord(**state["record"])
            start, bad_epochs = state["epoch"] + 1, state["bad_epochs"]

    model.train()
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        batches = batch_order(n_train, cfg.seed, epoch, cfg.batch_size)
        for idx in batches:
            try:
                total, task, kd = step(idx, epoch)
            except FloatingPointError as err:
                total, reason = float("nan"), str(err)
            else:
                reason = f"training loss {total}"
            if not np.isfinite(total):
                where = ""
                if run_dir is not None:
                    dump = run_dir / "checkpoints" / "diverged"
                    save_checkpoint(dump, model, optimizer, extra={"epoch": epoch, "batch": idx.tolist()})
                    where = f"; state dumped to {dump}"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} ({reason}){where}")
            sums += (total, task, kd)
        sums /= len(batches)
        val = evaluate_loss(model, x_val, y_val)
        record.train_loss.append(float(sums[0]))
        record.task_term.append(float(sums[1]))
        record.kd_term.append(float(sums[2]))
        record.val_loss.append(val)
        record.wall_s.append(time.perf_counter() - t0)
        improved = np.isfinite(val) and val < record.best_val
        if improved:
            record.best_epoch, bad_epochs = epoch, 0
        else:
            bad_epochs += 1
        if run_dir is not None:
            if improved:
                best = run_dir / "checkpoints" / "best"
                save_checkpoint(best, model, extra={"epoch": epoch, "val_loss": val})
                record.checkpoint = str(best)
            last = run_dir / "checkpoints" / "last"
            save_checkpoint(
                last,
                model,
                optimizer,
                extra={"epoch": epoch, "bad_epochs": bad_epochs, "record": record.to_dict()},
            )
            for i, mod in enumerate(extra_modules):
                save_module_state(last / f"extra{i}", mod)
            _write_metrics(run_dir / "metrics.csv", record)
        log.info("epoch %d train %.5g val %.5g", epoch, sums[0], val)
        if bad_epochs >= cfg.early_stop_patience:
            record.stopped_early = True
            break

    if run_dir is not None and record.checkpoint is not None:
        best_model, _ = load_checkpoint(record.checkpoint)
        model.load_state_dict(best_model.state_dict())
    return record


def pretrain_teacher(model: nn.Module, dataset: LoadedDataset, cfg: TrainConfig, run_dir=None, resume=False) -> RunRecord:
    """Supervised training on the task loss; keeps the best-validation weights."""
    set_deterministic(cfg.seed, cfg.deterministic)
    x_tr, y_tr = _tensors(dataset, "train")
    conv_group, attn_group = alternation_groups(model)
    alternate = cfg.alternate and bool(attn_group)

    def make_step(optimizer):
        def step(idx, epoch):
            optimizer.zero_grad(set_to_none=True)
            loss = task_loss(model(x_tr[idx]), y_tr[idx])
            loss.backward()
            if alternate:
                # parameters without a gradient are skipped by the optimizer
                for p in attn_group if epoch % 2 == 0 else conv_group:
                    p.grad = None
            optimizer.step()
            v = float(loss.detach())
            return v, v, 0.0

        return step

    snapshot = {"model": model.spec.to_dict()} if hasattr(model, "spec") else {}
    return _fit(model, dataset, cfg, run_dir, make_step, config_snapshot=snapshot, resume=resume)


train_supervised = pretrain_teacher


def _freeze(teacher: nn.Module) -> nn.Module:
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def distill_student(
    student: nn.Module,
    teachers: Sequence[nn.Module],
    dataset: LoadedDataset,
    plan: DistillPlan,
    cfg: TrainConfig,
    a2d: A2DConfig | None = None,
    run_dir=None,
    resume: bool = False,
) -> RunRecord:
    """Train ``student`` on ``task + lam * distill`` against frozen ``teachers``.

    ``plan.mode`` picks the path: ``single`` (one teacher), ``aver_mkd``
    (distil towards the averaged teacher features) or ``aekd`` (per-teacher
    gradients combined by the capped-simplex min-norm weights).
    """
    if not teachers:
        raise ValueError("distillation needs at least one teacher")
    plan.check_teachers(len(teachers))
    a2d = a2d or A2DConfig(lr=cfg.lr)
    set_deterministic(cfg.seed, cfg.deterministic)
    teachers = [_freeze(t) for t in teachers]
    x_tr, y_tr = _tensors(dataset, "train")
    feats = [teacher_features(t, x_tr, plan) for t in teachers]

    proj = None
    if plan.tap == "latent":
        with torch.no_grad():
            s_lat = student.features(x_tr[:1])[1]
        t_shape = feats[0].shape
        if s_lat.shape[1:] != t_shape[1:]:
            proj = ProjectionHead(latent_channels(student), t_shape[1], tuple(t_shape[-2:]))
    extra = [proj] if proj is not None else []

    if plan.mode == "aver_mkd":
        feats = [aver_mkd_target(feats)]

    diag_rows: list[list] = []

    def make_step(optimizer):
        def step(idx, epoch):
            x, y = x_tr[idx], y_tr[idx]
            tf = [f[idx] for f in feats]
            if plan.mode == "aekd":
                out = a2d_step(student, tf, x, y, plan, a2d, optimizer, proj)
                diag_rows.append([len(diag_rows), *out["losses"], *out["alpha"].tolist(), out["d_norm"]])
                total = out["task"] + plan.lam * out["kd_weighted"]
                return total, out["task"], out["kd_weighted"]
            optimizer.zero_grad(set_to_none=True)
            pred, feat = student_features(student, x, plan, proj)
            task = task_loss(pred, y)
            kd = distill_term(feat, tf[0], plan)
            loss = task + plan.lam * kd
            loss.backward()
            optimizer.step()
            t, k = float(task.detach()), float(kd.detach())
            return t + plan.lam * k, t, k

        return step

    snapshot = {
        "model": student.spec.to_dict() if hasattr(student, "spec") else None,
        "teachers": [t.spec.to_dict() for t in teachers if hasattr(t, "spec")],
        "plan": asdict(plan),
        "a2d": asdict(a2d),
    }
    record = _fit(student, dataset, cfg, run_dir, make_step, extra, snapshot, resume)
    if run_dir is not None and diag_rows:
        m = len(feats)
        header = ["step", *[f"loss_{i}" for i in range(m)], *[f"alpha_{i}" for i in range(m)], "d_norm"]
        with open(Path(run_dir) / "a2d_diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in diag_rows:
                w.writerow([row[0], *[f"{v:.10e}" for v in row[1:]]])
    return record
