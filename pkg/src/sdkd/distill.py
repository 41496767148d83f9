"""Distillation losses and adaptive multi-teacher gradient weighting.

Multi-teacher updates combine per-teacher gradients ``g_m`` with weights
from the min-norm problem

    min_a  0.5 * || sum_m a_m g_m ||^2   s.t.  sum_m a_m = 1,  0 <= a_m <= C

solved by accelerated projected gradient on the ``M x M`` Gram matrix, then
refined exactly by active-set enumeration when ``M`` is small.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nn.params import ParameterSet
from .spectral import band_split

LOSS_VARIANTS = ("mse_feature", "ab")
TAPS = ("output", "latent")
MODES = ("single", "aver_mkd", "aekd")


class InfeasibleCapError(ValueError):
    pass


@dataclass
class DistillPlan:
    lam: float = 0.1  # task / distillation balance
    alpha_kd: float = 1.0  # weight of the low band relative to the high band
    loss_variant: str = "mse_feature"
    tap: str = "output"
    cutoff: float | None = None  # radial shells; None -> min(H, W) // 8 of the tapped grid
    mode: str = "single"
    margin: float = 1.0  # ab loss only
    n_teachers: int | None = None

    def __post_init__(self):
        if self.lam < 0 or self.alpha_kd < 0:
            raise ValueError("lam and alpha_kd must be >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_teachers is not None:
            self.check_teachers(self.n_teachers)

    def check_teachers(self, m: int) -> None:
        need = {"single": 1, "aekd": 1, "aver_mkd": 2}[self.mode]
        if m < need:
            raise ValueError(f"mode {self.mode} needs at least {need} teacher(s), got {m}")
        if self.mode == "single" and m != 1:
            raise ValueError(f"mode single takes exactly one teacher, got {m}")


@dataclass
class A2DConfig:
    cap: float = 0.7
    lr: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 500
    literal_sgd: bool = False  # plain theta -= lr * sum(a_m g_m) instead of the optimizer
    n_teachers: int | None = None

    def __post_init__(self):
        if not 0 < self.cap <= 1:
            raise ValueError(f"cap must lie in (0, 1], got {self.cap}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.n_teachers is not None and self.n_teachers > 1:
            check_cap(self.n_teachers, self.cap)


def check_cap(m: int, cap: float) -> None:
    if m * cap < 1 - 1e-12:
        raise InfeasibleCapError(f"capped simplex is empty: M*C = {m}*{cap} < 1")


@dataclass
class GradientBundle:
    g: list[torch.Tensor]
    alpha_star: np.ndarray = field(default=None)
    d: torch.Tensor = field(default=None)


# -- losses ------------------------------------------------------------------


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def task_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, target)
    return torch.mean((pred - target) ** 2)


def kd_terms(student_feat, teacher_feat, cutoff: float | None = None):
    """Mean squared high-band and low-band residuals; the teacher side is detached."""
    _check_shapes(student_feat, teacher_feat)
    low, high = band_split(student_feat - teacher_feat.detach(), cutoff)
    return torch.mean(high**2), torch.mean(low**2)


def kd_loss(student_feat, teacher_feat, plan: DistillPlan | None = None) -> torch.Tensor:
    plan = plan or DistillPlan()
    high, low = kd_terms(student_feat, teacher_feat, plan.cutoff)
    return high + plan.alpha_kd * low


def ab_loss(student_pre, teacher_pre, margin: float = 1.0) -> torch.Tensor:
    """Activation-boundary hinge: push the student past ``margin`` on the teacher's side of zero."""
    _check_shapes(student_pre, teacher_pre)
    on = teacher_pre.detach() > 0
    penalty = torch.where(on, F.relu(margin - student_pre) ** 2, F.relu(margin + student_pre) ** 2)
    return penalty.mean()


def aver_mkd_target(teacher_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(teacher_outputs) < 2:
        raise ValueError("averaging needs at least two teacher outputs")
    for t in teacher_outputs[1:]:
        _check_shapes(teacher_outputs[0], t)
    return torch.stack([t.detach() for t in teacher_outputs]).mean(dim=0)


def distill_term(student_feat, teacher_feat, plan: DistillPlan) -> torch.Tensor:
    if plan.loss_variant == "ab":
        return ab_loss(student_feat, teacher_feat, plan.margin)
    return kd_loss(student_feat, teacher_feat, plan)


class ProjectionHead(nn.Module):
    """1x1 conv from student latent width to teacher latent width, pooled to the teacher grid."""

    def __init__(self, student_dim: int, teacher_dim: int, teacher_grid: tuple[int, int]):
        super().__init__()
        self.proj = nn.Conv2d(student_dim, teacher_dim, 1)
        self.grid = tuple(teacher_grid)

    def forward(self, z):
        z = self.proj(z)
        if tuple(z.shape[-2:]) != self.grid:
            z = F.adaptive_avg_pool2d(z, self.grid)
        return z


# -- capped simplex ----------------------------------------------------------


def project_capped_simplex(v, cap: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{a : sum a = 1, 0 <= a <= cap}``.

    The projection is ``clip(v - tau, 0, cap)`` where ``tau`` solves the
    piecewise-linear equation ``sum clip(v - tau, 0, cap) = 1``; ``tau`` is
    located between sorted breakpoints and interpolated exactly.
    """
    v = np.asarray(v, dtype=np.float64)
    m = v.size
    check_cap(m, cap)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input to projection")
    if m * cap <= 1 + 1e-15:
        return np.full(m, 1.0 / m)

    def mass(tau):
        return np.clip(v - tau, 0.0, cap).sum()

    knots = np.unique(np.concatenate([v - cap, v]))[::-1]  # descending tau, ascending mass
    prev_tau, prev_mass = knots[0], mass(knots[0])  # mass 0 at max(v)
    tau = knots[-1]
    for k in knots[1:]:
        s = mass(k)
        if s >= 1.0:
            # linear on [k, prev_tau]
            tau = prev_tau - (1.0 - prev_mass) * (prev_tau - k) / (s - prev_mass)
            break
        prev_tau, prev_mass = k, s
    alpha = np.clip(v - tau, 0.0, cap)
    return alpha


def a2d_objective(alpha, gram) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    return 0.5 * float(alpha @ gram @ alpha)


def gram_matrix(grads: Sequence) -> np.ndarray:
    g = torch.stack([torch.as_tensor(x, dtype=torch.float64).reshape(-1) for x in grads])
    if not torch.isfinite(g).all():
        raise ValueError("non-finite gradient entries")
    return (g @ g.T).numpy()


EXACT_MAX_TEACHERS = 8


def _active_set_solution(gram: np.ndarray, cap: float) -> np.ndarray | None:
    """Exact minimiser by enumerating which weights sit at 0, at ``cap`` or in between.

    For each split the equality-constrained problem on the free weights is a
    small KKT system, solved in the least-squares sense so singular Gram
    blocks are fine. An optimum with the fewest free weights is the unique
    minimiser of its own system, so the best feasible candidate is optimal.
    """
    m = gram.shape[0]
    best, best_f = None, np.inf
    for state in itertools.product((0, 1, 2), repeat=m):  # 0: at zero, 1: at cap, 2: free
        state = np.array(state)
        upper, free = state == 1, state == 2
        rest = 1.0 - upper.sum() * cap
        if rest < -1e-12 or (not free.any() and abs(rest) > 1e-12):
            continue
        alpha = np.where(upper, cap, 0.0)
        if free.any():
            idx = np.flatnonzero(free)
            k = idx.size
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = gram[np.ix_(idx, idx)]
            kkt[:k, k] = kkt[k, :k] = 1.0
            rhs = np.append(-gram[np.ix_(idx, np.flatnonzero(upper))].sum(axis=1) * cap, rest)
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            if sol.min() < -1e-12 or sol.max() > cap + 1e-12 or abs(sol.sum() - rest) > 1e-9:
                continue
            alpha[idx] = sol
        alpha = project_capped_simplex(alpha, cap)
        f = a2d_objective(alpha, gram)
        if f < best_f:
            best, best_f = alpha, f
    return best


def solve_a2d_weights(grads: Sequence, cfg: A2DConfig | None = None, gram: np.ndarray | None = None) -> np.ndarray:
    """Teacher weights minimising the norm of the combined gradient on the capped simplex."""
    cfg = cfg or A2DConfig()
    m = len(grads) if gram is None else gram.shape[0]
    if m < 1:
        raise ValueError("need at least one gradient")
    if m > 1:
        # a single gradient is used as is; the cap only constrains mixtures
        check_cap(m, cfg.cap)
    if gram is None:
        lengths = {int(torch.as_tensor(x).numel()) for x in grads}
        if len(lengths) != 1:
            raise ValueError(f"gradients have unequal lengths {sorted(lengths)}")
        gram = gram_matrix(grads)
    if m == 1:
        if not np.isfinite(gram).all():
            raise ValueError("non-finite gradient entries")
        return np.ones(1)
    # curvature along the simplex's tangent space sets the step
    tangent = np.eye(m) - 1.0 / m
    lip = float(np.linalg.eigvalsh(tangent @ gram @ tangent).max())
    alpha = project_capped_simplex(np.full(m, 1.0 / m), cfg.cap)
    if lip <= 1e-12 * max(float(np.trace(gram)), 1e-300):
        # G P = 0: the objective is constant over the simplex
        return alpha
    y, t, f_prev = alpha.copy(), 1.0, a2d_objective(alpha, gram)
    for _ in range(cfg.max_iter):
        nxt = project_capped_simplex(y - gram @ y / lip, cfg.cap)
        f_next = a2d_objective(nxt, gram)
        if f_next > f_prev:
            if t == 1.0:  # a plain projected step failed to descend: round-off floor
                break
            y, t = alpha.copy(), 1.0  # restart momentum
            continue
        step = float(np.linalg.norm(nxt - alpha))
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = nxt + ((t - 1) / t_next) * (nxt - alpha)
        alpha, t, f_prev = nxt, t_next, f_next
        if step < cfg.tol:
            break
    if m <= EXACT_MAX_TEACHERS:
        # first-order iterations stall on badly conditioned Gram matrices
        exact = _active_set_solution(gram, cfg.cap)
        if exact is not None and a2d_objective(exact, gram) < f_prev:
            alpha = exact
    return alpha


# -- one multi-teacher update ------------------------------------------------


def student_features(student, x, plan: DistillPlan, proj: nn.Module | None = None):
    """Return ``(prediction, tapped feature)`` for the student."""
    if plan.tap == "output":
        pred = student(x)
        return pred, pred
    pred, latent = student.features(x)
    return pred, (proj(latent) if proj is not None else latent)


def teacher_features(teacher, x, plan: DistillPlan) -> torch.Tensor:
    with torch.no_grad():
        if plan.tap == "output":
            return teacher(x)
        return teacher.features(x)[1]


def a2d_step(student, teacher_feats, x, y, plan: DistillPlan, cfg: A2DConfig, optimizer=None, proj=None):
    """One adaptive multi-teacher update on a mini-batch.

    ``teacher_feats`` are the frozen teachers' tap features for ``x``. Performs
    exactly ``M`` backward passes, combines the gradients with the solved
    weights and applies the combined gradient through ``optimizer`` (or as a
    plain SGD step when ``cfg.literal_sgd``). Returns a diagnostics dict.
    """
    modules = [student] + ([proj] if proj is not None else [])
    params = ParameterSet(
        (f"{i}.{n}", p) for i, mod in enumerate(modules) for n, p in mod.named_parameters() if p.requires_grad
    )
    tensors = list(params.tensors.values())
    pred, feat = student_features(student, x, plan, proj)
    task = task_loss(pred, y)
    grads, losses, kds = [], [], []
    for m, tf in enumerate(teacher_feats):
        kd = distill_term(feat, tf, plan)
        loss = task + plan.lam * kd
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss for teacher {m}: {loss.item()}")
        g = torch.autograd.grad(loss, tensors, retain_graph=m < len(teacher_feats) - 1, allow_unused=True)
        grads.append(torch.cat([(gi if gi is not None else torch.zeros_like(t)).reshape(-1) for gi, t in zip(g, tensors)]))
        losses.append(float(loss.detach()))
        kds.append(float(kd.detach()))
    alpha = solve_a2d_weights(grads, cfg)
    combined = grads[0] * float(alpha[0])
    for a, g in zip(alpha[1:], grads[1:]):
        combined = combined + float(a) * g
    bundle = GradientBundle(g=grads, alpha_star=alpha, d=-combined)
    if cfg.literal_sgd or optimizer is None:
        with torch.no_grad():
            params.load_flat(params.flatten() + cfg.lr * bundle.d)
    else:
        optimizer.zero_grad(set_to_none=True)
        params.set_flat_grad(combined)
        optimizer.step()
    kd_mix = float(sum(a * k for a, k in zip(alpha, kds)))
    return {
        "alpha": alpha,
        "losses": losses,
        "kd": kds,
        "task": float(task.detach()),
        "kd_weighted": kd_mix,
        "d_norm": float(bundle.d.norm()),
        "bundle": bundle,
    }
