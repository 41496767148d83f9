"""Slow reference implementations that share no code with the package."""

import itertools
import math

import numpy as np
import torch


def dft2_direct(f):
    """2-D DFT by explicit quadruple loop."""
    h, w = f.shape
    out = np.zeros((h, w), dtype=complex)
    for u, v in itertools.product(range(h), range(w)):
        acc = 0j
        for y, x in itertools.product(range(h), range(w)):
            acc += f[y, x] * np.exp(-2j * np.pi * (u * y / h + v * x / w))
        out[u, v] = acc
    return out


def idft2_direct(F):
    h, w = F.shape
    out = np.zeros((h, w), dtype=complex)
    for y, x in itertools.product(range(h), range(w)):
        acc = 0j
        for u, v in itertools.product(range(h), range(w)):
            acc += F[u, v] * np.exp(2j * np.pi * (u * y / h + v * x / w))
        out[y, x] = acc / (h * w)
    return out


def correlate2d_same(img, kernel):
    """Zero-padded 'same' cross-correlation by explicit loops."""
    h, w = img.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros((h, w))
    for y, x in itertools.product(range(h), range(w)):
        acc = 0.0
        for i, j in itertools.product(range(k), range(k)):
            yy, xx = y + i - r, x + j - r
            if 0 <= yy < h and 0 <= xx < w:
                acc += img[yy, xx] * kernel[i, j]
        out[y, x] = acc
    return out


def finite_difference_grad(fn, tensor, eps=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = torch.as_tensor(a).double(), torch.as_tensor(b).double()
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_grads(loss_fn, tensors, eps=1e-6, joint=False):
    """Relative error between autograd and central differences over ``tensors``.

    Per tensor (worst case) by default; ``joint`` compares the concatenated
    gradient vector instead, which is the meaningful measure when some
    parameter's gradient is identically zero by symmetry.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    auto = torch.autograd.grad(loss, tensors)
    with torch.no_grad():
        fds = [finite_difference_grad(loss_fn, t, eps) for t in tensors]
    if joint:
        return rel_err(torch.cat([g.reshape(-1) for g in auto]), torch.cat([f.reshape(-1) for f in fds]))
    return max(rel_err(g, f) for g, f in zip(auto, fds))


def capped_simplex_grid(m, cap, step):
    """All lattice points of spacing ``step`` on the capped simplex."""
    n = int(round(1 / step))
    grids = np.stack(np.meshgrid(*[np.arange(n + 1)] * (m - 1), indexing="ij"), -1).reshape(-1, m - 1)
    grids = grids[grids.sum(1) <= n]
    a = np.concatenate([grids, n - grids.sum(1, keepdims=True)], axis=1) / n
    return a[np.all(a <= cap + 1e-12, axis=1)]


def ssim_direct(x, y, window, k1, k2, data_range):
    """Per-window SSIM by explicit loops over one 2-D slice."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, w = x.shape
    vals = []
    n = window * window
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            a = [x[i + p, j + q] for p in range(window) for q in range(window)]
            b = [y[i + p, j + q] for p in range(window) for q in range(window)]
            ma, mb = sum(a) / n, sum(b) / n
            va = sum((t - ma) ** 2 for t in a) / n
            vb = sum((t - mb) ** 2 for t in b) / n
            cab = sum((s - ma) * (t - mb) for s, t in zip(a, b)) / n
            vals.append(((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def softmax_list(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]
