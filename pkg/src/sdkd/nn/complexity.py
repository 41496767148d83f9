"""Parameter and FLOP accounting.

FLOPs are multiply-accumulates of the dense layers only (conv, transposed
conv, linear, self-attention), per single sample. Element-wise work (norms,
activations, adds) is not counted. Per-layer conventions:

    conv           K^2 * Cin * Cout * N_out      params K^2 * Cin * Cout + Cout
    self-attention N^2 d + 3 N d^2                params 3 d^2
"""

from __future__ import annotations

import torch
from torch import nn

from .layers import SelfAttention


def conv_flops(k: int, d: int, n: int) -> int:
    return k * k * d * d * n


def conv_params(k: int, d: int) -> int:
    return k * k * d * d + d


def attention_flops(n: int, d: int) -> int:
    return n * n * d + 3 * n * d * d


def attention_params(d: int) -> int:
    return 3 * d * d


def count_params(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _layer_flops(module: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        n_out = out.shape[-2] * out.shape[-1]
        return kh * kw * (module.in_channels // module.groups) * module.out_channels * n_out
    if isinstance(module, nn.ConvTranspose2d):
        kh, kw = module.kernel_size
        n_in = inp.shape[-2] * inp.shape[-1]
        return kh * kw * module.in_channels * (module.out_channels // module.groups) * n_in
    if isinstance(module, nn.Linear):
        rows = out.numel() // out.shape[-1]
        return rows * module.in_features * module.out_features
    if isinstance(module, SelfAttention):
        n = inp.shape[-2] * inp.shape[-1]
        return attention_flops(n, inp.shape[1])
    return 0


def count_flops(model: nn.Module, input_shape) -> int:
    """Dense-layer multiply-accumulates for one sample of ``input_shape`` (``[C, H, W]``)."""
    shape = tuple(input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    total = 0

    def hook(module, args, out):
        nonlocal total
        total += _layer_flops(module, args[0], out)

    kinds = (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, SelfAttention)
    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, kinds)]
    try:
        p = next(model.parameters(), None)
        dtype = p.dtype if p is not None else torch.float32
        with torch.no_grad():
            model(torch.zeros((1,) + shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
    return total
