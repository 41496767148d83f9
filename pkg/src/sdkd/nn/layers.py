"""Building blocks of the latent evolution stage.

The functional forms (``conv_block``, ``attention_block``, ``latent_fuse``)
take explicit weights so they can be checked against hand oracles; the
module wrappers own the parameters.
"""

from __future__ import annotations

import math
import warnings

import torch
import torch.nn.functional as F
from torch import nn

# warn when attention would materialise more than this many scores per head
ATTENTION_N_LIMIT = 4096


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def conv_block(z, weight, bias=None, activation=gelu):
    """``activation(conv2d(z, weight) + bias)`` with same padding."""
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k:
        raise ValueError(f"kernel must be square and odd, got {tuple(weight.shape[-2:])}")
    if z.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {z.shape[1]}, kernel expects {weight.shape[1]}")
    out = F.conv2d(z, weight, bias, padding=k // 2)
    return out if activation is None else activation(out)


def softmax_attention(q, k, v):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes; returns ``(out, weights)``."""
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return weights @ v, weights


def attention_block(z, w_q, w_k, w_v, heads: int = 1, return_weights: bool = False):
    """Softmax self-attention over the ``H*W`` spatial positions of ``z`` ``[B, D, H, W]``.

    Projections are bias-free ``D x D`` matrices applied as ``tokens @ W``.
    """
    b, d, h, w = z.shape
    n = h * w
    if d % heads:
        raise ValueError(f"channels {d} not divisible by heads {heads}")
    if n > ATTENTION_N_LIMIT:
        warnings.warn(f"attention over N={n} positions costs O(N^2 d)", RuntimeWarning, stacklevel=2)
    tokens = z.flatten(2).transpose(1, 2)  # [B, N, D]
    dh = d // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(1, 2)  # [B, h, N, dh]

    q, k, v = split(tokens @ w_q), split(tokens @ w_k), split(tokens @ w_v)
    out, weights = softmax_attention(q, k, v)
    out = out.transpose(1, 2).reshape(b, n, d)
    out = out.transpose(1, 2).reshape(b, d, h, w)
    return (out, weights) if return_weights else out


def channel_layer_norm(z, gamma=None, beta=None, eps: float = 1e-5):
    """LayerNorm over the channel axis of ``[B, D, H, W]`` at every position."""
    mean = z.mean(dim=1, keepdim=True)
    var = ((z - mean) ** 2).mean(dim=1, keepdim=True)
    out = (z - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma.view(1, -1, 1, 1)
    if beta is not None:
        out = out + beta.view(1, -1, 1, 1)
    return out


def latent_fuse(z_high, z_low, gamma=None, beta=None, eps: float = 1e-5):
    if z_high.shape != z_low.shape:
        raise ValueError(f"shape mismatch: {tuple(z_high.shape)} vs {tuple(z_low.shape)}")
    return channel_layer_norm(z_high + z_low, gamma, beta, eps)


class ConvBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel, padding=kernel // 2)

    def forward(self, z):
        return conv_block(z, self.conv.weight, self.conv.bias)


class SelfAttention(nn.Module):
    """Bias-free Q/K/V projections, no output projection: ``3 d^2`` parameters."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        for p in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(p)

    def forward(self, z):
        return attention_block(z, self.w_q, self.w_k, self.w_v, self.heads)


class ChannelLayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, z):
        return channel_layer_norm(z, self.weight, self.bias, self.eps)


class FuseBlock(nn.Module):
    """One latent evolution step: conv branch and attention branch, fused by LayerNorm."""

    def __init__(self, dim: int, kernel: int = 3, heads: int = 4):
        super().__init__()
        self.high = ConvBlock(dim, kernel)
        self.low = SelfAttention(dim, heads)
        self.norm = ChannelLayerNorm(dim)

    def forward(self, z):
        return latent_fuse(self.high(z), self.low(z), self.norm.weight, self.norm.bias, self.norm.eps)


class GELU(nn.Module):
    def forward(self, x):
        return gelu(x)
