"""Transformer building blocks in float64, written for exactness over speed.

Key-side masking assigns masked positions exactly zero attention weight
(finite sentinel scores underflow to 0 after the softmax max-shift), so padded
tokens can never influence valid positions, bitwise. Rows with no valid key
produce an all-zero output instead of NaN.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64

_MASK_SENTINEL = -1e30


class MultiheadAttention(nn.Module):
    """Standard scaled dot-product attention over heads.

    ``key_mask`` is a [n, Lk] bool tensor, True where the key is valid.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.k_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        n, lq, _ = query.shape
        lk = key_value.shape[1]

        def split(x, proj, length):
            return proj(x).view(n, length, self.heads, self.head_dim).transpose(1, 2)

        q = split(query, self.q_proj, lq)
        k = split(key_value, self.k_proj, lk)
        v = split(key_value, self.v_proj, lk)

        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            has_valid = key_mask.any(dim=-1)
            # rows with no valid key keep finite scores and get zeroed below
            safe_mask = torch.where(has_valid[:, None], key_mask, torch.ones_like(key_mask))
            scores = scores.masked_fill(~safe_mask[:, None, None, :], _MASK_SENTINEL)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(n, lq, self.dim)
        out = self.out_proj(out)
        if key_mask is not None:
            out = out * has_valid.to(out.dtype)[:, None, None]
        return out


class TransformerBlock(nn.Module):
    """Pre-norm block: residual self-attention followed by a residual MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = MultiheadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class ModalityBatchNorm(nn.Module):
    """Feature-wise batch normalization with its own running statistics.

    Train mode normalizes with the current batch's mean and (biased) variance
    and updates the running estimates; eval mode uses the running estimates.
    One instance per modality, so the two CLS streams never share statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor, train: bool, update_running_stats: bool = True) -> torch.Tensor:
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization in train mode needs n >= 2")
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            if update_running_stats:
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(m * mean)
                    self.running_var.mul_(1 - m).add_(m * x.var(dim=0, unbiased=True))
        else:
            mean = self.running_mean
            var = self.running_var
        xhat = (x - mean) / torch.sqrt(var + self.eps)
        return xhat * self.weight + self.bias
