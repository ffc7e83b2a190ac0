"""Shared network pieces: multi-head attention, MLPs, sinusoidal encodings."""
from __future__ import annotations

import math

import torch
from torch import nn

from .numeric import LAYER_NORM_EPS, masked_softmax


class MultiHeadAttention(nn.Module):
    """Dense multi-head attention with an optional boolean ``allowed`` mask.

    ``allowed[i, j]`` (or ``allowed[b, i, j]``) says whether query ``i`` may
    attend to key ``j``; disallowed keys receive exactly zero weight.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, inner_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        inner_dim = inner_dim or dim
        if inner_dim % heads:
            raise ValueError(f"inner dim {inner_dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, inner_dim)
        self.k_proj = nn.Linear(kv_dim, inner_dim)
        self.v_proj = nn.Linear(kv_dim, inner_dim)
        self.out_proj = nn.Linear(inner_dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v, allowed: torch.Tensor | None = None) -> torch.Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        if allowed is None:
            out = nn.functional.scaled_dot_product_attention(qh, kh, vh)
            b, h, n, d = out.shape
            return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))
        scale = 1.0 / math.sqrt(qh.shape[-1])
        logits = torch.matmul(qh, kh.transpose(-1, -2)) * scale
        if allowed is not None and allowed.dim() == 3:
            allowed = allowed[:, None]
        weights = masked_softmax(logits, allowed)
        out = torch.matmul(weights, vh)
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.gelu(x)
        return x


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.mlp = MLP(dim, hidden, dim, 2)
        self.norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)

    def forward(self, x):
        return self.norm(x + self.mlp(x))


def sine_encoding(coords: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Encode normalized ``(..., 2)`` coordinates into ``(..., dim)`` features.

    Half the channels encode ``y`` and half ``x``, each as interleaved
    sin/cos pairs over geometrically spaced frequencies.
    """
    if dim % 4:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    idx = torch.arange(half, dtype=coords.dtype, device=coords.device)
    freqs = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / half)
    scaled = coords[..., None] * (2 * math.pi) / freqs
    out = torch.empty_like(scaled)
    out[..., 0::2] = scaled[..., 0::2].sin()
    out[..., 1::2] = scaled[..., 1::2].cos()
    x_part, y_part = out[..., 0, :], out[..., 1, :]
    return torch.cat([y_part, x_part], dim=-1)


def grid_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sine encoding of cell centers of an ``h x w`` grid, shape ``(h * w, dim)``."""
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy], dim=-1).reshape(h * w, 2)
    return sine_encoding(coords, dim)


def group_norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(8, channels)
    return nn.GroupNorm(groups, channels)
