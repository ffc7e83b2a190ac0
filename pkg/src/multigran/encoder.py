"""Image to multi-scale features, encoder memory, and the stride-8 fused map."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .layers import FeedForward, MultiHeadAttention, grid_encoding, group_norm
from .numeric import LAYER_NORM_EPS

STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    """Backbone maps at strides 8, 16, 32 (``(B, C_i, H/s, W/s)`` each)."""

    levels: list[torch.Tensor]


@dataclass
class MemorySequence:
    tokens: torch.Tensor      # (B, T, C)
    pos: torch.Tensor         # (B, T, C) positional + level embedding
    shapes: list[tuple[int, int]]


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        group_norm(cout),
        nn.GELU(),
    )


class Backbone(nn.Module):
    """Strided conv stack: a stride-2 stem, then four stages of stride 4/8/16/32.

    ``channels`` gives the width of the four stages; the last three are
    returned as the pyramid.
    """

    def __init__(self, channels=(16, 32, 64, 128), in_channels: int = 3):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.stem = _conv_block(in_channels, c1, 2)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(_conv_block(c1, c1, 2), _conv_block(c1, c1, 1)),
                nn.Sequential(_conv_block(c1, c2, 2), _conv_block(c2, c2, 1)),
                nn.Sequential(_conv_block(c2, c3, 2), _conv_block(c3, c3, 1)),
                nn.Sequential(_conv_block(c3, c4, 2), _conv_block(c4, c4, 1)),
            ]
        )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image dims must be divisible by 32, got {h}x{w}")
        x = self.stem(images)
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                outs.append(x)
        return FeaturePyramid(outs)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x, pos):
        qk = x + pos
        x = self.norm(x + self.attn(qk, qk, x))
        return self.ffn(x)


class TransformerEncoder(nn.Module):
    """Projects the pyramid to ``dim`` channels and runs dense self-attention."""

    def __init__(self, in_channels, dim: int, heads: int, layers: int, ffn_dim: int):
        super().__init__()
        self.dim = dim
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, dim, 1), group_norm(dim)) for c in in_channels
        )
        self.level_embed = nn.Parameter(torch.randn(len(in_channels), dim) * 0.1)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ffn_dim) for _ in range(layers))

    def embed(self, pyr: FeaturePyramid) -> MemorySequence:
        tokens, pos, shapes = [], [], []
        for lvl, (feat, proj) in enumerate(zip(pyr.levels, self.input_proj)):
            x = proj(feat)
            b, c, h, w = x.shape
            tokens.append(x.flatten(2).transpose(1, 2))
            pe = grid_encoding(h, w, c, dtype=x.dtype) + self.level_embed[lvl]
            pos.append(pe.expand(b, -1, -1))
            shapes.append((h, w))
        return MemorySequence(torch.cat(tokens, 1), torch.cat(pos, 1), shapes)

    def encode_tokens(self, tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            tokens = layer(tokens, pos)
        return tokens

    def forward(self, pyr: FeaturePyramid) -> MemorySequence:
        mem = self.embed(pyr)
        return MemorySequence(self.encode_tokens(mem.tokens, mem.pos), mem.pos, mem.shapes)


class FPN(nn.Module):
    """Top-down fusion to a single ``dim``-channel map at stride 8.

    The coarsest level is projected by ``top``; the two finer levels enter
    through ``laterals`` and are summed with the nearest-upsampled path.
    """

    def __init__(self, in_channels, dim: int):
        super().__init__()
        self.top = nn.Conv2d(in_channels[-1], dim, 1)
        self.laterals = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels[:-1])

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        *fine, coarse = pyr.levels
        x = self.top(coarse)
        for feat, lateral in zip(reversed(fine), reversed(self.laterals)):
            x = lateral(feat) + F.interpolate(x, size=feat.shape[-2:], mode="nearest")
        return x
