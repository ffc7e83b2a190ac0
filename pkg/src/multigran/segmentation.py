"""Polygon-prompted mask decoding.

A detected (or ground-truth) polygon is turned into ``K + 2`` prompt tokens:
an output token, an IoU token and one token per vertex (sine encoding of the
normalized vertex plus a learned slot embedding). Two two-way attention
blocks exchange information between tokens and the stride-8 fused map; the
output token is then dotted with an upsampled stride-4 pixel embedding to
give mask logits, and the IoU token predicts the mask's IoU with the truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import geometry
from .layers import MLP, MultiHeadAttention, grid_encoding, group_norm, sine_encoding
from .numeric import DICE_EPS, LAYER_NORM_EPS

MSE_WEIGHT = 5.0


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor   # (P, K + 2, C); rows 0 and 1 are the output and IoU tokens
    pos: torch.Tensor      # (P, K + 2, C) positional part only (zeros for the two special tokens)


@dataclass
class MaskPrediction:
    logits: torch.Tensor     # (P, H/4, W/4)
    iou_score: torch.Tensor  # (P,)

    def full_resolution(self, h: int, w: int) -> torch.Tensor:
        """Mask probabilities bilinearly resized to ``h x w``."""
        up = F.interpolate(self.logits[:, None], size=(h, w), mode="bilinear", align_corners=False)
        return up[:, 0].sigmoid()


class PromptEncoder(nn.Module):
    def __init__(self, dim: int, poly_points: int):
        super().__init__()
        self.dim = dim
        self.poly_points = poly_points
        self.slot_embed = nn.Parameter(torch.randn(poly_points, dim) * 0.1)
        self.special = nn.Parameter(torch.randn(2, dim) * 0.1)

    def forward(self, polygons: torch.Tensor) -> PromptEmbedding:
        """``polygons``: ``(P, K, 2)`` normalized vertices."""
        if polygons.dim() != 3 or polygons.shape[1] != self.poly_points or polygons.shape[2] != 2:
            raise ValueError(
                f"expected prompts of shape (P, {self.poly_points}, 2), got {tuple(polygons.shape)}"
            )
        p = polygons.shape[0]
        pos = sine_encoding(polygons.to(self.slot_embed.dtype), self.dim)
        vertex = pos + self.slot_embed
        special = self.special.expand(p, -1, -1)
        tokens = torch.cat([special, vertex], dim=1)
        full_pos = torch.cat([torch.zeros_like(special), pos], dim=1)
        return PromptEmbedding(tokens, full_pos)


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.token_to_image = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.mlp = MLP(dim, ffn_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.image_to_token = MultiHeadAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)

    def forward(self, tokens, token_pe, image, image_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + token_pe
        tokens = self.norm2(tokens + self.token_to_image(q, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + token_pe
        image = self.norm4(image + self.image_to_token(image + image_pe, q, tokens))
        return tokens, image


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, blocks: int = 2):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads, ffn_dim) for _ in range(blocks))
        self.final_attn = MultiHeadAttention(dim, heads)
        self.final_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        up_dim = max(dim // 4, 8)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, up_dim, kernel_size=2, stride=2),
            group_norm(up_dim),
            nn.GELU(),
        )
        self.hyper = MLP(dim, dim, up_dim, 3)
        self.iou_head = MLP(dim, dim, 1, 3)

    def forward(self, fused: torch.Tensor, prompt: PromptEmbedding) -> MaskPrediction:
        """``fused``: ``(C, h, w)`` map of one image shared by all prompts."""
        c, h, w = fused.shape
        p = prompt.tokens.shape[0]
        image = fused.flatten(1).t().unsqueeze(0).expand(p, -1, -1)
        image_pe = grid_encoding(h, w, c, dtype=fused.dtype).unsqueeze(0).expand(p, -1, -1)
        tokens, pe = prompt.tokens, prompt.pos
        for block in self.blocks:
            tokens, image = block(tokens, pe, image, image_pe)
        q = tokens + pe
        tokens = self.final_norm(tokens + self.final_attn(q, image + image_pe, image))
        pixels = self.upscale(image.transpose(1, 2).reshape(p, c, h, w))
        weights = self.hyper(tokens[:, 0])
        logits = torch.einsum("pc,pchw->phw", weights, pixels)
        iou = self.iou_head(tokens[:, 1]).squeeze(-1).sigmoid()
        return MaskPrediction(logits, iou)


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` per mask, averaged."""
    p = probs.flatten(1)
    g = target.flatten(1)
    num = 2 * (p * g).sum(1) + eps
    den = p.sum(1) + g.sum(1) + eps
    return (1 - num / den).mean()


def binarized_iou(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-mask IoU of thresholded probabilities vs the target (no gradient)."""
    with torch.no_grad():
        a = probs.flatten(1) >= geometry.MASK_THRESHOLD
        b = target.flatten(1) >= geometry.MASK_THRESHOLD
        inter = (a & b).sum(1).to(probs.dtype)
        union = (a | b).sum(1).to(probs.dtype)
        return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def seg_loss(probs: torch.Tensor, iou_score: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``5 * MSE(mask) + dice(mask) + MSE(iou_score, actual IoU)``.

    ``probs``/``target`` are ``(P, H, W)``; the IoU target is recomputed
    from the binarized prediction and carries no gradient.
    """
    if probs.shape != target.shape:
        raise ValueError(f"mask shapes differ: {tuple(probs.shape)} vs {tuple(target.shape)}")
    target = target.to(probs.dtype)
    mse = ((probs - target) ** 2).flatten(1).mean(1).mean()
    iou_target = binarized_iou(probs, target)
    iou_term = ((iou_score - iou_target) ** 2).mean()
    return MSE_WEIGHT * mse + dice_loss(probs, target) + iou_term


def polygons_to_prompts(polygons, width: int, height: int, k: int) -> torch.Tensor:
    """Resample pixel-space polygons to ``k`` vertices and normalize to ``[0, 1]``."""
    scale = np.array([width, height], dtype=np.float64)
    out = [geometry.resample_polygon(p, k) / scale for p in polygons]
    if not out:
        return torch.zeros(0, k, 2)
    return torch.as_tensor(np.stack(out), dtype=torch.float32)
