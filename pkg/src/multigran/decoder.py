"""Group-query decoder with across-granularity interactive attention.

Each decoder layer runs, in order:

1. self-attention inside each granularity group (separate weights per group),
2. one masked self-attention over all groups concatenated, where the
   interaction mask decides which granularity pairs may exchange information,
3. cross-attention to the encoder memory and an FFN, shared by all groups.

Every query carries a reference box, initialized from its own embedding and
replaced by the query's predicted box after each layer. The box and polygon
heads predict offsets from it in logit space, and its sine encoding is added
to the positional term so cross-attention looks near the reference.

Group order is always word, line, para, page.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .layers import MLP, FeedForward, MultiHeadAttention, sine_encoding
from .encoder import MemorySequence
from .numeric import LAYER_NORM_EPS

NUM_GROUPS = 4
FACTORS = (1, 2, 3)


@dataclass(frozen=True)
class InteractionMask:
    """Boolean ``4N x 4N`` matrix; ``allowed is None`` means skip the interactive step."""

    allowed: Optional[np.ndarray]
    factor: Optional[int]
    direction: str = "both"

    @property
    def disabled(self) -> bool:
        return self.allowed is None

    def as_tensor(self, device=None) -> Optional[torch.Tensor]:
        if self.allowed is None:
            return None
        return torch.as_tensor(self.allowed, dtype=torch.bool, device=device)


def build_interaction_mask(
    n_q: int, factor: Union[int, str, None], direction: str = "both"
) -> InteractionMask:
    """Mask for ``4 * n_q`` concatenated queries.

    ``allowed[i, j]`` holds when ``|g(i) - g(j)| <= factor`` with
    ``g(i) = i // n_q``. ``factor`` of ``None`` or ``"disabled"`` returns the
    sentinel that turns the interactive step off. With ``direction="bottom-up"``
    a query only reads from its own and finer granularities
    (``0 <= g(i) - g(j) <= factor``).
    """
    if n_q < 1:
        raise ValueError(f"n_q must be >= 1, got {n_q}")
    if factor is None or factor == "disabled":
        return InteractionMask(None, None, direction)
    if isinstance(factor, bool) or factor not in FACTORS:
        raise ValueError(f"interaction factor must be one of {FACTORS} or 'disabled', got {factor!r}")
    g = np.arange(NUM_GROUPS * n_q) // n_q
    diff = g[:, None] - g[None, :]
    if direction == "both":
        allowed = np.abs(diff) <= factor
    elif direction == "bottom-up":
        allowed = (diff >= 0) & (diff <= factor)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return InteractionMask(allowed, int(factor), direction)


def parse_interaction(spec) -> tuple[Union[int, None], str]:
    """``1``/``"2"``/``"disabled"``/``"bottom-up"``/``"bottom-up:2"`` to ``(factor, direction)``."""
    if spec is None or spec == "disabled":
        return None, "both"
    if isinstance(spec, str) and spec.startswith("bottom-up"):
        _, _, f = spec.partition(":")
        return (int(f) if f else 1), "bottom-up"
    return int(spec), "both"


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.group_attn = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(NUM_GROUPS))
        self.group_norm = nn.ModuleList(nn.LayerNorm(dim, eps=LAYER_NORM_EPS) for _ in range(NUM_GROUPS))
        self.inter_attn = MultiHeadAttention(dim, heads)
        self.inter_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.cross_norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.ffn = FeedForward(dim, ffn_dim)

    def group_self_attention(self, x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        """``x``/``pos``: ``(B, 4, N, C)``; each group attends only within itself."""
        outs = []
        for g in range(NUM_GROUPS):
            t, p = x[:, g], pos[:, g]
            qk = t + p
            outs.append(self.group_norm[g](t + self.group_attn[g](qk, qk, t)))
        return torch.stack(outs, dim=1)

    def interactive_attention(self, x: torch.Tensor, pos: torch.Tensor, allowed) -> torch.Tensor:
        b, g, n, c = x.shape
        flat = x.reshape(b, g * n, c)
        qk = flat + pos.reshape(b, g * n, c)
        out = self.inter_norm(flat + self.inter_attn(qk, qk, flat, allowed))
        return out.reshape(b, g, n, c)

    def cross_attention_ffn(self, x: torch.Tensor, pos: torch.Tensor, memory: MemorySequence) -> torch.Tensor:
        b, g, n, c = x.shape
        flat = x.reshape(b, g * n, c)
        q = flat + pos.reshape(b, g * n, c)
        k = memory.tokens + memory.pos
        flat = self.cross_norm(flat + self.cross_attn(q, k, memory.tokens))
        return self.ffn(flat).reshape(b, g, n, c)

    def forward(self, x, pos, memory: MemorySequence, allowed, skip_interaction: bool):
        x = self.group_self_attention(x, pos)
        if not skip_interaction:
            x = self.interactive_attention(x, pos, allowed)
        return self.cross_attention_ffn(x, pos, memory)


@dataclass
class LayerOutput:
    """Per-group head outputs of one decoder layer (lists indexed by granularity)."""

    logits: list[torch.Tensor]                       # (B, N, |C_t|)
    boxes: list[torch.Tensor]                        # (B, N, 4) cx, cy, w, h in [0, 1]
    polygons: Optional[list[torch.Tensor]] = None    # (B, N, K, 2) in [0, 1], last layer only


class DetectionHeads(nn.Module):
    """Classification, box and polygon heads; separate per group, shared across layers."""

    def __init__(self, dim: int, vocab_sizes, poly_points: int, prior_prob: float = 0.01):
        super().__init__()
        self.poly_points = poly_points
        self.cls = nn.ModuleList(nn.Linear(dim, k) for k in vocab_sizes)
        self.box = nn.ModuleList(MLP(dim, dim, 4, 3) for _ in vocab_sizes)
        self.poly = nn.ModuleList(MLP(dim, dim, 2 * poly_points, 3) for _ in vocab_sizes)
        bias = -float(np.log((1 - prior_prob) / prior_prob))
        for head in self.cls:
            nn.init.constant_(head.bias, bias)

    def forward(self, x: torch.Tensor, ref: torch.Tensor, last: bool) -> LayerOutput:
        """``x``: ``(B, 4, N, C)`` states; ``ref``: ``(B, 4, N, 4)`` reference boxes (cx, cy, w, h)."""
        b, g, n, _ = x.shape
        ref_logit = inverse_sigmoid(ref)
        logits = [self.cls[i](x[:, i]) for i in range(g)]
        boxes = [(self.box[i](x[:, i]) + ref_logit[:, i]).sigmoid() for i in range(g)]
        polygons = None
        if last:
            center = inverse_sigmoid(torch.stack(boxes, 1)[..., None, :2])
            polygons = [
                (self.poly[i](x[:, i]).reshape(b, n, self.poly_points, 2) + center[:, i]).sigmoid()
                for i in range(g)
            ]
        return LayerOutput(logits, boxes, polygons)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class GranularityDecoder(nn.Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        layers: int,
        ffn_dim: int,
        num_queries: int,
        vocab_sizes,
        poly_points: int,
    ):
        super().__init__()
        self.num_queries = num_queries
        self.queries = nn.Parameter(torch.randn(NUM_GROUPS, num_queries, dim))
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, ffn_dim) for _ in range(layers))
        self.heads = DetectionHeads(dim, vocab_sizes, poly_points)
        self.ref_init = nn.Linear(dim, 4)
        self.ref_pos = MLP(2 * dim, dim, dim, 2)

    def reference_position(self, ref: torch.Tensor) -> torch.Tensor:
        dim = self.queries.shape[-1]
        center = sine_encoding(ref[..., :2], dim)
        # the bare center encoding uses the memory's grid encoding, so attention is local from the start
        return center + self.ref_pos(torch.cat([center, sine_encoding(ref[..., 2:], dim)], dim=-1))

    def run(self, memory: MemorySequence, mask: InteractionMask, queries: Optional[torch.Tensor] = None):
        """States after every layer and the reference boxes each layer started from."""
        b = memory.tokens.shape[0]
        q = self.queries if queries is None else queries
        if q.dim() == 3:
            q = q.unsqueeze(0).expand(b, -1, -1, -1)
        allowed = mask.as_tensor(q.device)
        ref = self.ref_init(q).sigmoid()
        x, states, refs = q, [], []
        for layer in self.layers:
            x = layer(x, q + self.reference_position(ref), memory, allowed, mask.disabled)
            states.append(x)
            refs.append(ref)
            boxes = self.heads(x, ref, last=False).boxes
            ref = torch.stack(boxes, 1).detach()
        return states, refs

    def hidden_states(
        self,
        memory: MemorySequence,
        mask: InteractionMask,
        queries: Optional[torch.Tensor] = None,
    ) -> list[torch.Tensor]:
        """Query embeddings after every layer, each ``(B, 4, N, C)``.

        ``queries`` overrides the learned group queries (``(4, N, C)`` or
        ``(B, 4, N, C)``); they serve as the initial content and, together
        with the reference-box encoding, as the per-layer positional term.
        """
        return self.run(memory, mask, queries)[0]

    def forward(self, memory, mask, queries=None) -> list[LayerOutput]:
        states, refs = self.run(memory, mask, queries)
        return [self.heads(s, r, last=(i == len(states) - 1)) for i, (s, r) in enumerate(zip(states, refs))]
