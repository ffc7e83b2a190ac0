"""The full network: detection branch (backbone, encoder, group decoder, heads)
and the prompt-conditioned segmentation branch (FPN, prompt encoder, mask decoder).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .decoder import GranularityDecoder, InteractionMask, build_interaction_mask, parse_interaction
from .encoder import FPN, Backbone, FeaturePyramid, TransformerEncoder
from .segmentation import MaskDecoder, MaskPrediction, PromptEncoder


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 3
    ffn_dim: Optional[int] = None
    num_queries: int = 32
    poly_points: int = 16
    num_para_classes: int = 5
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    interaction: Union[int, str, None] = 1
    seg_blocks: int = 2

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.dim % self.heads or self.dim % 4:
            raise ValueError(f"dim {self.dim} must be divisible by heads ({self.heads}) and by 4")
        if self.poly_points < 4 or self.poly_points % 2:
            raise ValueError("poly_points must be an even integer >= 4")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need enc_layers >= 0 and dec_layers >= 1")
        parse_interaction(self.interaction)

    @property
    def vocab_sizes(self) -> tuple[int, int, int, int]:
        return (1, 1, self.num_para_classes, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def interaction_mask(self) -> InteractionMask:
        factor, direction = parse_interaction(self.interaction)
        return build_interaction_mask(self.num_queries, factor, direction)


class MultiGranularityNet(nn.Module):
    DET_PREFIXES = ("backbone.", "encoder.", "decoder.")
    SEG_PREFIXES = ("fpn.", "prompt_encoder.", "mask_decoder.")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ffn = cfg.ffn_dim or 2 * cfg.dim
        self.backbone = Backbone(cfg.backbone_channels)
        pyramid_channels = cfg.backbone_channels[1:]
        self.encoder = TransformerEncoder(pyramid_channels, cfg.dim, cfg.heads, cfg.enc_layers, ffn)
        self.decoder = GranularityDecoder(
            cfg.dim, cfg.heads, cfg.dec_layers, ffn, cfg.num_queries, cfg.vocab_sizes, cfg.poly_points
        )
        self.fpn = FPN(pyramid_channels, cfg.dim)
        self.prompt_encoder = PromptEncoder(cfg.dim, cfg.poly_points)
        self.mask_decoder = MaskDecoder(cfg.dim, cfg.heads, ffn, cfg.seg_blocks)
        self.mask = cfg.interaction_mask()

    def set_interaction(self, interaction) -> None:
        self.cfg.interaction = interaction
        self.mask = self.cfg.interaction_mask()

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return self.backbone(images)

    def detect(self, images: torch.Tensor, pyr: Optional[FeaturePyramid] = None, queries=None):
        """Per-layer detection outputs for a ``(B, 3, H, W)`` batch in ``[0, 1]``."""
        pyr = pyr if pyr is not None else self.pyramid(images)
        memory = self.encoder(pyr)
        return self.decoder(memory, self.mask, queries)

    def fused(self, pyr: FeaturePyramid) -> torch.Tensor:
        return self.fpn(pyr)

    def segment(self, fused: torch.Tensor, prompts: torch.Tensor) -> MaskPrediction:
        """Masks for ``(P, K, 2)`` normalized polygon prompts on one ``(C, h, w)`` fused map."""
        return self.mask_decoder(fused, self.prompt_encoder(prompts))

    def det_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(self.DET_PREFIXES)]

    def seg_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(self.SEG_PREFIXES)]


def images_to_tensor(rasters, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(H, W, 3)`` uint8 rasters into a ``(B, 3, H, W)`` tensor in ``[0, 1]``."""
    arr = np.stack([np.asarray(r) for r in rasters]).astype(np.float32) / 255.0
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()
