"""Turning network outputs into text instances (and pseudo-labels)."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
import torch

from . import geometry
from .corpus import GRANULARITY_NAMES, Granularity, SampleRecord, TextInstance
from .model import MultiGranularityNet, images_to_tensor
from .segmentation import MaskPrediction, polygons_to_prompts

# focal-loss scores of correct detections sit well below 1, so the default cut is below 0.5
DEFAULT_SCORE_THRESH = 0.4


def decode_detections(last, b: int, width: int, height: int, score_thresh: float) -> list[TextInstance]:
    """Instances of sample ``b`` from the last decoder layer, all granularities.

    A query's score is its highest class probability; para queries take the
    arg-max class. Only scores strictly above ``score_thresh`` are kept.
    Instances keep query order within each granularity.
    """
    scale = np.array([width, height], dtype=np.float64)
    out = []
    for level in Granularity:
        probs = last.logits[level][b].detach().double().sigmoid().cpu().numpy()
        polys = last.polygons[level][b].detach().double().cpu().numpy() * scale
        scores = probs.max(axis=1)
        classes = probs.argmax(axis=1)
        for q in np.flatnonzero(scores > score_thresh):
            out.append(TextInstance(level, int(classes[q]), polys[q], score=float(scores[q])))
    return out


def segment_instances(
    net: MultiGranularityNet,
    fused: torch.Tensor,
    instances: Sequence[TextInstance],
    width: int,
    height: int,
    score_thresh: float = 0.0,
) -> list[MaskPrediction]:
    """One mask per instance scoring at least ``score_thresh``, in input order.

    Each returned prediction holds a single mask (``logits`` of shape
    ``(1, H/4, W/4)``).
    """
    keep = [inst for inst in instances if inst.score is None or inst.score >= score_thresh]
    if not keep:
        return []
    prompts = polygons_to_prompts([inst.polygon for inst in keep], width, height, net.cfg.poly_points)
    pred = net.segment(fused, prompts.to(fused.dtype))
    return [MaskPrediction(pred.logits[i : i + 1], pred.iou_score[i : i + 1]) for i in range(len(keep))]


@torch.no_grad()
def predict(
    net: MultiGranularityNet,
    samples: Sequence[tuple[SampleRecord, np.ndarray]],
    score_thresh: float = DEFAULT_SCORE_THRESH,
    with_masks: bool = False,
    batch_size: int = 4,
) -> list[SampleRecord]:
    """Prediction records (same schema as the dataset) for every granularity.

    Flags in the output are all 1: the detector emits every granularity no
    matter what the source annotations covered.
    """
    net.eval()
    results = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = images_to_tensor([r for _, r in chunk])
        pyr = net.pyramid(images)
        outputs = net.detect(images, pyr)
        fused = net.fused(pyr) if with_masks else None
        for b, (rec, _) in enumerate(chunk):
            insts = decode_detections(outputs[-1], b, rec.width, rec.height, score_thresh)
            if with_masks and insts:
                masks = segment_instances(net, fused[b], insts, rec.width, rec.height)
                insts = [
                    replace(inst, mask_rle=geometry.mask_to_rle(m.full_resolution(rec.height, rec.width)[0].numpy()))
                    for inst, m in zip(insts, masks)
                ]
            results.append(
                SampleRecord(
                    id=rec.id,
                    image=rec.image,
                    width=rec.width,
                    height=rec.height,
                    flags={n: 1 for n in GRANULARITY_NAMES},
                    instances=insts,
                )
            )
    return results


@torch.no_grad()
def segment_with_prompts(
    net: MultiGranularityNet,
    samples: Sequence[tuple[SampleRecord, np.ndarray]],
) -> list[SampleRecord]:
    """Copies of the input records with a mask for every instance, prompted by its own polygon."""
    net.eval()
    results = []
    for rec, raster in samples:
        if not rec.instances:
            results.append(rec)
            continue
        fused = net.fused(net.pyramid(images_to_tensor([raster])))[0]
        masks = segment_instances(net, fused, rec.instances, rec.width, rec.height)
        insts = [
            replace(inst, mask_rle=geometry.mask_to_rle(m.full_resolution(rec.height, rec.width)[0].numpy()))
            for inst, m in zip(rec.instances, masks)
        ]
        results.append(replace(rec, instances=insts))
    return results
