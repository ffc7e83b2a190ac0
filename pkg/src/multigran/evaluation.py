"""Detection metrics: P/R/F per granularity, COCO-style mAP over paragraph
classes, and mIoU of page masks.

P/R/F matching is greedy: predictions in descending score order (ties by
input index) each claim the still-unmatched ground truth with the highest
polygon IoU at or above the threshold.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .corpus import GRANULARITY_NAMES, Granularity, SampleRecord, TextInstance

MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    images: int = 0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, images: int = 0) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f, tp, fp, fn, images)


@dataclass
class EvalReport:
    granularities: dict[str, PRF] = field(default_factory=lambda: {n: PRF() for n in GRANULARITY_NAMES})
    para_map: float = 0.0
    page_miou: float = 0.0
    iou_thresh: float = 0.5
    score_thresh: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "iou_thresh": self.iou_thresh,
            "score_thresh": self.score_thresh,
            "granularities": {k: asdict(v) for k, v in self.granularities.items()},
            "para_map": self.para_map,
            "page_miou": self.page_miou,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            granularities={k: PRF(**v) for k, v in obj["granularities"].items()},
            para_map=float(obj["para_map"]),
            page_miou=float(obj["page_miou"]),
            iou_thresh=float(obj["iou_thresh"]),
            score_thresh=obj.get("score_thresh"),
        )

    def table(self) -> str:
        rows = [f"{'granularity':<12}{'P':>8}{'R':>8}{'F':>8}{'TP':>6}{'FP':>6}{'FN':>6}{'images':>8}"]
        for name in GRANULARITY_NAMES:
            m = self.granularities[name]
            rows.append(
                f"{name:<12}{m.precision:>8.4f}{m.recall:>8.4f}{m.f1:>8.4f}"
                f"{m.tp:>6d}{m.fp:>6d}{m.fn:>6d}{m.images:>8d}"
            )
        rows.append(f"{'para mAP':<12}{self.para_map:>8.4f}")
        rows.append(f"{'page mIoU':<12}{self.page_miou:>8.4f}")
        return "\n".join(rows) + "\n"


def _score_order(preds: Sequence[TextInstance]) -> list[int]:
    scores = [(-(p.score if p.score is not None else 1.0), i) for i, p in enumerate(preds)]
    return [i for _, i in sorted(scores)]


def _iou_matrix(preds, gts, raster_res: int) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = geometry.polygon_iou(p.polygon, g.polygon, raster_res)
    return out


def greedy_match(preds, gts, iou_thresh: float, ious: Optional[np.ndarray] = None, raster_res: int = geometry.DEFAULT_RASTER_RES):
    """Return ``match[i]`` = GT index claimed by prediction ``i`` or -1."""
    if ious is None:
        ious = _iou_matrix(preds, gts, raster_res)
    match = [-1] * len(preds)
    taken = np.zeros(len(gts), dtype=bool)
    for i in _score_order(preds):
        if not len(gts):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            match[i] = j
    return match


def match_for_prf(preds, gts, iou_thresh: float = 0.5, raster_res: int = geometry.DEFAULT_RASTER_RES) -> tuple[int, int, int]:
    match = greedy_match(preds, gts, iou_thresh, raster_res=raster_res)
    tp = sum(1 for m in match if m >= 0)
    return tp, len(preds) - tp, len(gts) - tp


def average_precision(scores, is_tp, n_gt: int) -> float:
    """101-point interpolated AP of one class at one IoU threshold."""
    if n_gt == 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    # precision envelope: best precision at any recall to the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def coco_map(
    preds: Sequence[Sequence[TextInstance]],
    gts: Sequence[Sequence[TextInstance]],
    classes: Sequence[int],
    thresholds=MAP_THRESHOLDS,
    raster_res: int = geometry.DEFAULT_RASTER_RES,
) -> float:
    """mAP over ``classes`` for per-image prediction/GT lists.

    For each class and IoU threshold, predictions of all images are ranked by
    score and matched greedily per image; AP uses 101-point interpolation.
    Classes without any ground truth are skipped.
    """
    per_class = []
    for c in classes:
        img_preds = [[p for p in ps if p.class_id == c] for ps in preds]
        img_gts = [[g for g in gs if g.class_id == c] for gs in gts]
        n_gt = sum(len(g) for g in img_gts)
        if n_gt == 0:
            continue
        ious = [_iou_matrix(p, g, raster_res) for p, g in zip(img_preds, img_gts)]
        aps = []
        for t in thresholds:
            scores, flags = [], []
            for p, g, iou in zip(img_preds, img_gts, ious):
                match = greedy_match(p, g, t, iou)
                scores.extend(x.score if x.score is not None else 1.0 for x in p)
                flags.extend(m >= 0 for m in match)
            aps.append(average_precision(scores, flags, n_gt))
        per_class.append(np.mean(aps))
    return float(np.mean(per_class)) if per_class else 0.0


def instance_mask(inst: TextInstance, height: int, width: int) -> np.ndarray:
    if inst.mask_rle is not None:
        return geometry.rle_to_mask(inst.mask_rle, height, width)
    return geometry.rasterize_polygon(inst.polygon, height, width)


def page_miou(pred_records: Sequence[SampleRecord], gt_records: Sequence[SampleRecord]) -> float:
    """Mean IoU of the best-scoring page mask per image against the GT page.

    Images without a GT page are skipped; a missing prediction scores 0.
    """
    ious = []
    for pred, gt in zip(pred_records, gt_records):
        gt_pages = gt.instances_of(Granularity.PAGE)
        if not gt_pages:
            continue
        h, w = gt.height, gt.width
        gt_mask = np.zeros((h, w))
        for g in gt_pages:
            gt_mask = np.maximum(gt_mask, instance_mask(g, h, w))
        pages = pred.instances_of(Granularity.PAGE)
        if not pages:
            ious.append(0.0)
            continue
        best = pages[_score_order(pages)[0]]
        ious.append(geometry.mask_iou(instance_mask(best, h, w), gt_mask))
    return float(np.mean(ious)) if ious else 0.0


def evaluate(
    pred_records: Sequence[SampleRecord],
    gt_records: Sequence[SampleRecord],
    iou_thresh: float = 0.5,
    score_thresh: Optional[float] = None,
    num_para_classes: Optional[int] = None,
    raster_res: int = geometry.DEFAULT_RASTER_RES,
) -> EvalReport:
    """Score predictions against ground truth records, matched by ``id``.

    A granularity is only evaluated on images whose GT flag for it is 1.
    ``score_thresh`` drops low-scoring predictions before P/R/F (mAP always
    uses every prediction).
    """
    by_id = {r.id: r for r in pred_records}
    pairs = []
    for gt in gt_records:
        pred = by_id.get(gt.id)
        if pred is None:
            pred = SampleRecord(gt.id, gt.image, gt.width, gt.height, {n: 0 for n in GRANULARITY_NAMES}, [])
        pairs.append((pred, gt))

    def kept(insts):
        if score_thresh is None:
            return insts
        return [i for i in insts if i.score is None or i.score >= score_thresh]

    report = EvalReport(iou_thresh=iou_thresh, score_thresh=score_thresh)
    for level in Granularity:
        tp = fp = fn = n_img = 0
        for pred, gt in pairs:
            if not gt.flags[level.key]:
                continue
            a, b, c = match_for_prf(kept(pred.instances_of(level)), gt.instances_of(level), iou_thresh, raster_res)
            tp, fp, fn, n_img = tp + a, fp + b, fn + c, n_img + 1
        report.granularities[level.key] = PRF.from_counts(tp, fp, fn, n_img)

    para_pairs = [(p, g) for p, g in pairs if g.flags["para"]]
    if para_pairs:
        if num_para_classes is None:
            classes = sorted({i.class_id for _, g in para_pairs for i in g.instances_of(Granularity.PARA)})
        else:
            classes = list(range(num_para_classes))
        report.para_map = coco_map(
            [p.instances_of(Granularity.PARA) for p, _ in para_pairs],
            [g.instances_of(Granularity.PARA) for _, g in para_pairs],
            classes,
            raster_res=raster_res,
        )
    page_pairs = [(p, g) for p, g in pairs if g.flags["page"]]
    report.page_miou = page_miou([p for p, _ in page_pairs], [g for _, g in page_pairs])
    return report


def emit_report(report: EvalReport, path: str | os.PathLike) -> None:
    """Write ``path`` (JSON) and a plain-text table next to it (``.txt``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    path.with_suffix(".txt").write_text(report.table(), encoding="utf-8")


def load_report(path: str | os.PathLike) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_json(json.load(fh))
