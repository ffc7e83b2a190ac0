"""One-to-one assignment and the multi-granularity detection objective."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import GRANULARITY_NAMES, Granularity, SampleRecord
from . import geometry
from .numeric import PROB_CLAMP

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
WEIGHT_CLASS = 1.0
WEIGHT_L1 = 5.0
WEIGHT_GIOU = 2.0
WEIGHT_POLY = 5.0


# --- per-sample task weights --------------------------------------------------

def granularity_weights(flags: Sequence[int]) -> tuple[float, float, float, float]:
    """Loss weight per granularity from the 0/1 annotation flags.

    Unannotated granularities get 0; annotated ones share weight equally,
    so a lone annotated granularity gets 1.
    """
    flags = [int(f) for f in flags]
    if len(flags) != 4 or any(f not in (0, 1) for f in flags):
        raise ValueError(f"flags must be four 0/1 values, got {flags}")
    total = sum(flags)
    if total == 0:
        return (0.0, 0.0, 0.0, 0.0)
    if total == 1:
        return tuple(float(f) for f in flags)
    return tuple(f / total for f in flags)


# --- Hungarian -----------------------------------------------------------------

@dataclass
class Assignment:
    pairs: list[tuple[int, int]]

    @property
    def rows(self) -> list[int]:
        return [r for r, _ in self.pairs]

    @property
    def cols(self) -> list[int]:
        return [c for _, c in self.pairs]

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return float(sum(cost[r, c] for r, c in self.pairs))


def _shortest_augmenting_path(a: np.ndarray):
    """Min-cost assignment of every row of ``a`` (rows <= cols).

    Returns ``(col_of_row, u, v)`` with dual potentials such that
    ``a - u[:, None] - v[None, :] >= 0`` and is zero on the assignment.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _min_total(a: np.ndarray) -> float:
    if a.shape[0] == 0:
        return 0.0
    cols, _, _ = _shortest_augmenting_path(a)
    return float(sum(a[i, c] for i, c in enumerate(cols)))


def _solve_rows(a: np.ndarray) -> list[int]:
    """Optimal columns for each row (rows <= cols), smallest feasible column first."""
    n, m = a.shape
    cols, u, v = _shortest_augmenting_path(a)
    best = float(sum(a[i, c] for i, c in enumerate(cols)))
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    tol = 1e-9 * scale * max(n, 1)
    reduced = a - u[:, None] - v[None, :]
    chosen: list[int] = []
    fixed_sum = 0.0
    avail = list(range(m))
    for i in range(n):
        current = int(cols[i])
        for j in avail:
            if abs(reduced[i, j]) > tol:
                continue
            if j == current:
                break
            rest_cols = [c for c in avail if c != j]
            rest = a[i + 1 :][:, rest_cols]
            sub_total = _min_total(rest)
            if fixed_sum + a[i, j] + sub_total <= best + tol:
                if rest.shape[0]:
                    sub_cols = _shortest_augmenting_path(rest)[0]
                    for k, c in enumerate(sub_cols):
                        cols[i + 1 + k] = rest_cols[int(c)]
                cols[i] = j
                current = j
                break
        chosen.append(current)
        fixed_sum += a[i, current]
        avail.remove(current)
    return chosen


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    Ties are broken deterministically: walking the shorter side in index
    order, each index takes the smallest partner index that still allows an
    optimal completion (for ``n <= m`` this is the lexicographically smallest
    pair list).
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = a.shape
    if n == 0 or m == 0:
        return Assignment([])
    if n <= m:
        cols = _solve_rows(a)
        return Assignment([(i, c) for i, c in enumerate(cols)])
    rows = _solve_rows(a.T)
    return Assignment(sorted((r, j) for j, r in enumerate(rows)))


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive reference: first minimum in lexicographic enumeration order."""
    a = np.asarray(cost, dtype=np.float64)
    n, m = a.shape
    best, best_pairs = np.inf, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(a[i, c] for i, c in enumerate(perm))
            if total < best:
                best, best_pairs = total, [(i, c) for i, c in enumerate(perm)]
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(a[r, j] for j, r in enumerate(perm))
            if total < best:
                best, best_pairs = total, sorted((r, j) for j, r in enumerate(perm))
    return Assignment(best_pairs)


# --- box helpers (torch) ---------------------------------------------------------

def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU between every box of ``a`` ``(N, 4)`` and ``b`` ``(M, 4)``, xyxy."""
    a, b = a[:, None], b[None, :]
    return _giou(a, b)


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _giou(a, b)


def _giou(a, b):
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    iou = inter / union
    return iou - (hull - union) / hull


# --- losses --------------------------------------------------------------------

def focal_terms(logits: torch.Tensor, targets: torch.Tensor, alpha: Optional[float] = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Element-wise sigmoid focal loss; ``alpha=None`` disables class balancing."""
    targets = targets.to(logits.dtype)
    p = logits.sigmoid()
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = loss * (alpha * targets + (1 - alpha) * (1 - targets))
    return loss


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: Optional[float] = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Focal loss summed over classes and averaged over queries; ``logits`` is ``(N, K)``."""
    if logits.shape[0] == 0:
        return logits.sum() * 0
    return focal_terms(logits, targets, alpha, gamma).sum(-1).mean()


def match_cost(logits: torch.Tensor, boxes: torch.Tensor, gt_labels: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """``(N, M)`` matching cost: focal class term + 5 x box L1 + 2 x (1 - GIoU)."""
    with torch.no_grad():
        p = logits.sigmoid().clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * (-torch.log(p))
        neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-torch.log(1 - p))
        cost_class = (pos - neg)[:, gt_labels]
        cost_l1 = torch.cdist(boxes, gt_boxes.to(boxes.dtype), p=1)
        cost_giou = 1 - pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes.to(boxes.dtype)))
        return WEIGHT_CLASS * cost_class + WEIGHT_L1 * cost_l1 + WEIGHT_GIOU * cost_giou


@dataclass
class LevelTarget:
    labels: torch.Tensor     # (M,)
    boxes: torch.Tensor      # (M, 4) cx, cy, w, h normalized
    polygons: torch.Tensor   # (M, K, 2) normalized


@dataclass
class SampleTarget:
    flags: tuple[int, int, int, int]
    levels: list[LevelTarget]


def build_target(record: SampleRecord, poly_points: int, dtype=torch.float32) -> SampleTarget:
    scale = np.array([record.width, record.height], dtype=np.float64)
    levels = []
    for level in Granularity:
        insts = record.instances_of(level)
        labels, boxes, polys = [], [], []
        for inst in insts:
            box = inst.bbox
            cx, cy, w, h = geometry.aabox_to_cxcywh(box)
            boxes.append([cx / scale[0], cy / scale[1], w / scale[0], h / scale[1]])
            polys.append(geometry.resample_polygon(inst.polygon, poly_points) / scale)
            labels.append(inst.class_id)
        levels.append(
            LevelTarget(
                torch.as_tensor(labels, dtype=torch.long),
                torch.as_tensor(np.array(boxes).reshape(-1, 4), dtype=dtype),
                torch.as_tensor(np.array(polys).reshape(-1, poly_points, 2), dtype=dtype),
            )
        )
    return SampleTarget(record.flag_vector(), levels)


@dataclass
class LossReport:
    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weights: list[tuple[float, float, float, float]] = field(default_factory=list)

    def level_total(self, level: str) -> float:
        return self.terms.get(f"{level}/total", 0.0)


def level_loss(outputs, level: int, b: int, target: LevelTarget, terms: dict, weight: float):
    """Loss of one granularity of one sample, summed over decoder layers."""
    total = 0.0
    last = len(outputs) - 1
    name = GRANULARITY_NAMES[level]
    for li, out in enumerate(outputs):
        logits = out.logits[level][b]
        boxes = out.boxes[level][b]
        m = target.labels.numel()
        onehot = torch.zeros_like(logits)
        if m:
            cost = match_cost(logits, boxes, target.labels, target.boxes)
            assign = hungarian(cost.cpu().numpy())
            rows = torch.as_tensor(assign.rows, dtype=torch.long)
            cols = torch.as_tensor(assign.cols, dtype=torch.long)
            onehot[rows, target.labels[cols]] = 1
        cls = focal_loss(logits, onehot)
        layer_total = WEIGHT_CLASS * cls
        parts = {"class": cls}
        if m:
            pb = boxes[rows]
            gb = target.boxes[cols].to(pb.dtype)
            l1 = (pb - gb).abs().sum(-1).mean()
            giou = (1 - elementwise_giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))).mean()
            layer_total = layer_total + WEIGHT_L1 * l1 + WEIGHT_GIOU * giou
            parts.update(box_l1=l1, giou=giou)
            if li == last and out.polygons is not None:
                pp = out.polygons[level][b][rows]
                gp = target.polygons[cols].to(pp.dtype)
                poly = (pp - gp).abs().sum(-1).mean()
                layer_total = layer_total + WEIGHT_POLY * poly
                parts["polygon"] = poly
        for key, value in parts.items():
            k = f"{name}/{key}"
            terms[k] = terms.get(k, 0.0) + weight * float(value.detach())
        total = total + layer_total
    return total


def det_loss(outputs, targets: Sequence[SampleTarget]) -> LossReport:
    """Weighted multi-granularity loss averaged over the samples of a batch.

    ``outputs`` is the per-layer list of :class:`~multigran.decoder.LayerOutput`
    for a batch aligned with ``targets``. Granularities whose flag is 0 are
    never touched, so their heads receive no gradient from that sample.
    """
    terms: dict[str, float] = {}
    weights = []
    totals = []
    for b, target in enumerate(targets):
        w = granularity_weights(target.flags)
        weights.append(w)
        sample_total = outputs[0].boxes[0].sum() * 0
        for level in range(4):
            if w[level] == 0:
                continue
            lt = level_loss(outputs, level, b, target.levels[level], terms, w[level] / len(targets))
            terms[f"{GRANULARITY_NAMES[level]}/total"] = (
                terms.get(f"{GRANULARITY_NAMES[level]}/total", 0.0) + float(lt.detach()) * w[level] / len(targets)
            )
            sample_total = sample_total + w[level] * lt
        totals.append(sample_total)
    total = torch.stack(totals).mean() if totals else torch.zeros(())
    return LossReport(total, terms, weights)
