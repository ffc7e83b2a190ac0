"""Two-stage training: detection first, then the prompt-conditioned segmenter
on frozen detection features.

Both stages use AdamW, a step schedule that multiplies the learning rate by
0.1 at each drop point (fractions of the run), global-norm gradient clipping
and a fixed sampling order derived from the seed. Loss logs are CSV files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import geometry
from .corpus import GRANULARITY_NAMES, SampleRecord, flip_augment
from .matching import build_target, det_loss
from .model import ModelConfig, MultiGranularityNet, images_to_tensor
from .numeric import CheckpointError, load_checkpoint, load_into, save_checkpoint, seed_everything
from .segmentation import polygons_to_prompts, seg_loss

log = logging.getLogger(__name__)

CONFIG_KEY = "__config__"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "det"
    steps: int = 1000
    base_lr: float = 1e-4
    lr_drops: tuple[float, ...] = (0.55, 0.825)
    weight_decay: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    clip_norm: float = 0.1
    flip_prob: float = 0.0
    prompt_jitter: float = 0.02
    log_every: int = 1
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.lr_drops = tuple(self.lr_drops)
        self.validate()

    def validate(self) -> None:
        if self.stage not in ("det", "seg"):
            raise ValueError(f"stage must be 'det' or 'seg', got {self.stage!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        drops = list(self.lr_drops)
        if any(not 0 < d < 1 for d in drops) or drops != sorted(set(drops)):
            raise ValueError(f"lr_drops must be increasing fractions in (0, 1), got {drops}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def drop_steps(total: int, drops: Sequence[float]) -> list[int]:
    return [int(round(d * total)) for d in drops]


def lr_at(step: int, total: int, base_lr: float, drops: Sequence[float]) -> float:
    """Learning rate at 0-based ``step``: ``base * 0.1 ** (#drop points reached)``."""
    passed = sum(step >= s for s in drop_steps(total, drops))
    return base_lr * 0.1**passed


# --- checkpoints -----------------------------------------------------------------

def save_model(net: MultiGranularityNet, path) -> None:
    tensors = dict(net.state_dict())
    blob = json.dumps(net.cfg.to_dict(), sort_keys=True).encode("utf-8")
    tensors[CONFIG_KEY] = torch.frombuffer(bytearray(blob), dtype=torch.uint8)
    save_checkpoint(tensors, path)


def load_model(path, dtype=torch.float32) -> MultiGranularityNet:
    tensors = load_checkpoint(path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: no model config stored")
    cfg = ModelConfig.from_dict(json.loads(bytes(tensors.pop(CONFIG_KEY).tolist()).decode("utf-8")))
    net = MultiGranularityNet(cfg).to(dtype)
    load_into(net, tensors)
    return net


# --- shared loop pieces -------------------------------------------------------------

class BatchSampler:
    """Reshuffles the index set every epoch with a generator seeded from ``seed``."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < min(self.batch_size, self.n):
            if not self._order:
                self._order = self.rng.permutation(self.n).tolist()
            out.append(self._order.pop(0))
        return out


def _write_log(path: Optional[Path], header: Sequence[str], rows: list[list]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def _clip_and_step(params, opt, clip_norm: float) -> None:
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, clip_norm)
    opt.step()


# --- stage 1 ----------------------------------------------------------------------

DET_LOG_HEADER = ["step", "lr", "total"] + list(GRANULARITY_NAMES)


def train_det(
    config: TrainConfig,
    samples: Sequence[tuple[SampleRecord, np.ndarray]],
    out_dir=None,
    net: Optional[MultiGranularityNet] = None,
) -> tuple[MultiGranularityNet, list[list]]:
    """Train the detection branch; returns the model and the loss-log rows.

    Samples with no annotated granularity are skipped. A non-finite loss
    aborts the run with :class:`TrainingError`; the last periodic checkpoint
    on disk is left untouched.
    """
    seed_everything(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if net is None:
        net = MultiGranularityNet(config.model)
    usable = [s for s in samples if any(s[0].flag_vector())]
    if not usable:
        raise TrainingError("no sample has any annotated granularity")
    k = config.model.poly_points
    params = [p for _, p in net.det_parameters()]
    opt = torch.optim.AdamW(params, lr=config.base_lr, weight_decay=config.weight_decay)
    sampler = BatchSampler(len(usable), config.batch_size, config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    rows: list[list] = []
    net.train()
    for step in range(config.steps):
        lr = lr_at(step, config.steps, config.base_lr, config.lr_drops)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = [usable[i] for i in sampler.next()]
        if config.flip_prob > 0:
            batch = [flip_augment(*s) if aug_rng.random() < config.flip_prob else s for s in batch]
        images = images_to_tensor([r for _, r in batch])
        targets = [build_target(rec, k) for rec, _ in batch]
        outputs = net.detect(images)
        last = outputs[-1]
        finite = all(torch.isfinite(t).all() for t in last.logits + last.boxes)
        report = det_loss(outputs, targets) if finite else None
        if report is None or not torch.isfinite(report.total):
            _write_log(out / "det_loss.csv" if out else None, DET_LOG_HEADER, rows)
            raise TrainingError(f"non-finite detection loss at step {step}")
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        _clip_and_step(params, opt, config.clip_norm)
        if step % config.log_every == 0 or step == config.steps - 1:
            rows.append(
                [step, _fmt(lr), _fmt(report.total.item())]
                + [_fmt(report.level_total(n)) for n in GRANULARITY_NAMES]
            )
            log.debug("det step %d loss %.5f", step, report.total.item())
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            save_model(net, out / "det.ckpt")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_model(net, out / "det.ckpt")
        _write_log(out / "det_loss.csv", DET_LOG_HEADER, rows)
    return net, rows


# --- stage 2 ----------------------------------------------------------------------

SEG_LOG_HEADER = ["step", "lr", "total"]


def seg_targets(rec: SampleRecord, k: int):
    """All annotated polygons of a record as normalized prompts plus GT masks."""
    polys = [inst.polygon for inst in rec.instances]
    prompts = polygons_to_prompts(polys, rec.width, rec.height, k)
    masks = np.stack([geometry.rasterize_polygon(p, rec.height, rec.width) for p in polys]) if polys else np.zeros((0, rec.height, rec.width))
    return prompts, torch.as_tensor(masks, dtype=torch.float32)


def freeze_detection(net: MultiGranularityNet) -> None:
    for _, p in net.det_parameters():
        p.requires_grad_(False)


def train_seg(
    config: TrainConfig,
    samples: Sequence[tuple[SampleRecord, np.ndarray]],
    det_checkpoint=None,
    out_dir=None,
    net: Optional[MultiGranularityNet] = None,
) -> tuple[MultiGranularityNet, list[list]]:
    """Train FPN, prompt encoder and mask decoder with detection weights frozen.

    Prompts are the ground-truth polygons with every vertex jittered
    uniformly by up to ``prompt_jitter`` of the image size.
    """
    seed_everything(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if net is None:
        if det_checkpoint is None:
            raise TrainingError("train_seg needs a detection checkpoint or a model")
        net = load_model(det_checkpoint)
    freeze_detection(net)
    usable = [s for s in samples if s[0].instances]
    if not usable:
        raise TrainingError("no sample has any annotated instance to prompt with")
    k = net.cfg.poly_points
    params = [p for _, p in net.seg_parameters()]
    opt = torch.optim.AdamW(params, lr=config.base_lr, weight_decay=config.weight_decay)
    sampler = BatchSampler(len(usable), config.batch_size, config.seed)
    jitter_rng = torch.Generator().manual_seed(config.seed)
    cache = {}
    rows: list[list] = []
    net.train()
    net.backbone.eval()
    for step in range(config.steps):
        lr = lr_at(step, config.steps, config.base_lr, config.lr_drops)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = sampler.next()
        batch = [usable[i] for i in idx]
        with torch.no_grad():
            pyr = net.pyramid(images_to_tensor([r for _, r in batch]))
        fused = net.fused(pyr)
        losses = []
        for b, i in enumerate(idx):
            if i not in cache:
                cache[i] = seg_targets(usable[i][0], k)
            prompts, masks = cache[i]
            noise = (torch.rand(prompts.shape, generator=jitter_rng) * 2 - 1) * config.prompt_jitter
            pred = net.segment(fused[b], (prompts + noise).clamp(0, 1))
            probs = pred.full_resolution(masks.shape[-2], masks.shape[-1])
            losses.append(seg_loss(probs, pred.iou_score, masks))
        total = torch.stack(losses).mean()
        if not torch.isfinite(total):
            _write_log(out / "seg_loss.csv" if out else None, SEG_LOG_HEADER, rows)
            raise TrainingError(f"non-finite segmentation loss at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        _clip_and_step(params, opt, config.clip_norm)
        if step % config.log_every == 0 or step == config.steps - 1:
            rows.append([step, _fmt(lr), _fmt(total.item())])
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            save_model(net, out / "seg.ckpt")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_model(net, out / "seg.ckpt")
        _write_log(out / "seg_loss.csv", SEG_LOG_HEADER, rows)
    return net, rows
