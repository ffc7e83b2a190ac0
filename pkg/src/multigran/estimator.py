"""scikit-learn style wrapper around the two training stages and inference."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import GRANULARITY_NAMES, SampleRecord
from .evaluation import evaluate
from .inference import DEFAULT_SCORE_THRESH, predict
from .model import ModelConfig
from .trainer import TrainConfig, load_model, save_model, train_det, train_seg


def _pairs(X, y=None) -> list[tuple[SampleRecord, np.ndarray]]:
    """Accept ``(record, raster)`` pairs, or rasters in ``X`` with records in ``y``."""
    X = list(X)
    if y is not None:
        y = list(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} images but y has {len(y)} records")
        return [(rec, np.asarray(img)) for img, rec in zip(X, y)]
    for item in X:
        if not (isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], SampleRecord)):
            raise ValueError("without y, X must hold (SampleRecord, raster) pairs")
    return X


class MultiGranularityDetector(BaseEstimator):
    """Detects words, lines, paragraphs and the page in one forward pass.

    ``fit`` runs detection training and, when ``seg_steps > 0``, the mask
    stage on frozen detection weights. ``predict`` returns one
    :class:`SampleRecord` per image with all four granularities.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`; the
    interaction factor can be ``1``, ``2``, ``3`` or ``"disabled"``.
    """

    def __init__(
        self,
        dim=128,
        heads=4,
        enc_layers=3,
        dec_layers=3,
        num_queries=32,
        poly_points=16,
        num_para_classes=5,
        interaction=1,
        det_steps=1000,
        seg_steps=0,
        base_lr=1e-4,
        seg_lr=1e-4,
        batch_size=4,
        flip_prob=0.0,
        seed=0,
        score_thresh=DEFAULT_SCORE_THRESH,
        with_masks=False,
    ):
        self.dim = dim
        self.heads = heads
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.num_queries = num_queries
        self.poly_points = poly_points
        self.num_para_classes = num_para_classes
        self.interaction = interaction
        self.det_steps = det_steps
        self.seg_steps = seg_steps
        self.base_lr = base_lr
        self.seg_lr = seg_lr
        self.batch_size = batch_size
        self.flip_prob = flip_prob
        self.seed = seed
        self.score_thresh = score_thresh
        self.with_masks = with_masks

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            num_queries=self.num_queries,
            poly_points=self.poly_points,
            num_para_classes=self.num_para_classes,
            interaction=self.interaction,
        )

    def fit(self, X, y=None):
        samples = _pairs(X, y)
        model = self._model_config()
        det_cfg = TrainConfig(
            stage="det", steps=self.det_steps, base_lr=self.base_lr, batch_size=self.batch_size,
            flip_prob=self.flip_prob, seed=self.seed, model=model,
        )
        net, rows = train_det(det_cfg, samples)
        self.det_loss_ = rows
        self.seg_loss_ = []
        if self.seg_steps:
            seg_cfg = TrainConfig(
                stage="seg", steps=self.seg_steps, base_lr=self.seg_lr, batch_size=self.batch_size,
                seed=self.seed, model=model,
            )
            net, self.seg_loss_ = train_seg(seg_cfg, samples, net=net)
        self.net_ = net
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("MultiGranularityDetector is not fitted yet; call fit first")

    def predict(self, X, y=None) -> list[SampleRecord]:
        """``X`` as in :meth:`fit`; ``y`` only supplies ids and sizes."""
        self._check_fitted()
        return predict(self.net_, _pairs(X, y), self.score_thresh, self.with_masks)

    def score(self, X, y=None) -> float:
        """Mean F-measure over the granularities annotated in the data."""
        samples = _pairs(X, y)
        report = evaluate(self.predict(samples), [rec for rec, _ in samples], score_thresh=self.score_thresh)
        used = [report.granularities[n].f1 for n in GRANULARITY_NAMES if report.granularities[n].images]
        return float(np.mean(used)) if used else 0.0

    def save(self, path) -> None:
        self._check_fitted()
        save_model(self.net_, path)

    @classmethod
    def load(cls, path, **params) -> "MultiGranularityDetector":
        net = load_model(path)
        cfg = net.cfg
        est = cls(
            dim=cfg.dim, heads=cfg.heads, enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers,
            num_queries=cfg.num_queries, poly_points=cfg.poly_points,
            num_para_classes=cfg.num_para_classes, interaction=cfg.interaction, **params,
        )
        est.net_ = net
        return est
