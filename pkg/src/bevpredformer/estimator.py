"""scikit-learn style wrapper around the two-stage training pipeline."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import SequenceSample, read_dataset, validate_sample
from .geometry import BEVGridConfig
from .model import BEVPredFormerNet
from .train import (TrainConfig, evaluate, load_checkpoint, load_stage1_weights, predict, save_checkpoint,
                    train_stage1, train_stage2)


def check_samples(X) -> list:
    """Accept a dataset path or a non-empty sequence of SequenceSample."""
    if isinstance(X, (str, Path)):
        X = read_dataset(X)
    if isinstance(X, SequenceSample):
        X = [X]
    try:
        X = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of SequenceSample, got {type(X).__name__}") from None
    if not X:
        raise ValueError("no samples given")
    for s in X:
        if not isinstance(s, SequenceSample):
            raise TypeError(f"expected SequenceSample, got {type(s).__name__}")
        validate_sample(s)
    return X


class BEVPredFormer(BaseEstimator):
    """Multi-camera instance prediction trained in two stages.

    ``fit`` takes samples carrying their own labels; ``y`` is ignored.
    ``predict`` returns instance maps of shape [n, T_out, H, W].
    """

    def __init__(self, c_bev=32, n_bev_layers=2, pattern="TST", n_blocks=2, use_difference=True,
                 epochs=30, stage1_steps=None, stage2_steps=None, batch_size=1, max_lr=3e-4,
                 weight_decay=0.01, augment=True, seed=0, grid=None):
        self.c_bev = c_bev
        self.n_bev_layers = n_bev_layers
        self.pattern = pattern
        self.n_blocks = n_blocks
        self.use_difference = use_difference
        self.epochs = epochs
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.seed = seed
        self.grid = grid

    def _config(self, stage: int, steps: Optional[int], samples: list) -> TrainConfig:
        grid = self.grid
        if grid is None:
            grid = samples[0].config.get("gen", {}).get("grid") or BEVGridConfig().to_dict()
        elif isinstance(grid, BEVGridConfig):
            grid = grid.to_dict()
        return TrainConfig(stage=stage, epochs=self.epochs, max_steps=steps, batch_size=self.batch_size,
                           max_lr=self.max_lr, weight_decay=self.weight_decay, seed=self.seed,
                           c_bev=self.c_bev, n_bev_layers=self.n_bev_layers, pattern=self.pattern,
                           n_blocks=self.n_blocks, use_difference=self.use_difference, grid=dict(grid),
                           augment_images=self.augment, augment_bev=self.augment).validate()

    def fit(self, X, y=None):
        samples = check_samples(X)
        cfg1 = self._config(1, self.stage1_steps, samples)
        s1 = train_stage1(cfg1, samples)
        cfg2 = self._config(2, self.stage2_steps, samples)
        net = BEVPredFormerNet(cfg2.model_config(samples[0]))
        load_stage1_weights(net, s1.net.state_dict())
        s2 = train_stage2(cfg2, samples, net)
        self.net_ = s2.net
        self.config_ = cfg2
        self.stage1_metrics_ = s1.metrics
        self.train_metrics_ = s2.metrics
        self.loss_curve_ = {"stage1": s1.losses, "stage2": s2.losses}
        self.n_steps_ = len(s1.losses) + len(s2.losses)
        return self

    def predict_outputs(self, X) -> list:
        """Raw segmentation logits, flow and instances per sample."""
        check_is_fitted(self, "net_")
        return [predict(self.net_, s) for s in check_samples(X)]

    def predict(self, X) -> np.ndarray:
        return np.stack([p.instances for p in self.predict_outputs(X)])

    def evaluate(self, X) -> dict:
        check_is_fitted(self, "net_")
        return evaluate(self.net_, check_samples(X))

    def score(self, X, y=None) -> float:
        """Mean VPQ over t = 0..T_pred."""
        return self.evaluate(X)["vpq"]

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(self.net_, path, self.config_, stage=2, metrics=self.train_metrics_)

    @classmethod
    def load(cls, path) -> "BEVPredFormer":
        net, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else TrainConfig()
        est = cls(c_bev=cfg.c_bev, n_bev_layers=cfg.n_bev_layers, pattern=cfg.pattern, n_blocks=cfg.n_blocks,
                  use_difference=cfg.use_difference, epochs=cfg.epochs, batch_size=cfg.batch_size,
                  max_lr=cfg.max_lr, weight_decay=cfg.weight_decay, augment=cfg.augment, seed=cfg.seed,
                  grid=cfg.grid)
        est.net_, est.config_ = net, cfg
        est.train_metrics_ = meta.get("metrics", {})
        return est
