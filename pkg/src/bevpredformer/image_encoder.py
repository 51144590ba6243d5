"""Convolutional backbone and fusion neck for per-camera image features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConvNormAct, Module, upsample_nearest
from .tensor import ShapeError, Tensor


@dataclass
class ImageFeatures:
    fused: Tensor   # [(T_in*N_cam), C_F, H/stride, W/stride]
    stride: int


class Backbone(Module):
    """Four stride-2 conv-norm-gelu stages; returns the stride-8 and stride-16 maps."""

    def __init__(self, rng: np.random.Generator, widths=(16, 24, 32, 64)):
        chans = (3,) + tuple(widths)
        self.stages = [ConvNormAct(chans[i], chans[i + 1], 3, rng, stride=2) for i in range(4)]

    @property
    def out_channels(self) -> tuple:
        return self.stages[2].conv.weight.shape[0], self.stages[3].conv.weight.shape[0]

    def forward(self, images: Tensor):
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"image extents {h}x{w} must be divisible by 16")
        x = images
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[2], feats[3]


class Neck(Module):
    """Upsample the coarse map, concatenate, then two conv-norm-act blocks."""

    def __init__(self, c8: int, c16: int, c_out: int, rng: np.random.Generator):
        self.block1 = ConvNormAct(c8 + c16, c_out, 3, rng)
        self.block2 = ConvNormAct(c_out, c_out, 3, rng)

    def forward(self, feat8: Tensor, feat16: Tensor) -> Tensor:
        if feat8.shape[0] != feat16.shape[0]:
            raise ShapeError(f"batch mismatch {feat8.shape[0]} vs {feat16.shape[0]}")
        up = upsample_nearest(feat16, 2)
        return self.block2(self.block1(T.concat([feat8, up], axis=1)))


class ImageEncoder(Module):
    stride = 8

    def __init__(self, rng: np.random.Generator, c_out: int = 32, widths=(16, 24, 32, 64)):
        self.backbone = Backbone(rng, widths)
        c8, c16 = self.backbone.out_channels
        self.neck = Neck(c8, c16, c_out, rng)

    def forward(self, images: Tensor) -> ImageFeatures:
        """``images`` [B, 3, H, W] with B = T_in * N_cam."""
        feat8, feat16 = self.backbone(images)
        return ImageFeatures(self.neck(feat8, feat16), self.stride)
