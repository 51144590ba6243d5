"""Multi-scale future projection and dense output heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .nn import Conv2d, ConvNormAct, Module, upsample_nearest
from .tensor import ShapeError, Tensor


@dataclass
class PredictionOutput:
    seg_logits: Tensor                 # [T_out, 2, H, W]
    flow: Tensor                       # [T_out, 2, H, W], cells (col, row)
    centerness: Optional[Tensor] = None
    offset: Optional[Tensor] = None

    @property
    def t_out(self) -> int:
        return self.seg_logits.shape[0]


class MultiScaleEncoder(Module):
    """Three levels at 1x, 1/2x and 1/4x with doubling channel widths."""

    def __init__(self, c: int, rng):
        self.levels = [ConvNormAct(c, c, 3, rng),
                       ConvNormAct(c, 2 * c, 3, rng, stride=2),
                       ConvNormAct(2 * c, 4 * c, 3, rng, stride=2)]

    def forward(self, f: Tensor) -> list:
        h, w = f.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"pyramid needs extents divisible by 4, got {h}x{w}")
        out, x = [], f
        for level in self.levels:
            x = level(x)
            out.append(x)
        return out


class FuturePredictor(Module):
    """Per scale: fold the input frames into channels, convolve out T_out maps."""

    def __init__(self, c: int, t_in: int, t_out: int, rng, n_levels: int = 3):
        self.t_in, self.t_out = t_in, t_out
        widths = [c * 2 ** i for i in range(n_levels)]
        self.convs = [Conv2d(t_in * cl, t_out * cl, 3, rng) for cl in widths]

    def forward(self, pyramid: list) -> list:
        out = []
        for conv, x in zip(self.convs, pyramid):
            t_n, cl, h, w = x.shape
            if t_n != self.t_in:
                raise ShapeError(f"predictor built for {self.t_in} frames, got {t_n}")
            y = T.gelu(conv(x.reshape(1, t_n * cl, h, w)))
            out.append(y.reshape(self.t_out, cl, h, w))
        return out


class Decoder(Module):
    """Coarse-to-fine upsample-and-add, then 1x1 output heads."""

    def __init__(self, c: int, rng, aux: bool = True):
        self.reduce2 = Conv2d(4 * c, 2 * c, 1, rng)
        self.fuse1 = ConvNormAct(2 * c, 2 * c, 3, rng)
        self.reduce1 = Conv2d(2 * c, c, 1, rng)
        self.fuse0 = ConvNormAct(c, c, 3, rng)
        self.seg = Conv2d(c, 2, 1, rng)
        self.flow = Conv2d(c, 2, 1, rng)
        self.aux = aux
        self.center = Conv2d(c, 1, 1, rng) if aux else None
        self.offset = Conv2d(c, 2, 1, rng) if aux else None

    def forward(self, pyramid: list) -> PredictionOutput:
        f0, f1, f2 = pyramid
        y = self.fuse1(upsample_nearest(self.reduce2(f2), 2) + f1)
        y = self.fuse0(upsample_nearest(self.reduce1(y), 2) + f0)
        out = PredictionOutput(self.seg(y), self.flow(y))
        if self.aux and self.training:
            out.centerness = T.sigmoid(self.center(y))
            out.offset = self.offset(y)
        return out


class PredictionHeads(Module):
    def __init__(self, c: int, t_in: int, t_out: int, rng, aux: bool = True):
        self.encoder = MultiScaleEncoder(c, rng)
        self.predictor = FuturePredictor(c, t_in, t_out, rng)
        self.decoder = Decoder(c, rng, aux)

    def forward(self, f: Tensor) -> PredictionOutput:
        return self.decoder(self.predictor(self.encoder(f)))
