"""Difference-guided enhancement and gated divided spatio-temporal attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, upsample_nearest
from .tensor import ShapeError, Tensor

PATTERNS = {"TS": "TS", "TST": "TST", "TSST": "TSST", "none": ""}
AXES = {"T": "temporal", "S": "spatial"}


@dataclass
class BlockConfig:
    pattern: str = "TST"
    n_blocks: int = 2
    dim: int = 64
    heads: int = 4
    glu_mult: int = 4

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown block pattern {self.pattern!r}; choose from {sorted(PATTERNS)}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")

    @property
    def layer_axes(self) -> list[str]:
        return [AXES[ch] for ch in PATTERNS[self.pattern]] * self.n_blocks


class DifferenceModule(Module):
    """Adds weighted consecutive-frame differences back onto the BEV sequence.

    d_t = f_t - f_{t-1} (d_0 = 0); a weight map from the channel-mean of |d_t|
    gates a strided conv of d_t, which is upsampled and added to f_t.
    """

    def __init__(self, c: int, rng, kernel: int = 3, stride: int = 2, weight_gain: float = 4.0):
        self.stride = stride
        self.weight_conv = Conv2d(1, 1, kernel, rng, stride=stride)
        self.weight_conv.weight.data[...] = weight_gain / (kernel * kernel)
        self.diff_conv = Conv2d(c, c, kernel, rng, stride=stride, bias=False)
        self.last_weights = None

    def forward(self, f: Tensor) -> Tensor:
        t_n, c, h, w = f.shape
        if t_n < 2:
            raise ShapeError("difference features need at least two frames")
        if h % self.stride or w % self.stride:
            raise ShapeError(f"extents {h}x{w} not divisible by stride {self.stride}")
        zero = Tensor(np.zeros((1, c, h, w), dtype=f.data.dtype))
        d = T.concat([zero, f[1:] - f[:-1]], axis=0)
        mag = T.mean(T.abs(d), axis=1, keepdims=True)
        weights = T.sigmoid(self.weight_conv(mag))
        self.last_weights = weights.data
        dd = self.diff_conv(d)
        gated = dd * T.expand(weights, dd.shape)
        return f + upsample_nearest(gated, self.stride)


def sinusoidal_2d(hp: int, wp: int, dim: int) -> np.ndarray:
    """[hp*wp, dim] absolute codes: first half encodes the row, second half the column."""
    if dim % 4:
        raise ValueError("positional code width must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def enc(pos):
        ang = pos[:, None] * freqs[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rows, cols = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    return np.concatenate([enc(rows.reshape(-1).astype(float)),
                           enc(cols.reshape(-1).astype(float))], axis=1).astype(np.float32)


class PatchEmbed(Module):
    """Non-overlapping p x p patches -> linear tokens (+ positional codes)."""

    def __init__(self, c: int, patch: int, dim: int, rng, positional: bool = True):
        self.patch = patch
        self.dim = dim
        self.positional = positional
        self.proj = Linear(c * patch * patch, dim, rng)

    def forward(self, f: Tensor) -> Tensor:
        t_n, c, h, w = f.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"patch size {p} does not divide {h}x{w}")
        hp, wp = h // p, w // p
        x = f.reshape(t_n, c, hp, p, wp, p).permute(0, 2, 4, 1, 3, 5).reshape(t_n, hp * wp, c * p * p)
        tokens = self.proj(x)
        if self.positional:
            pe = sinusoidal_2d(hp, wp, self.dim).astype(tokens.data.dtype)
            tokens = tokens + Tensor(np.broadcast_to(pe, tokens.shape))
        return tokens


class Unpatch(Module):
    """Linear projection per token followed by pixel rearrangement."""

    def __init__(self, dim: int, c: int, patch: int, rng):
        self.c, self.patch = c, patch
        self.proj = Linear(dim, c * patch * patch, rng)

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        t_n = tokens.shape[0]
        p, c = self.patch, self.c
        hp, wp = h // p, w // p
        x = self.proj(tokens).reshape(t_n, hp, wp, c, p, p)
        return x.permute(0, 3, 1, 4, 2, 5).reshape(t_n, c, h, w)


class GLU(Module):
    """(x W_a) * sigmoid(x W_b), then an output projection."""

    def __init__(self, dim: int, hidden: int, rng):
        self.wa = Linear(dim, hidden, rng)
        self.wb = Linear(dim, hidden, rng)
        self.proj = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.wa(x) * T.sigmoid(self.wb(x)))


class GatedAttentionLayer(Module):
    """Pre-norm attention along one axis of a [T, N, D] token grid, then a GLU block."""

    def __init__(self, dim: int, heads: int, glu_mult: int, axis: str, rng):
        if axis not in ("temporal", "spatial"):
            raise ValueError(f"axis must be temporal or spatial, got {axis!r}")
        self.axis = axis
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.glu = GLU(dim, dim * glu_mult, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens.permute(1, 0, 2) if self.axis == "temporal" else tokens
        x = x + self.attn(self.norm1(x))
        x = x + self.glu(self.norm2(x))
        return x.permute(1, 0, 2) if self.axis == "temporal" else x


class TemporalEncoder(Module):
    """Difference module, then ``n_blocks`` repetitions of the attention pattern.

    The attention branch is added back onto the difference-enhanced map, so
    the ``"none"`` pattern reduces to the difference module alone.
    """

    def __init__(self, c: int, cfg: BlockConfig, rng, patch: int = 4, use_difference: bool = True,
                 diff_kernel: int = 3, diff_stride: int = 2):
        self.cfg = cfg
        self.difference = DifferenceModule(c, rng, diff_kernel, diff_stride) if use_difference else None
        self.embed = PatchEmbed(c, patch, cfg.dim, rng) if cfg.layer_axes else None
        self.layers = [GatedAttentionLayer(cfg.dim, cfg.heads, cfg.glu_mult, ax, rng)
                       for ax in cfg.layer_axes]
        self.unpatch = Unpatch(cfg.dim, c, patch, rng) if cfg.layer_axes else None
        self.executed: list[str] = []

    def forward(self, f: Tensor) -> Tensor:
        self.executed = []
        # a single frame has no differences to add, so it skips the module instead of failing
        use_diff = self.difference is not None and f.shape[0] > 1
        x = self.difference(f) if use_diff else f
        if not self.layers:
            return x
        h, w = x.shape[-2:]
        tokens = self.embed(x)
        for layer in self.layers:
            tokens = layer(tokens)
            self.executed.append(layer.axis)
        return x + self.unpatch(tokens, h, w)
