"""Camera-to-BEV projection by attention at geometric reference points, then UNet refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import ReferenceSet
from .nn import (ConvNormAct, ConvTranspose2d, LayerNorm, Linear, Module, MultiHeadAttention,
                 Parameter)
from .tensor import ShapeError, Tensor

STAGES = ("projected", "refined", "diff", "temporal")


@dataclass
class BEVFeatureMap:
    data: Tensor                     # [T_in, C_BEV, H, W]
    stage_tag: str
    frame_times: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage_tag not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")
        if not self.frame_times:
            n = self.data.shape[0]
            self.frame_times = list(range(-(n - 1), 1))


class BEVSelfAttention(Module):
    """Multi-head self-attention over BEV tokens, residual, post layer-norm."""

    def __init__(self, c: int, heads: int, rng):
        self.attn = MultiHeadAttention(c, heads, rng)
        self.norm = LayerNorm(c)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.attn(x))


class BEVCrossAttention(Module):
    """Each BEV token attends over features sampled at its valid reference pixels.

    Samples are indexed by (camera, height anchor) slot; a learned
    per-anchor embedding, shared across cameras, is added to the keys.
    Invalid samples get zero weight and tokens with no valid sample receive
    no update.
    """

    def __init__(self, c: int, heads: int, n_anchors: int, rng):
        self.heads = heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.o = Linear(c, c, rng)
        self.anchor_embed = Parameter(rng.standard_normal((n_anchors, c)) * 0.02)
        self.norm = LayerNorm(c)
        self.last_attention: Optional[np.ndarray] = None

    def sample(self, feats: Tensor, refs: ReferenceSet, t: int, stride: int) -> tuple:
        """Sampled features [HW, S, C] and validity [HW, S] for frame ``t``."""
        n_cam = refs.n_cams
        _, c, hf, wf = feats.shape
        nz, hw = refs.valid.shape[2], refs.valid.shape[3]
        chunks = []
        for cam in range(n_cam):
            fmap = feats[t * n_cam + cam]
            mat = refs.sampling_matrix(t, cam, (hf, wf), stride)
            chunks.append(T.bilinear_sample(fmap, None, weights=mat).reshape(nz, hw, c))
        sampled = T.concat(chunks, axis=0).permute(1, 0, 2)
        valid = refs.valid[t].reshape(n_cam * nz, hw).T
        return sampled, valid

    def forward(self, query: Tensor, sampled: Tensor, valid: np.ndarray) -> Tensor:
        hw, s, c = sampled.shape
        if query.shape != (hw, c):
            raise ShapeError(f"query {query.shape} does not match sampled layout {sampled.shape}")
        nz = self.anchor_embed.shape[0]
        if s % nz:
            raise ShapeError(f"{s} sample slots do not split into {nz} height anchors")
        h, dh = self.heads, c // self.heads
        slots = T.embedding(self.anchor_embed, np.arange(s) % nz)
        keys = self.k(sampled + T.expand(slots.reshape(1, s, c), (hw, s, c)))
        vals = self.v(sampled)
        q = self.q(query).reshape(hw, 1, h, dh).permute(0, 2, 1, 3).reshape(hw * h, 1, dh)
        k = keys.reshape(hw, s, h, dh).permute(0, 2, 3, 1).reshape(hw * h, dh, s)
        v = vals.reshape(hw, s, h, dh).permute(0, 2, 1, 3).reshape(hw * h, s, dh)
        scores = T.matmul(T.scalar_mul(q, 1.0 / np.sqrt(dh)), k)
        bias = np.where(valid > 0, 0.0, -1e9).astype(scores.data.dtype)
        bias = np.broadcast_to(bias[:, None, None, :], (hw, h, 1, s)).reshape(hw * h, 1, s)
        probs = T.softmax(scores + Tensor(bias))
        self.last_attention = probs.data.reshape(hw, h, s)
        out = T.matmul(probs, v).reshape(hw, c)
        has_valid = (valid.max(axis=1, keepdims=True) > 0).astype(out.data.dtype)
        upd = self.o(out) * Tensor(np.broadcast_to(has_valid, (hw, c)))
        return self.norm(query + upd)


class FFN(Module):
    def __init__(self, c: int, mult: int, rng):
        self.fc1 = Linear(c, c * mult, rng)
        self.fc2 = Linear(c * mult, c, rng)
        self.norm = LayerNorm(c)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(T.gelu(self.fc1(x))))


class BEVLayer(Module):
    def __init__(self, c: int, heads: int, n_anchors: int, ffn_mult: int, rng):
        self.self_attn = BEVSelfAttention(c, heads, rng)
        self.cross_attn = BEVCrossAttention(c, heads, n_anchors, rng)
        self.ffn = FFN(c, ffn_mult, rng)


class SparseUNet(Module):
    """Two-level encoder/decoder with skip concatenation, evaluated densely."""

    def __init__(self, c: int, rng):
        self.enc0 = ConvNormAct(c, c, 3, rng)
        self.enc1 = ConvNormAct(c, 2 * c, 3, rng)
        self.bottleneck = ConvNormAct(2 * c, 4 * c, 3, rng)
        self.up1 = ConvTranspose2d(4 * c, 2 * c, 2, rng, stride=2)
        self.dec1 = ConvNormAct(4 * c, 2 * c, 3, rng)
        self.up0 = ConvTranspose2d(2 * c, c, 2, rng, stride=2)
        self.dec0 = ConvNormAct(2 * c, c, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"UNet needs extents divisible by 4, got {h}x{w}")
        e0 = self.enc0(x)
        e1 = self.enc1(T.max_pool2d(e0, 2))
        b = self.bottleneck(T.max_pool2d(e1, 2))
        d1 = self.dec1(T.concat([self.up1(b), e1], axis=1))
        d0 = self.dec0(T.concat([self.up0(d1), e0], axis=1))
        return x + d0


class BEVEncoder(Module):
    """Learnable queries filled from image features, stacked ``n_layers`` times."""

    def __init__(self, h: int, w: int, c: int, n_anchors: int, rng, n_layers: int = 2,
                 heads: int = 4, ffn_mult: int = 4):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.h, self.w, self.c = h, w, c
        self.queries = Parameter(rng.standard_normal((h * w, c)) * 0.02)
        self.layers = [BEVLayer(c, heads, n_anchors, ffn_mult, rng) for _ in range(n_layers)]
        self.unet = SparseUNet(c, rng)

    def project(self, feats: Tensor, refs: ReferenceSet, stride: int) -> Tensor:
        """Projected features [T_in, C, H, W] before refinement."""
        t_n = refs.n_frames
        hw, c = self.h * self.w, self.c
        if feats.shape[0] != t_n * refs.n_cams:
            raise ShapeError(f"{feats.shape[0]} feature maps for {t_n} frames x {refs.n_cams} cameras")
        if refs.valid.shape[3] != hw:
            raise ShapeError("reference set built for a different BEV grid")
        samples = [self.layers[0].cross_attn.sample(feats, refs, t, stride) for t in range(t_n)]
        # the first self-attention sees identical queries in every frame
        shared = self.layers[0].self_attn(self.queries.reshape(1, hw, c))
        x = T.expand(shared, (t_n, hw, c))
        for i, layer in enumerate(self.layers):
            if i > 0:
                x = layer.self_attn(x)
            x = T.stack([layer.cross_attn(x[t], *samples[t]) for t in range(t_n)], axis=0)
            x = layer.ffn(x)
        return x.reshape(t_n, self.h, self.w, c).permute(0, 3, 1, 2)

    def forward(self, feats: Tensor, refs: ReferenceSet, stride: int) -> Tensor:
        return self.unet(self.project(feats, refs, stride))
