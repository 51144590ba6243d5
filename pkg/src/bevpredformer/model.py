"""The full network: image encoder, BEV projection, temporal block and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bev_encoder import BEVEncoder
from .dataset import SequenceSample
from .geometry import BEVGridConfig, ReferenceSet, build_reference_set
from .heads import PredictionHeads, PredictionOutput
from .image_encoder import ImageEncoder
from .nn import Conv2d, ConvNormAct, Module, Parameter
from .temporal import BlockConfig, TemporalEncoder
from .tensor import ShapeError, Tensor

STAGE1_GROUPS = ("image_encoder", "bev_encoder", "stage1_head")
STAGE2_GROUPS = ("temporal", "heads", "log_vars")


@dataclass
class ModelConfig:
    grid: BEVGridConfig = field(default_factory=BEVGridConfig)
    c_bev: int = 32
    backbone_widths: tuple = (16, 24, 32, 64)
    n_bev_layers: int = 2
    bev_heads: int = 4
    ffn_mult: int = 4
    patch: int = 4
    token_dim: Optional[int] = None       # defaults to 2 * c_bev
    pattern: str = "TST"
    n_blocks: int = 2
    temporal_heads: int = 4
    glu_mult: int = 4
    use_difference: bool = True
    diff_kernel: int = 3
    diff_stride: int = 2
    t_in: int = 3
    t_pred: int = 4
    n_cams: int = 2
    aux_heads: bool = True
    seed: int = 0

    @property
    def t_out(self) -> int:
        return self.t_pred + 2

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.pattern, self.n_blocks, self.token_dim or 2 * self.c_bev,
                           self.temporal_heads, self.glu_mult)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        grid = BEVGridConfig.from_dict(d.pop("grid")) if "grid" in d else BEVGridConfig()
        if "backbone_widths" in d:
            d["backbone_widths"] = tuple(d["backbone_widths"])
        return cls(grid=grid, **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class Stage1Head(Module):
    """Temporary present-frame segmentation head used only while training stage 1."""

    def __init__(self, c: int, rng):
        self.block = ConvNormAct(c, c, 3, rng)
        self.out = Conv2d(c, 2, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        return self.out(self.block(f))


class BEVPredFormerNet(Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        g = cfg.grid
        self.image_encoder = ImageEncoder(rng, cfg.c_bev, cfg.backbone_widths)
        self.bev_encoder = BEVEncoder(g.H, g.W, cfg.c_bev, len(g.z_anchors), rng, cfg.n_bev_layers,
                                      cfg.bev_heads, cfg.ffn_mult)
        self.stage1_head = Stage1Head(cfg.c_bev, rng)
        self.temporal = TemporalEncoder(cfg.c_bev, cfg.block_config(), rng, cfg.patch,
                                        cfg.use_difference, cfg.diff_kernel, cfg.diff_stride)
        self.heads = PredictionHeads(cfg.c_bev, cfg.t_in, cfg.t_out, rng, cfg.aux_heads)
        self.log_vars = Parameter(np.zeros(4))

    def group_parameters(self, groups) -> list:
        return [p for name, p in self.named_parameters() if name.split(".")[0] in groups]

    def reference_set(self, sample: SequenceSample) -> ReferenceSet:
        return build_reference_set(self.cfg.grid, sample.cameras, sample.ego_poses, sample.bev_pose,
                                   n_frames=self.cfg.t_in)

    def bev_features(self, sample: SequenceSample, refs: Optional[ReferenceSet] = None) -> Tensor:
        """Refined BEV features [T_in, C, H, W] for one sample."""
        if sample.t_in != self.cfg.t_in or sample.n_cams != self.cfg.n_cams:
            raise ShapeError(f"model expects {self.cfg.t_in} frames x {self.cfg.n_cams} cameras, "
                             f"sample has {sample.t_in} x {sample.n_cams}")
        refs = refs or self.reference_set(sample)
        t_n, n_cam = sample.images.shape[:2]
        images = Tensor(sample.images.reshape((t_n * n_cam,) + sample.images.shape[2:]))
        feats = self.image_encoder(images)
        return self.bev_encoder(feats.fused, refs, feats.stride)

    def stage1_logits(self, refined: Tensor) -> Tensor:
        """Per-frame segmentation logits [T_in, 2, H, W] from refined features."""
        return self.stage1_head(refined)

    def predict_from_bev(self, refined: Tensor) -> PredictionOutput:
        return self.heads(self.temporal(refined))

    def forward(self, sample: SequenceSample, refs: Optional[ReferenceSet] = None) -> PredictionOutput:
        return self.predict_from_bev(self.bev_features(sample, refs))
