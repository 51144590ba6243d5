"""Two-stage training, augmentation, evaluation and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import checkpoint as ckpt
from . import tensor as T
from .dataset import GroundTruth, SequenceSample, read_dataset, validate_sample
from .geometry import BEVGridConfig, Camera, CameraIntrinsics, Pose, rot_z, rotate_cell_vectors, warp_bev
from .losses import center_loss, flow_loss, offset_loss, seg_loss, total_loss
from .metrics import iou_per_frame, vpq_per_frame
from .model import STAGE1_GROUPS, STAGE2_GROUPS, BEVPredFormerNet, ModelConfig
from .postprocess import make_instance_prediction
from .tensor import GradTape, NumericError, ShapeError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    max_steps: Optional[int] = None
    batch_size: int = 1
    max_lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.3
    clip_norm: float = 5.0
    seed: int = 0
    # model
    c_bev: int = 32
    n_bev_layers: int = 2
    pattern: str = "TST"
    n_blocks: int = 2
    use_difference: bool = True
    grid: dict = field(default_factory=lambda: BEVGridConfig().to_dict())
    # losses
    seg_top_frac: float = 0.25
    seg_select: str = "loss"
    # augmentation
    augment_images: bool = True
    augment_bev: bool = True
    zoom_range: tuple = (0.9, 1.1)
    image_rot_deg: float = 5.0
    bev_rot_deg: float = 10.0
    bev_shift_m: float = 2.0
    # paths
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    stage1_ckpt: Optional[str] = None
    out: Optional[str] = None
    log_every: int = 0

    def __post_init__(self):
        self.zoom_range = tuple(self.zoom_range)

    def validate(self, need_paths: bool = False) -> "TrainConfig":
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if need_paths:
            if not self.train_data:
                raise ValueError("train_data path required")
            if self.stage == 2 and not self.stage1_ckpt:
                raise ValueError("stage 2 requires stage1_ckpt")
        return self

    @property
    def augment(self) -> bool:
        return self.augment_images or self.augment_bev

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def model_config(self, sample: SequenceSample) -> ModelConfig:
        return ModelConfig(grid=BEVGridConfig.from_dict(self.grid), c_bev=self.c_bev,
                           n_bev_layers=self.n_bev_layers, pattern=self.pattern,
                           n_blocks=self.n_blocks, use_difference=self.use_difference,
                           t_in=sample.t_in, t_pred=sample.gt.t_out - 2, n_cams=sample.n_cams,
                           seed=self.seed)


# ----------------------------------------------------------------- optimisation

class AdamW:
    """Adam with decoupled weight decay; ``no_decay`` parameters skip the decay term."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        skip = {id(p) for p in no_decay}
        self.decay = [id(p) not in skip for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if decay and self.weight_decay:
                p.data *= np.float32(1 - self.lr * self.weight_decay)
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)


class OneCycle:
    """Linear warm-up from ``max_lr/div`` to ``max_lr``, then cosine decay to ``max_lr/(div*final_div)``."""

    def __init__(self, max_lr: float, total_steps: int, warmup_frac: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4):
        if total_steps < 3:
            raise ValueError("one-cycle schedule needs at least three steps")
        self.max_lr = max_lr
        self.total = total_steps
        self.peak = min(max(1, int(round(warmup_frac * total_steps))), total_steps - 2)
        self.start = max_lr / div
        self.end = self.start / final_div

    def __call__(self, step: int) -> float:
        if step <= self.peak:
            return self.start + (self.max_lr - self.start) * step / self.peak
        frac = (step - self.peak) / (self.total - 1 - self.peak)
        return self.end + 0.5 * (self.max_lr - self.end) * (1 + math.cos(math.pi * min(frac, 1.0)))


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ----------------------------------------------------------------- augmentation

def _warp_image(img: np.ndarray, zoom: float, alpha: float, cx: float, cy: float) -> np.ndarray:
    """Zoom by ``zoom`` and rotate by ``alpha`` about (cx, cy); img [3,H,W]."""
    _, h, w = img.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = cols - cx, rows - cy
    ca, sa = math.cos(alpha), math.sin(alpha)
    sx = cx + (ca * dx + sa * dy) / zoom
    sy = cy + (-sa * dx + ca * dy) / zoom
    return np.stack([ndimage.map_coordinates(ch, [sy, sx], order=1, mode="nearest") for ch in img])


def augment_camera(cam: Camera, zoom: float, alpha: float) -> Camera:
    """Calibration after zooming by ``zoom`` and rotating by ``alpha`` about the principal point."""
    k = cam.intrinsics
    intr = CameraIntrinsics(k.fx * zoom, k.fy * zoom, k.cx, k.cy, k.width, k.height)
    ext = Pose(cam.extrinsic.rotation @ rot_z(alpha).T, cam.extrinsic.translation)
    return Camera(intr, ext)


def warp_ground_truth(gt: GroundTruth, theta: float, tx: float, ty: float,
                      grid: BEVGridConfig) -> GroundTruth:
    seg = np.stack([warp_bev(m, theta, tx, ty, grid, "nearest") for m in gt.seg])
    inst = np.stack([warp_bev(m, theta, tx, ty, grid, "nearest") for m in gt.instances])

    def vectors(v):
        moved = np.stack([warp_bev(f, theta, tx, ty, grid, "nearest") for f in v])
        rot = np.stack([rotate_cell_vectors(f, theta, grid) for f in moved]).astype(np.float32)
        return rot * (seg[:, None] > 0)

    cen = np.stack([warp_bev(c, theta, tx, ty, grid, "bilinear") for c in gt.centerness])
    return GroundTruth(seg, inst, vectors(gt.flow), cen.astype(np.float32), vectors(gt.offset))


def augment_sample(s: SequenceSample, rng: np.random.Generator, cfg: TrainConfig,
                   grid: Optional[BEVGridConfig] = None) -> SequenceSample:
    """Random image zoom/rotation per camera and one rigid BEV transform per sample."""
    grid = grid or BEVGridConfig.from_dict(cfg.grid)
    images, cams = s.images, list(s.cameras)
    if cfg.augment_images:
        images = images.copy()
        for c, cam in enumerate(s.cameras):
            zoom = rng.uniform(*cfg.zoom_range)
            alpha = math.radians(rng.uniform(-cfg.image_rot_deg, cfg.image_rot_deg))
            if zoom == 1.0 and alpha == 0.0:
                continue
            k = cam.intrinsics
            for t in range(s.t_in):
                images[t, c] = _warp_image(s.images[t, c], zoom, alpha, k.cx, k.cy)
            cams[c] = augment_camera(cam, zoom, alpha)
    gt, bev_pose = s.gt, s.bev_pose
    if cfg.augment_bev:
        theta = math.radians(rng.uniform(-cfg.bev_rot_deg, cfg.bev_rot_deg))
        tx, ty = rng.uniform(-cfg.bev_shift_m, cfg.bev_shift_m, size=2)
        if theta or tx or ty:
            gt = warp_ground_truth(gt, theta, tx, ty, grid)
            bev_pose = Pose.planar(tx, ty, theta).compose(bev_pose)
    return s.copy(images=images, cameras=cams, gt=gt, bev_pose=bev_pose)


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    net: BEVPredFormerNet
    losses: list
    metrics: dict
    lrs: list = field(default_factory=list)


def _total_steps(cfg: TrainConfig, n: int) -> int:
    total = cfg.epochs * math.ceil(n / cfg.batch_size)
    return min(total, cfg.max_steps) if cfg.max_steps else total


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, size):
            yield order[i:i + size]


def _optimize(params, no_decay, loss_fn: Callable, n: int, cfg: TrainConfig, tag: str) -> tuple:
    total = _total_steps(cfg, n)
    opt = AdamW(params, cfg.max_lr, weight_decay=cfg.weight_decay, no_decay=no_decay)
    sched = OneCycle(cfg.max_lr, max(total, 3), cfg.warmup_frac)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    batches = _batches(n, cfg.batch_size, rng)
    losses, lrs = [], []
    for step in range(total):
        idx = next(batches)
        for p in params:
            p.grad = None
        acc = 0.0
        for i in idx:
            try:
                with GradTape() as tape:
                    loss = loss_fn(int(i), aug_rng)
                tape.backward(loss)
            except NumericError as err:
                raise TrainingError(f"{tag}: non-finite value at step {step}, sample {int(i)}: {err}") from err
            acc += float(loss.data)
        for p in params:
            if p.grad is not None and len(idx) > 1:
                p.grad /= len(idx)
        clip_grad_norm(params, cfg.clip_norm)
        opt.lr = sched(step)
        opt.step()
        losses.append(acc / len(idx))
        lrs.append(opt.lr)
        if not math.isfinite(losses[-1]):
            raise TrainingError(f"{tag}: loss diverged at step {step}")
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("%s step %d/%d loss %.4f lr %.2e", tag, step + 1, total, losses[-1], opt.lr)
    return losses, lrs


def _prepare(cfg: TrainConfig, samples, net):
    if samples is None:
        if not cfg.train_data:
            raise ValueError("no training samples and no train_data path")
        samples = read_dataset(cfg.train_data)
    if not samples:
        raise ValueError("empty training set")
    for s in samples:
        validate_sample(s)
    if net is None:
        net = BEVPredFormerNet(cfg.model_config(samples[0]))
    grid = net.cfg.grid
    if samples[0].gt.seg.shape[1:] != (grid.H, grid.W):
        raise ShapeError(f"ground truth grid {samples[0].gt.seg.shape[1:]} != model grid {(grid.H, grid.W)}")
    return samples, net


def train_stage1(cfg: TrainConfig, samples: Optional[Sequence[SequenceSample]] = None,
                 net: Optional[BEVPredFormerNet] = None) -> TrainResult:
    """Present-frame BEV segmentation: image encoder, BEV encoder and a temporary head."""
    samples, net = _prepare(cfg, samples, net)
    net.train()
    net.requires_grad_(False)
    params = net.group_parameters(STAGE1_GROUPS)
    for p in params:
        p.requires_grad = True
    t_in = net.cfg.t_in
    refs = [None if cfg.augment else net.reference_set(s) for s in samples]

    def loss_fn(i, rng):
        s = augment_sample(samples[i], rng, cfg, net.cfg.grid) if cfg.augment else samples[i]
        logits = net.stage1_logits(net.bev_features(s, refs[i]))
        # input frames t = -1, 0 line up with the first two output frames
        return seg_loss(logits[t_in - 2:t_in], s.gt.seg[0:2], cfg.seg_top_frac, cfg.seg_select)

    no_decay = [p for p in params if p.ndim == 1]
    losses, lrs = _optimize(params, no_decay, loss_fn, len(samples), cfg, "stage1")
    return TrainResult(net, losses, evaluate_stage1(net, samples), lrs)


def stage2_loss(net: BEVPredFormerNet, refined, gt: GroundTruth, cfg: TrainConfig):
    out = net.predict_from_bev(refined)
    mask = gt.seg > 0
    parts = {"seg": seg_loss(out.seg_logits, gt.seg, cfg.seg_top_frac, cfg.seg_select),
             "flow": flow_loss(out.flow, gt.flow, mask),
             "center": center_loss(out.centerness, gt.centerness),
             "offset": offset_loss(out.offset, gt.offset, mask)}
    return total_loss(parts, net.log_vars)


def train_stage2(cfg: TrainConfig, samples: Optional[Sequence[SequenceSample]] = None,
                 net: Optional[BEVPredFormerNet] = None) -> TrainResult:
    """Temporal block and heads on top of frozen stage-1 weights."""
    if net is None:
        if not cfg.stage1_ckpt:
            raise ValueError("stage 2 requires a stage-1 checkpoint or a model")
        if samples is None:
            if not cfg.train_data:
                raise ValueError("no training samples and no train_data path")
            samples = read_dataset(cfg.train_data)
        if not samples:
            raise ValueError("empty training set")
        net = BEVPredFormerNet(cfg.model_config(samples[0]))
        load_stage1_weights(net, cfg.stage1_ckpt)
    samples, net = _prepare(cfg, samples, net)
    if not net.cfg.aux_heads:
        raise ValueError("stage 2 training needs the auxiliary heads")
    net.train()
    net.requires_grad_(False)
    params = net.group_parameters(STAGE2_GROUPS)
    for p in params:
        p.requires_grad = True

    cache = {}

    def features(i, rng):
        if cfg.augment:
            s = augment_sample(samples[i], rng, cfg, net.cfg.grid)
            return net.bev_features(s).detach(), s.gt
        if i not in cache:
            cache[i] = net.bev_features(samples[i]).detach()
        return cache[i], samples[i].gt

    def loss_fn(i, rng):
        refined, gt = features(i, rng)
        return stage2_loss(net, refined, gt, cfg).total

    no_decay = [p for p in params if p.ndim == 1]
    losses, lrs = _optimize(params, no_decay, loss_fn, len(samples), cfg, "stage2")
    return TrainResult(net, losses, evaluate(net, samples), lrs)


# ----------------------------------------------------------------- evaluation

@dataclass
class Prediction:
    seg_logits: np.ndarray     # [T_out, 2, H, W]
    flow: np.ndarray           # [T_out, 2, H, W]
    instances: np.ndarray      # [T_out, H, W]


def predict(net: BEVPredFormerNet, sample: SequenceSample) -> Prediction:
    was_training = net.training
    net.eval()
    try:
        out = net(sample)
    finally:
        net.train(was_training)
    inst = make_instance_prediction(out.seg_logits, out.flow)
    return Prediction(out.seg_logits.data, out.flow.data, inst)


def score_instances(pred_instances: Sequence[np.ndarray], gt_instances: Sequence[np.ndarray]) -> dict:
    """IoU and VPQ over t = 0..T_pred (output frames 1..T_out-1), averaged over sequences."""
    ious, vpqs = [], []
    for p, g in zip(pred_instances, gt_instances):
        ious.append(iou_per_frame(p[1:] > 0, g[1:] > 0))
        vpqs.append(vpq_per_frame(p[1:], g[1:]))
    ious, vpqs = np.array(ious), np.array(vpqs)
    return {"iou": float(ious.mean(axis=1).mean()), "vpq": float(vpqs.mean(axis=1).mean()),
            "iou_per_frame": ious.mean(axis=0).tolist(), "vpq_per_frame": vpqs.mean(axis=0).tolist(),
            "n_samples": int(len(ious))}


def evaluate(net: BEVPredFormerNet, samples: Sequence[SequenceSample]) -> dict:
    preds = [predict(net, s).instances for s in samples]
    return score_instances(preds, [s.gt.instances for s in samples])


def evaluate_stage1(net: BEVPredFormerNet, samples: Sequence[SequenceSample]) -> dict:
    """Present-frame segmentation IoU of the temporary stage-1 head."""
    t_in = net.cfg.t_in
    ious = []
    for s in samples:
        logits = net.stage1_logits(net.bev_features(s)).data[t_in - 1]
        ious.append(iou_per_frame((logits[1] > logits[0])[None], (s.gt.seg[1] > 0)[None])[0])
    return {"present_iou": float(np.mean(ious)), "n_samples": len(ious)}


# ----------------------------------------------------------------- checkpoints

def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(net: BEVPredFormerNet, path, train_cfg: Optional[TrainConfig] = None,
                    stage: Optional[int] = None, metrics: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, net.state_dict())
    meta = {"model": net.cfg.to_dict(), "stage": stage,
            "train": train_cfg.to_dict() if train_cfg else None, "metrics": metrics or {}}
    sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_checkpoint(path) -> tuple:
    """Rebuild the network described by the sidecar and load its weights."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing checkpoint config {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    net = BEVPredFormerNet(ModelConfig.from_dict(meta["model"]))
    try:
        net.load_state_dict(ckpt.load(path))
    except (KeyError, ShapeError) as err:
        raise IncompatibleCheckpointError(str(err)) from err
    return net, meta


def load_stage1_weights(net: BEVPredFormerNet, source) -> None:
    """Copy image-encoder, BEV-encoder and stage-1 head weights from a checkpoint."""
    state = ckpt.load(source) if isinstance(source, (str, Path)) else source
    wanted = {n for n, _ in net.named_parameters() if n.split(".")[0] in STAGE1_GROUPS}
    missing = sorted(wanted - set(state))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint lacks stage-1 weights, e.g. {missing[:3]}")
    try:
        net.load_state_dict({n: state[n] for n in wanted}, strict=False)
    except ShapeError as err:
        raise IncompatibleCheckpointError(str(err)) from err


# ----------------------------------------------------------------- ablation

ABLATION_PATTERNS = ("TS", "TST", "TSST")


def run_ablation(cfg: TrainConfig, train: Sequence[SequenceSample], val: Sequence[SequenceSample],
                 patterns=ABLATION_PATTERNS, blocks=(1, 2), seeds=(0,),
                 stage1_state: Optional[dict] = None) -> list:
    """Train stage 2 for each (pattern, n_blocks, seed) on a shared stage-1 model per seed.

    Returns one row per configuration with parameter counts and validation metrics.
    """
    rows = []
    for seed in seeds:
        state = stage1_state
        if state is None:
            s1 = TrainConfig.from_dict({**cfg.to_dict(), "stage": 1, "seed": seed})
            state = train_stage1(s1, train).net.state_dict()
        for pattern in patterns:
            for nb in blocks:
                c2 = TrainConfig.from_dict({**cfg.to_dict(), "stage": 2, "seed": seed,
                                            "pattern": pattern, "n_blocks": nb})
                net = BEVPredFormerNet(c2.model_config(train[0]))
                load_stage1_weights(net, state)
                res = train_stage2(c2, train, net)
                m = evaluate(res.net, val)
                rows.append({"pattern": pattern, "n_blocks": nb, "seed": seed,
                             "params": net.num_parameters(),
                             "temporal_params": net.temporal.num_parameters(),
                             "iou": m["iou"], "vpq": m["vpq"]})
    return rows


def format_ablation(rows: list) -> str:
    head = f"{'pattern':<8}{'blocks':>7}{'params':>12}{'IoU':>9}{'VPQ':>9}"
    agg = {}
    for r in rows:
        agg.setdefault((r["pattern"], r["n_blocks"]), []).append(r)
    lines = [head, "-" * len(head)]
    for (pattern, nb), rs in agg.items():
        lines.append(f"{pattern:<8}{nb:>7}{rs[0]['params']:>12}"
                     f"{np.mean([r['iou'] for r in rs]) * 100:>9.2f}{np.mean([r['vpq'] for r in rs]) * 100:>9.2f}")
    return "\n".join(lines)
