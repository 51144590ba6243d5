"""Training losses and uncertainty-weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor

LOSS_NAMES = ("seg", "flow", "center", "offset")


def _mask_array(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float32)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} != {shape}")
    return m


def seg_loss(logits: Tensor, gt, top_frac: float = 0.25, select: str = "loss") -> Tensor:
    """Cross-entropy over the top ``top_frac`` of pixels per frame.

    ``select="loss"`` keeps the pixels with the largest loss;
    ``select="confidence"`` keeps those with the most confident prediction.
    """
    gt = np.asarray(gt)
    t_n, c, h, w = logits.shape
    if gt.shape != (t_n, h, w):
        raise ShapeError(f"gt {gt.shape} does not match logits {logits.shape}")
    if select not in ("loss", "confidence"):
        raise ValueError(f"unknown selection {select!r}")
    logp = T.log_softmax(logits.permute(0, 2, 3, 1))
    onehot = np.eye(c, dtype=logp.data.dtype)[gt.astype(np.int64)]
    nll = -T.sum(logp * Tensor(onehot), axis=-1).reshape(t_n, h * w)

    n = h * w
    k = max(1, int(np.ceil(top_frac * n)))
    score = nll.data if select == "loss" else logp.data.max(axis=-1).reshape(t_n, n)
    keep = np.zeros((t_n, n), dtype=nll.data.dtype)
    top = np.argsort(-score, axis=1, kind="stable")[:, :k]
    np.put_along_axis(keep, top, 1.0, axis=1)
    return T.sum(nll * Tensor(keep)) / float(k * t_n)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    a = T.abs(x)
    quad = (a.data < beta).astype(a.data.dtype)
    q = a * Tensor(quad) + Tensor((1.0 - quad) * beta)
    return T.scalar_mul(q * q, 0.5 / beta) + a - q


def _masked_mean(per_elem: Tensor, mask: np.ndarray) -> Tensor:
    m = np.broadcast_to(mask[:, None], per_elem.shape).astype(per_elem.data.dtype)
    count = m.sum()
    if count == 0:
        return T.scalar_mul(T.sum(per_elem), 0.0)
    return T.sum(per_elem * Tensor(m)) / float(count)


def flow_loss(pred: Tensor, gt, mask, beta: float = 1.0) -> Tensor:
    """Smooth-L1 over occupied cells; ``pred``/``gt`` [T,2,H,W], ``mask`` [T,H,W]."""
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt {gt.shape} != pred {pred.shape}")
    mask = _mask_array(mask, (pred.shape[0],) + pred.shape[2:])
    return _masked_mean(smooth_l1(pred - Tensor(gt), beta), mask)


def offset_loss(pred: Tensor, gt, mask) -> Tensor:
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt {gt.shape} != pred {pred.shape}")
    mask = _mask_array(mask, (pred.shape[0],) + pred.shape[2:])
    return _masked_mean(T.abs(pred - Tensor(gt)), mask)


def center_loss(pred: Tensor, gt) -> Tensor:
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt {gt.shape} != pred {pred.shape}")
    d = pred - Tensor(gt)
    return T.mean(d * d)


@dataclass
class LossBreakdown:
    seg: float
    flow: float
    center: float
    offset: float
    weights: tuple
    total: Tensor

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in LOSS_NAMES}
        out.update({f"lambda_{n}": float(w) for n, w in zip(LOSS_NAMES, self.weights)})
        out["total"] = float(self.total.data)
        return out


def total_loss(parts, log_vars: Tensor) -> LossBreakdown:
    """sum_i exp(-s_i) * L_i + s_i for the four components in ``LOSS_NAMES`` order."""
    parts = [parts[n] for n in LOSS_NAMES] if isinstance(parts, dict) else list(parts)
    if len(parts) != len(LOSS_NAMES) or log_vars.shape != (len(LOSS_NAMES),):
        raise ShapeError("total_loss needs four components and four log-variances")
    for name, p in zip(LOSS_NAMES, parts):
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"{name} loss is not finite")
    stacked = T.stack(parts)
    weights = T.exp(-log_vars)
    total = T.sum(weights * stacked) + T.sum(log_vars)
    vals = [float(p.data) for p in parts]
    return LossBreakdown(*vals, weights=tuple(float(w) for w in weights.data), total=total)
