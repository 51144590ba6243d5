"""Occupancy IoU and video panoptic quality over a predicted sequence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MATCH_IOU = 0.5


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ValueError(f"expected [T,H,W] sequences, got {pred.shape}")
    return pred, gt


def iou_per_frame(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    p, g = pred > 0, gt > 0
    inter = (p & g).sum(axis=(1, 2)).astype(np.float64)
    union = (p | g).sum(axis=(1, 2)).astype(np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def iou_metric(pred, gt) -> float:
    """Mean per-frame occupancy IoU; an empty-vs-empty frame scores 1."""
    return float(iou_per_frame(pred, gt).mean())


def _pair_ious(pf: np.ndarray, gf: np.ndarray) -> tuple:
    """IoU of every overlapping (pred id, gt id) pair, plus the id sets of each side."""
    p_ids, p_area = np.unique(pf[pf > 0], return_counts=True)
    g_ids, g_area = np.unique(gf[gf > 0], return_counts=True)
    pa, ga = dict(zip(p_ids.tolist(), p_area.tolist())), dict(zip(g_ids.tolist(), g_area.tolist()))
    both = (pf > 0) & (gf > 0)
    pairs, inter = np.unique(np.stack([pf[both], gf[both]]), axis=1, return_counts=True)
    out = {}
    for (p, g), n in zip(pairs.T.tolist(), inter.tolist()):
        out[(p, g)] = n / (pa[p] + ga[g] - n)
    return out, set(pa), set(ga)


@dataclass
class VPQFrame:
    tp: list = field(default_factory=list)     # (pred id, gt id, iou)
    fp: set = field(default_factory=set)
    fn: set = field(default_factory=set)

    @property
    def score(self) -> float:
        denom = len(self.tp) + 0.5 * len(self.fp) + 0.5 * len(self.fn)
        return 1.0 if denom == 0 else sum(i for _, _, i in self.tp) / denom


def vpq_match(pred, gt, threshold: float = MATCH_IOU) -> list:
    """Per-frame TP/FP/FN under a persistent id correspondence.

    Unassigned ids are matched greedily (highest IoU first, lower gt id on
    ties) whenever their IoU exceeds ``threshold``; once made, a pairing is
    kept for the rest of the sequence.
    """
    pred, gt = _check(pred, gt)
    p2g, g2p = {}, {}
    frames = []
    for pf, gf in zip(pred, gt):
        ious, p_ids, g_ids = _pair_ious(pf, gf)
        cands = sorted(((iou, g, p) for (p, g), iou in ious.items()
                        if iou > threshold and p not in p2g and g not in g2p),
                       key=lambda c: (-c[0], c[1], c[2]))
        for iou, g, p in cands:
            if p not in p2g and g not in g2p:
                p2g[p], g2p[g] = g, p
        fr = VPQFrame()
        for p in sorted(p_ids):
            g = p2g.get(p)
            iou = ious.get((p, g), 0.0)
            if g in g_ids and iou > threshold:
                fr.tp.append((p, g, iou))
        fr.fp = p_ids - {p for p, _, _ in fr.tp}
        fr.fn = g_ids - {g for _, g, _ in fr.tp}
        frames.append(fr)
    return frames


def vpq_per_frame(pred, gt, threshold: float = MATCH_IOU) -> np.ndarray:
    return np.array([f.score for f in vpq_match(pred, gt, threshold)])


def vpq_metric(pred, gt, threshold: float = MATCH_IOU) -> float:
    """Frame-averaged sum of TP IoUs over (|TP| + |FP|/2 + |FN|/2)."""
    return float(vpq_per_frame(pred, gt, threshold).mean())
