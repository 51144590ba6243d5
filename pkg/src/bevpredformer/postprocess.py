"""Instance assembly from segmentation and backward flow."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy import ndimage

from .tensor import Tensor

EIGHT = np.ones((3, 3), dtype=bool)


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def connected_components(mask: np.ndarray, min_cells: int = 2) -> np.ndarray:
    """8-connected labels numbered in raster order of each component's first cell."""
    mask = np.asarray(mask).astype(bool)
    comps, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return comps.astype(np.int32)
    sizes = np.bincount(comps.ravel(), minlength=n + 1)
    keep = sizes >= min_cells
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[keep] = np.arange(1, keep.sum() + 1)
    return remap[comps]


def propagate_instances(prev: np.ndarray, seg: np.ndarray, flow: np.ndarray, min_cells: int = 2,
                        next_label: Optional[int] = None) -> np.ndarray:
    """Carry labels from ``prev`` to the cells of ``seg`` along backward flow.

    Each occupied cell looks up ``prev`` at the rounded flow target (flow is
    (col, row) in cells).  Cells that land on background or off the grid take
    the most common label already resolved inside their component; components
    with nothing resolved get a fresh label starting at ``next_label``.
    """
    prev = np.asarray(prev)
    seg = np.asarray(seg).astype(bool)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = seg.shape
    if prev.shape != seg.shape or flow.shape != (2, h, w):
        raise ValueError(f"shape mismatch: prev {prev.shape}, seg {seg.shape}, flow {flow.shape}")
    fresh = int(prev.max()) + 1 if next_label is None else int(next_label)

    out = np.zeros((h, w), dtype=np.int32)
    rows, cols = np.nonzero(seg)
    tc = np.floor(cols + flow[0, rows, cols] + 0.5).astype(np.int64)
    tr = np.floor(rows + flow[1, rows, cols] + 0.5).astype(np.int64)
    ok = (tc >= 0) & (tc < w) & (tr >= 0) & (tr < h)
    out[rows[ok], cols[ok]] = prev[tr[ok], tc[ok]]

    comps, n = ndimage.label(seg, structure=EIGHT)
    for k in range(1, n + 1):
        cells = comps == k
        unresolved = cells & (out == 0)
        if not unresolved.any():
            continue
        known = out[cells & (out > 0)]
        if known.size:
            out[unresolved] = np.bincount(known).argmax()   # ties go to the lower label
        elif cells.sum() >= min_cells:
            out[unresolved] = fresh
            fresh += 1
    return out


def make_instance_prediction(seg_logits, flow, min_cells: int = 2) -> np.ndarray:
    """[T_out, 2, H, W] logits and [T_out, 2, H, W] flow -> [T_out, H, W] labels.

    Frame 0 is labeled by connected components; later frames inherit labels
    in forward time order.
    """
    logits, fl = _np(seg_logits), _np(flow)
    if logits.ndim != 4 or logits.shape[1] != 2 or fl.shape != logits.shape:
        raise ValueError(f"expected [T,2,H,W] logits and flow, got {logits.shape} / {fl.shape}")
    masks = logits[:, 1] > logits[:, 0]
    labels = np.zeros(masks.shape, dtype=np.int32)
    labels[0] = connected_components(masks[0], min_cells)
    next_label = int(labels[0].max()) + 1
    for t in range(1, len(masks)):
        labels[t] = propagate_instances(labels[t - 1], masks[t], fl[t], min_cells, next_label)
        next_label = max(next_label, int(labels[t].max()) + 1)
    return labels


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map ids to 1..K in order of first appearance (raster, then time)."""
    flat = labels.ravel()
    ids, first = np.unique(flat[flat > 0], return_index=True)
    order = ids[np.argsort(first)]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels]
