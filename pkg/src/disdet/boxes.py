"""Box utilities: IoU, greedy NMS, delta encode/decode, anchor grids.

Boxes are (x1, y1, x2, y2) arrays in pixel coordinates, x1 < x2, y1 < y2.
Everything here is plain numpy; gradients never flow through box math.
"""
from __future__ import annotations

import numpy as np


def iou(a, b) -> float:
    """IoU of two single boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    """Greedy NMS. Suppresses IoU strictly above thresh; ties keep lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.empty(0, dtype=np.int64)
    # stable sort so equal scores fall back to original index order
    order = np.argsort(-scores, kind="stable")
    keep = []
    while len(order) > 0:
        i = order[0]
        keep.append(int(i))
        if len(order) == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ious <= thresh]
    return np.asarray(keep, dtype=np.int64)


def bbox2loc(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Encode target boxes as (dx, dy, dw, dh) deltas relative to anchors."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    eps = np.finfo(np.float64).eps
    aw = np.maximum(aw, eps)
    ah = np.maximum(ah, eps)
    return np.stack(
        [(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


# cap on dw/dh before exp; keeps decoded boxes finite under wild predictions
DELTA_CLIP = float(np.log(1000.0 / 16.0))


def loc2bbox(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Decode deltas against anchors: cx' = cx + dx*w, w' = w*exp(dw)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], DELTA_CLIP))
    h = ah * np.exp(np.minimum(deltas[:, 3], DELTA_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes


def base_anchors(scales, ratios) -> np.ndarray:
    """Zero-centered anchors, scale-major then ratio order, shape (S*R, 4)."""
    out = []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            out.append([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h])
    return np.asarray(out, dtype=np.float64)


def grid_anchors(feat_h: int, feat_w: int, stride: int, scales, ratios) -> np.ndarray:
    """All anchors on a feature grid, shape (feat_h*feat_w*A, 4).

    Flattening order is (row, col, anchor), matching a (A, H, W) head output
    permuted to (H, W, A) and reshaped.
    """
    base = base_anchors(scales, ratios)
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    shift_y, shift_x = np.meshgrid(cy, cx, indexing="ij")
    shifts = np.stack(
        [shift_x.ravel(), shift_y.ravel(), shift_x.ravel(), shift_y.ravel()], axis=1
    )
    anchors = shifts[:, None, :] + base[None, :, :]
    return anchors.reshape(-1, 4)
