"""Evaluation: detection mAP@0.5 plus domain-distance diagnostics.

The distance side quantifies how separable two feature sets are: the Proxy
A-distance trains a linear logistic domain classifier and maps its test
error through 2(1-2e); the EMD solves the exact assignment problem between
equal-size samples. Heatmaps average features over channels for visual
inspection.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import boxes as B
from .errors import StatsError
from .model import DetectorModel, detect, image_tensor, instance_vectors, rpn_propose
from .synthdata import ImageSample

EMD_CAP = 256


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    n_images: int
    n_objects: int
    pad_global: float | None = None
    pad_instance: float | None = None
    emd_global: float | None = None
    emd_instance: float | None = None
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["warnings"] = list(self.warnings)
        return d


def _average_precision(matches: list[bool], n_gt: int) -> float:
    """All-point interpolated AP from an ordered TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP undefined with zero ground truth")
    if not matches:
        return 0.0
    tp = np.cumsum(np.asarray(matches, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(matches, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, then area under the recall steps
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def compute_map(
    detections: dict, truths: dict, num_classes: int, iou_thresh: float = 0.5
) -> tuple[dict, float]:
    """Per-class AP and their mean.

    detections: image id -> list of Detection (order = per-image rank).
    truths: image id -> list of BoxAnnotation. Classes without any ground
    truth get AP None and are excluded from the mean.
    """
    per_class: dict = {}
    defined = []
    for cls in range(num_classes):
        gt_by_img = {
            img: [a for a in anns if a.class_id == cls] for img, anns in truths.items()
        }
        n_gt = sum(len(v) for v in gt_by_img.values())
        if n_gt == 0:
            per_class[cls] = None
            continue
        rows = []
        for img, dets in detections.items():
            for idx, d in enumerate(dets):
                if d.class_id == cls:
                    rows.append((-d.score, str(img), idx, d))
        rows.sort(key=lambda r: r[:3])
        matched: dict = {img: np.zeros(len(v), dtype=bool) for img, v in gt_by_img.items()}
        flags = []
        for _, img, _, det in rows:
            gts = gt_by_img.get(img, [])
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(gts):
                if matched[img][j]:
                    continue
                v = B.iou(det.box, g.box)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_thresh:
                matched[img][best_j] = True
                flags.append(True)
            else:
                flags.append(False)
        ap = _average_precision(flags, n_gt)
        per_class[cls] = ap
        defined.append(ap)
    if not defined:
        raise StatsError("no class has ground truth; mAP undefined")
    return per_class, float(np.mean(defined))


def evaluate_detection(model: DetectorModel, samples: list[ImageSample]) -> EvalReport:
    detections = {s.id: detect(model, s) for s in samples}
    truths = {s.id: list(s.annotations) for s in samples}
    per_class, map_value = compute_map(detections, truths, model.num_classes)
    return EvalReport(
        per_class_ap=per_class,
        map=map_value,
        n_images=len(samples),
        n_objects=sum(len(s.annotations) for s in samples),
    )


def proxy_a_distance(
    feats_s: np.ndarray, feats_t: np.ndarray, seed: int = 0,
    epochs: int = 500, lr: float = 0.1,
) -> float:
    """2(1-2e) for the held-out error e of a linear logistic domain classifier.

    Per-domain 50/50 split (seeded), features standardized by train-half
    statistics, zero-init weights, full-batch gradient descent. The error
    enters as-is; the clamp to [0, 2] absorbs worse-than-chance classifiers.
    """
    feats_s = np.asarray(feats_s, dtype=np.float64)
    feats_t = np.asarray(feats_t, dtype=np.float64)
    if len(feats_s) < 20 or len(feats_t) < 20:
        raise StatsError(
            f"need >= 20 samples per domain, got {len(feats_s)} and {len(feats_t)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def split(x):
        perm = rng.permutation(len(x))
        half = len(x) // 2
        return x[perm[:half]], x[perm[half:]]

    s_tr, s_te = split(feats_s)
    t_tr, t_te = split(feats_t)
    x_tr = np.concatenate([s_tr, t_tr])
    y_tr = np.concatenate([np.zeros(len(s_tr)), np.ones(len(t_tr))])
    x_te = np.concatenate([s_te, t_te])
    y_te = np.concatenate([np.zeros(len(s_te)), np.ones(len(t_te))])

    mu = x_tr.mean(axis=0)
    sd = np.maximum(x_tr.std(axis=0), 1e-8)
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd

    w = np.zeros(x_tr.shape[1])
    b = 0.0
    n = len(x_tr)
    for _ in range(epochs):
        z = x_tr @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - y_tr
        w -= lr * (x_tr.T @ g) / n
        b -= lr * g.mean()
    err = float(np.mean(((x_te @ w + b) > 0.0) != y_te))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def emd(feats_s: np.ndarray, feats_t: np.ndarray, seed: int = 0) -> float:
    """Exact assignment cost between equal-size samples, Euclidean ground
    distance, normalized by the sample count. Subsamples with the seed when
    a side exceeds the cap."""
    a = np.asarray(feats_s, dtype=np.float64)
    b = np.asarray(feats_t, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"sample counts differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise StatsError("empty feature sets")
    if len(a) > EMD_CAP:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        a = a[rng.choice(len(a), size=EMD_CAP, replace=False)]
        b = b[rng.choice(len(b), size=EMD_CAP, replace=False)]
    cost = cdist(a, b, metric="euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


def shared_feature(model: DetectorModel, sample) -> torch.Tensor:
    with torch.no_grad():
        base = model.e_b(image_tensor(sample).unsqueeze(0))
        return model.e_s(base)[0]


def private_feature(model: DetectorModel, sample) -> torch.Tensor:
    with torch.no_grad():
        base = model.e_b(image_tensor(sample).unsqueeze(0))
        return model.e_p(base)[0]


def collect_features(
    model: DetectorModel,
    samples: list[ImageSample],
    level: str,
    per_class_cap: int = 100,
    seed: int = 0,
    stream: str = "sha",
) -> tuple[np.ndarray, list[str]]:
    """Feature matrix for one dataset.

    global: per-image spatial mean of the stream's map (rows = images).
    instance: MLP vectors of test-time proposals matching a ground-truth
    box at IoU >= 0.5, bucketed by class and capped with a seeded choice.
    Returns (matrix, warnings).
    """
    if level not in ("global", "instance"):
        raise ValueError(f"level must be 'global' or 'instance', got {level!r}")
    feat_fn = shared_feature if stream == "sha" else private_feature
    warnings: list[str] = []
    if level == "global":
        rows = [feat_fn(model, s).mean(dim=(1, 2)).numpy() for s in samples]
        return np.asarray(rows, dtype=np.float64), warnings

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    buckets: dict[int, list[np.ndarray]] = {c: [] for c in range(model.num_classes)}
    for s in samples:
        if not s.annotations:
            continue
        size = s.pixels.shape[:2]
        with torch.no_grad():
            fmap = feat_fn(model, s)
            proposals = rpn_propose(model, fmap, size, training=False).proposals
            vectors = instance_vectors(model, fmap, proposals).numpy()
        gt = np.array([a.box for a in s.annotations], dtype=np.float64)
        gt_cls = [a.class_id for a in s.annotations]
        iom = B.iou_matrix(proposals, gt)
        best = iom.argmax(axis=1)
        for i in range(len(proposals)):
            if iom[i, best[i]] >= 0.5:
                buckets[gt_cls[best[i]]].append(vectors[i])
    rows = []
    for cls in range(model.num_classes):
        got = buckets[cls]
        if not got:
            warnings.append(f"class {cls}: no matched instances, skipped")
            continue
        arr = np.asarray(got, dtype=np.float64)
        if len(arr) > per_class_cap:
            arr = arr[rng.choice(len(arr), size=per_class_cap, replace=False)]
        rows.append(arr)
    if not rows:
        raise StatsError("no instance features matched any ground truth")
    return np.concatenate(rows, axis=0), warnings


def minmax_to_255(arr: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 255]; a constant map goes to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo) * 255.0


def export_feature_heatmap(feature, image) -> np.ndarray:
    """Channel-mean heat layer blended 0.5/0.5 over the image, uint8 HxWx3."""
    fmap = feature.detach().numpy() if isinstance(feature, torch.Tensor) else np.asarray(feature)
    heat = minmax_to_255(fmap.mean(axis=0))
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    height, width = pixels.shape[:2]
    heat_img = Image.fromarray(heat.astype(np.float32), mode="F")
    heat_big = np.asarray(heat_img.resize((width, height), Image.BILINEAR), dtype=np.float64)
    blend = 0.5 * pixels.astype(np.float64) * 255.0 + 0.5 * heat_big[:, :, None]
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)
