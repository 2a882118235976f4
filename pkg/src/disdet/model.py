"""Detector with shared and private feature paths.

Layout: a small fixed base encoder E_b feeds a shared encoder E_s and a
private encoder E_p that end on the same stride-8 grid. A fully
convolutional 2-channel domain classifier D_glb reads either path. The
detection side is a stride-8 Faster-RCNN: RPN over 9 anchors per cell,
ROIAlign to 7x7, a flatten+3-FC instance MLP with a nonnegative output,
and linear class/box heads. Inference uses the shared path only.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import boxes as B
from .config import ModelConfig
from .errors import ConfigError
from .synthdata import ImageSample


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x, lam: float):
    """Identity forward; backward multiplies the gradient by -lam."""
    if lam < 0:
        raise ValueError(f"grl lambda must be >= 0, got {lam}")
    return _GradReverse.apply(x, lam)


@dataclass
class FeatureBundle:
    f_sha_s: torch.Tensor  # C x h x w
    f_sha_t: torch.Tensor
    f_pri_s: torch.Tensor
    f_pri_t: torch.Tensor


@dataclass
class InstanceFeatureSet:
    i_sha_s: torch.Tensor  # N x D, all entries >= 0
    i_sha_t: torch.Tensor
    i_pri_s: torch.Tensor
    i_pri_t: torch.Tensor
    roi_boxes: dict  # stream name -> ndarray of boxes actually pooled


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


@dataclass
class RpnOut:
    obj_logits: torch.Tensor  # (num_anchors,) in grid-anchor order
    deltas: torch.Tensor  # (num_anchors, 4)
    anchors: np.ndarray
    proposals: np.ndarray  # (N, 4) decoded, clipped, NMS-kept
    scores: np.ndarray


@dataclass
class HeadOut:
    cls_logits: torch.Tensor  # (n_roi, C+1)
    reg_deltas: torch.Tensor  # (n_roi, 4)
    rois: np.ndarray
    labels: np.ndarray  # (n_roi,) class ids, background = C
    reg_targets: np.ndarray  # (n_fg, 4) for the first n_fg rois
    n_fg: int


def image_tensor(x) -> torch.Tensor:
    """ImageSample or HxWx3 array -> (3, H, W) float tensor."""
    pixels = x.pixels if isinstance(x, ImageSample) else x
    arr = np.asarray(pixels, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(module.weight, mean=0.0, std=0.01)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)


class RpnHead(nn.Module):
    def __init__(self, channels, num_anchors):
        super().__init__()
        self.conv = _conv(channels, channels)
        self.obj = nn.Conv2d(channels, num_anchors, kernel_size=1)
        self.reg = nn.Conv2d(channels, num_anchors * 4, kernel_size=1)
        self.num_anchors = num_anchors

    def forward(self, feature):
        # feature: (C, h, w); outputs flattened in (row, col, anchor) order
        h = F.relu(self.conv(feature.unsqueeze(0)))
        obj = self.obj(h)[0]
        reg = self.reg(h)[0]
        a = self.num_anchors
        fh, fw = obj.shape[-2:]
        obj_flat = obj.permute(1, 2, 0).reshape(-1)
        reg_flat = reg.view(a, 4, fh, fw).permute(2, 3, 0, 1).reshape(-1, 4)
        return obj_flat, reg_flat


class DetectorModel(nn.Module):
    """All trainable parts plus the box machinery around them."""

    def __init__(self, cfg: ModelConfig, num_classes: int, seed: int = 0):
        super().__init__()
        cfg.validate()
        if num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
        self.cfg = cfg
        self.num_classes = num_classes

        def c(base):
            return max(1, int(round(base * cfg.width_mult)))

        feat = c(512)
        self.e_b = nn.Sequential(
            _conv(3, c(64)), nn.ReLU(), _conv(c(64), c(256)), nn.ReLU(), nn.MaxPool2d(2)
        )
        self.e_s = nn.Sequential(
            _conv(c(256), c(256)), nn.ReLU(), _conv(c(256), c(256)), nn.ReLU(),
            nn.MaxPool2d(2),
            _conv(c(256), feat), nn.ReLU(), _conv(feat, feat), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        # conv-pool-conv-pool-conv, widths 256/512/512 scaled
        self.e_p = nn.Sequential(
            _conv(c(256), c(256)), nn.ReLU(), nn.MaxPool2d(2),
            _conv(c(256), feat), nn.ReLU(), nn.MaxPool2d(2),
            _conv(feat, feat), nn.ReLU(),
        )
        # 512-512-256-128-64-2 scaled; last layer always 2 channels
        self.d_glb = nn.Sequential(
            _conv(feat, c(512)), nn.ReLU(), _conv(c(512), c(256)), nn.ReLU(),
            _conv(c(256), c(128)), nn.ReLU(), _conv(c(128), c(64)), nn.ReLU(),
            _conv(c(64), 2),
        )
        num_anchors = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.rpn = RpnHead(feat, num_anchors)
        mlp_in = feat * cfg.roi_size * cfg.roi_size
        self.mlp = nn.Sequential(
            nn.Flatten(),
            nn.Linear(mlp_in, cfg.mlp_hidden), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.instance_dim), nn.ReLU(),
        )
        self.cls_head = nn.Linear(cfg.instance_dim, num_classes + 1)
        self.reg_head = nn.Linear(cfg.instance_dim, 4)
        # 2-way discriminator over instance-mean vectors (ins-td variant only)
        self.d_ins = nn.Sequential(
            nn.Linear(cfg.instance_dim, c(256)), nn.ReLU(), nn.Linear(c(256), 2)
        )
        torch.manual_seed(seed)
        self.apply(_init_weights)
        # The encoder stacks stand in for a pretrained backbone and train
        # from scratch; under the flat 0.01 head init their forward signal
        # decays ~30x per layer and nothing downstream can learn. Scaled
        # init keeps feature magnitudes O(1) through the encoders and the
        # domain classifier's hidden convs. Output heads keep the 0.01
        # init they would get on top of a real backbone, so the domain
        # game still opens from near-uniform predictions.
        hidden_dglb = [m for m in self.d_glb.modules() if isinstance(m, nn.Conv2d)][:-1]
        for mod in list(self.e_b.modules()) + list(self.e_s.modules()) + \
                list(self.e_p.modules()) + hidden_dglb:
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)
        self.e_b_frozen = False
        self._check_paths()

    def _check_paths(self):
        with torch.no_grad():
            x = torch.zeros(1, 3, 32, 32)
            base = self.e_b(x)
            sha, pri = self.e_s(base), self.e_p(base)
        if sha.shape != pri.shape:
            raise ConfigError(
                f"shared and private paths disagree: {tuple(sha.shape)} vs {tuple(pri.shape)}"
            )
        if 32 // sha.shape[-1] != self.cfg.stride:
            raise ConfigError(
                f"encoder stride {32 // sha.shape[-1]} does not match cfg.stride {self.cfg.stride}"
            )

    def freeze_base(self):
        for p in self.e_b.parameters():
            p.requires_grad_(False)
        self.e_b_frozen = True

    def base_features(self, x) -> torch.Tensor:
        t = image_tensor(x).unsqueeze(0)
        if self.e_b_frozen:
            with torch.no_grad():
                return self.e_b(t)[0]
        return self.e_b(t)[0]

    def shared(self, base: torch.Tensor) -> torch.Tensor:
        return self.e_s(base.unsqueeze(0))[0]

    def private(self, base: torch.Tensor) -> torch.Tensor:
        return self.e_p(base.unsqueeze(0))[0]

    def domain_logits(self, feature: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        """2-channel domain logit map; detach_params stops gradients into
        D_glb's weights while still passing them to the feature."""
        if not detach_params:
            return self.d_glb(feature.unsqueeze(0))[0]
        x = feature.unsqueeze(0)
        for layer in self.d_glb:
            if isinstance(layer, nn.Conv2d):
                x = F.conv2d(
                    x, layer.weight.detach(), layer.bias.detach(),
                    stride=layer.stride, padding=layer.padding,
                )
            else:
                x = layer(x)
        return x[0]


def forward_global(model: DetectorModel, x_s, x_t) -> FeatureBundle:
    """Shared and private features for one source and one target image."""
    base_s = model.base_features(x_s)
    base_t = model.base_features(x_t)
    return FeatureBundle(
        f_sha_s=model.shared(base_s),
        f_sha_t=model.shared(base_t),
        f_pri_s=model.private(base_s),
        f_pri_t=model.private(base_t),
    )


def roi_align(feature: torch.Tensor, rois, out_size: int, spatial_scale: float) -> torch.Tensor:
    """ROIAlign with 2x2 regular samples per bin, averaged.

    feature: (C, h, w); rois: (N, 4) in image coordinates. Samples use the
    pixel-center convention and a zero-padded border. A degenerate axis
    collapses to the box center, replicating that sample.
    """
    c, fh, fw = feature.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4) * spatial_scale
    n = len(rois)
    if n == 0:
        return feature.new_zeros((0, c, out_size, out_size))
    m = 2 * out_size
    frac = (np.arange(m) + 0.5) / m
    x1, y1 = rois[:, 0:1], rois[:, 1:2]
    w = rois[:, 2:3] - x1
    h = rois[:, 3:4] - y1
    sx = np.where(w > 0.0, x1 + frac[None, :] * w, x1 + 0.5 * w)  # (N, m)
    sy = np.where(h > 0.0, y1 + frac[None, :] * h, y1 + 0.5 * h)
    # grid_sample with align_corners=False places pixel centers at
    # ((2i+1)/size - 1) in normalized coords, i.e. g = 2*coord/size - 1
    gx = torch.from_numpy(2.0 * sx / fw - 1.0).to(feature.dtype)
    gy = torch.from_numpy(2.0 * sy / fh - 1.0).to(feature.dtype)
    grid = torch.stack(
        [gx[:, None, :].expand(n, m, m), gy[:, :, None].expand(n, m, m)], dim=-1
    )
    inp = feature.unsqueeze(0).expand(n, c, fh, fw)
    samples = F.grid_sample(inp, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return F.avg_pool2d(samples, kernel_size=2)


def rpn_propose(
    model: DetectorModel, feature: torch.Tensor, image_size: tuple[int, int], training: bool
) -> RpnOut:
    """Proposals from one feature map; always returns at least one box."""
    cfg = model.cfg
    fh, fw = feature.shape[-2:]
    anchors = B.grid_anchors(fh, fw, cfg.stride, cfg.anchor_scales, cfg.anchor_ratios)
    obj_flat, reg_flat = model.rpn(feature)
    height, width = image_size

    # proposal coordinates are constants downstream; gradients stop here
    scores = torch.sigmoid(obj_flat.detach()).numpy().astype(np.float64)
    deltas = reg_flat.detach().numpy().astype(np.float64)
    decoded = B.clip_boxes(B.loc2bbox(anchors, deltas), height, width)
    ws = decoded[:, 2] - decoded[:, 0]
    hs = decoded[:, 3] - decoded[:, 1]
    valid = np.flatnonzero((ws >= cfg.rpn_min_size) & (hs >= cfg.rpn_min_size))
    boxes_v, scores_v = decoded[valid], scores[valid]
    order = np.argsort(-scores_v, kind="stable")[: cfg.rpn_pre_nms_topk]
    boxes_v, scores_v = boxes_v[order], scores_v[order]
    keep = B.nms(boxes_v, scores_v, cfg.rpn_nms)
    topk = cfg.rpn_train_topk if training else cfg.rpn_test_topk
    keep = keep[:topk]
    proposals, kept_scores = boxes_v[keep], scores_v[keep]
    if len(proposals) == 0:  # whole-image fallback keeps downstream sets nonempty
        proposals = np.array([[0.0, 0.0, float(width), float(height)]])
        kept_scores = np.zeros(1)
    return RpnOut(
        obj_logits=obj_flat, deltas=reg_flat, anchors=anchors,
        proposals=proposals, scores=kept_scores,
    )


def instance_vectors(model: DetectorModel, feature: torch.Tensor, proposals) -> torch.Tensor:
    """ROIAlign then the instance MLP; rows follow proposal order."""
    pooled = roi_align(feature, proposals, model.cfg.roi_size, 1.0 / model.cfg.stride)
    return model.mlp(pooled)


def sample_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray, cfg: ModelConfig, rng):
    """Pick anchors to train the RPN on.

    Foreground = IoU >= rpn_fg_iou, plus the best anchor for every gt box.
    Background = IoU <= rpn_bg_iou. Returns (fg_idx, bg_idx, reg_targets).
    """
    n = len(anchors)
    if len(gt_boxes) == 0:
        bg_pool = np.arange(n)
        bg = rng.choice(bg_pool, size=min(cfg.rpn_batch, n), replace=False)
        return np.empty(0, dtype=np.int64), bg.astype(np.int64), np.empty((0, 4))
    iom = B.iou_matrix(anchors, gt_boxes)
    best_iou = iom.max(axis=1)
    best_gt = iom.argmax(axis=1)
    fg_mask = best_iou >= cfg.rpn_fg_iou
    # every gt keeps its single best anchor even below the threshold
    fg_mask[iom.argmax(axis=0)] = True
    bg_mask = best_iou <= cfg.rpn_bg_iou
    bg_mask &= ~fg_mask
    fg_pool = np.flatnonzero(fg_mask)
    bg_pool = np.flatnonzero(bg_mask)
    n_fg = min(len(fg_pool), int(round(cfg.rpn_batch * cfg.rpn_fg_fraction)))
    fg = rng.choice(fg_pool, size=n_fg, replace=False) if n_fg else np.empty(0, dtype=np.int64)
    n_bg = min(len(bg_pool), cfg.rpn_batch - n_fg)
    bg = rng.choice(bg_pool, size=n_bg, replace=False) if n_bg else np.empty(0, dtype=np.int64)
    fg = np.sort(fg.astype(np.int64))
    bg = np.sort(bg.astype(np.int64))
    reg_targets = B.bbox2loc(anchors[fg], gt_boxes[best_gt[fg]]) if len(fg) else np.empty((0, 4))
    return fg, bg, reg_targets


def sample_head_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                     cfg: ModelConfig, num_classes: int, rng):
    """Pick ROIs to train the detection head on; gt boxes join the pool.

    Returns (rois, labels, reg_targets, n_fg) with foreground rows first
    and background labeled num_classes.
    """
    if len(gt_boxes):
        pool = np.concatenate([proposals, gt_boxes], axis=0)
        iom = B.iou_matrix(pool, gt_boxes)
        best_iou = iom.max(axis=1)
        best_gt = iom.argmax(axis=1)
        fg_pool = np.flatnonzero(best_iou >= cfg.head_fg_iou)
        bg_pool = np.flatnonzero(best_iou < cfg.head_fg_iou)
    else:
        pool = proposals
        best_gt = np.zeros(len(pool), dtype=np.int64)
        fg_pool = np.empty(0, dtype=np.int64)
        bg_pool = np.arange(len(pool))
    n_fg = min(len(fg_pool), int(round(cfg.head_batch * cfg.head_fg_fraction)))
    fg = rng.choice(fg_pool, size=n_fg, replace=False) if n_fg else np.empty(0, dtype=np.int64)
    n_bg = cfg.head_batch - n_fg
    if len(bg_pool) == 0:
        bg = np.empty(0, dtype=np.int64)
    elif len(bg_pool) >= n_bg:
        bg = rng.choice(bg_pool, size=n_bg, replace=False)
    else:
        bg = rng.choice(bg_pool, size=n_bg, replace=True)
    fg = np.sort(fg.astype(np.int64))
    bg = np.sort(bg.astype(np.int64))
    idx = np.concatenate([fg, bg])
    rois = pool[idx]
    labels = np.full(len(idx), num_classes, dtype=np.int64)
    if len(fg):
        labels[: len(fg)] = gt_classes[best_gt[fg]]
    reg_targets = B.bbox2loc(rois[: len(fg)], gt_boxes[best_gt[fg]]) if len(fg) else np.empty((0, 4))
    return rois, labels, reg_targets, len(fg)


def detect(model: DetectorModel, image) -> list[Detection]:
    """Inference on one image through the shared path only."""
    cfg = model.cfg
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    height, width = pixels.shape[:2]
    with torch.no_grad():
        base = model.e_b(image_tensor(pixels).unsqueeze(0))[0]
        feature = model.e_s(base.unsqueeze(0))[0]
        rpn_out = rpn_propose(model, feature, (height, width), training=False)
        vectors = instance_vectors(model, feature, rpn_out.proposals)
        probs = torch.softmax(model.cls_head(vectors), dim=1).numpy().astype(np.float64)
        deltas = model.reg_head(vectors).numpy().astype(np.float64)
    decoded = B.clip_boxes(B.loc2bbox(rpn_out.proposals, deltas), height, width)
    found: list[Detection] = []
    for cls in range(model.num_classes):
        scores = probs[:, cls]
        keep = np.flatnonzero(scores >= cfg.det_score_floor)
        if len(keep) == 0:
            continue
        kept = B.nms(decoded[keep], scores[keep], cfg.det_nms)
        for i in keep[kept]:
            x1, y1, x2, y2 = decoded[i]
            if x2 <= x1 or y2 <= y1:
                continue
            found.append(Detection((float(x1), float(y1), float(x2), float(y2)), cls, float(scores[i])))
    found.sort(key=lambda d: (-d.score, d.class_id))
    return found[: cfg.det_max_dets]
