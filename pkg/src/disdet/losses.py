"""Training objectives: detection, adversarial alignment, global triplet
disentanglement, instance similarity disentanglement, and the two
instance-level design variants.

Every function here is criterion math on tensors already produced by the
model; gradient-reversal wiring happens in the train step. All losses are
dtype-agnostic so precision tests can run them in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainAbortError
from .model import HeadOut, InstanceFeatureSet, RpnOut, grl, sample_rpn_targets

# probability floor for losses taking explicit probabilities; the domain
# CE works in logit space instead, which is floor-exact for any finite
# logits and, unlike a clamp, never zeroes the gradient of a saturated
# wrong prediction (a clamp-induced flat spot proved sticky in training)
EPS = 1e-7


@dataclass(frozen=True)
class LossReport:
    l_det: float
    l_di: float
    l_ds: float
    l_tri: float
    l_gtd: float
    l_isd_intra: float
    l_isd_inter: float
    l_isd: float
    l_variant: float
    l_total: float

    FIELDS = (
        "l_det", "l_di", "l_ds", "l_tri", "l_gtd",
        "l_isd_intra", "l_isd_inter", "l_isd", "l_variant", "l_total",
    )


def domain_cross_entropy(pred: torch.Tensor, domain: int) -> torch.Tensor:
    """Mean spatial cross-entropy of a 2-channel logit map vs a domain label."""
    if pred.shape[0] != 2:
        raise ValueError(f"expected a 2-channel prediction map, got shape {tuple(pred.shape)}")
    return -F.log_softmax(pred, dim=0)[domain].mean()


def softmax_distance(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """Mean over locations of the squared distance between per-location softmaxes."""
    if logits_a.shape != logits_b.shape or logits_a.shape[0] != 2:
        raise ValueError(
            f"need matching 2xhxw maps, got {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}"
        )
    pa = torch.softmax(logits_a, dim=0)
    pb = torch.softmax(logits_b, dim=0)
    return ((pa - pb) ** 2).sum(dim=0).mean()


def loss_di(pred_sha_s: torch.Tensor, pred_sha_t: torch.Tensor) -> torch.Tensor:
    """Adversarial domain CE on shared-path predictions (source = 0)."""
    return domain_cross_entropy(pred_sha_s, 0) + domain_cross_entropy(pred_sha_t, 1)


def loss_ds(pred_pri_s: torch.Tensor, pred_pri_t: torch.Tensor) -> torch.Tensor:
    """Domain CE on private-path predictions; same form, no reversal."""
    return domain_cross_entropy(pred_pri_s, 0) + domain_cross_entropy(pred_pri_t, 1)


def loss_tri(pred_ss, pred_st, pred_ps, pred_pt, m: float) -> torch.Tensor:
    """Two hinges pulling shared predictions together and away from private ones."""
    d_shared = softmax_distance(pred_ss, pred_st)
    hinge_s = torch.clamp(d_shared - softmax_distance(pred_ss, pred_ps) + m, min=0.0)
    hinge_t = torch.clamp(d_shared - softmax_distance(pred_st, pred_pt) + m, min=0.0)
    return 0.5 * (hinge_s + hinge_t)


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a.b / (|a||b|); zero vectors score 0 and push no gradient."""
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        return a.new_zeros(())
    return (a * b).sum() / (na * nb)


def loss_isd(instances: InstanceFeatureSet) -> tuple[torch.Tensor, torch.Tensor]:
    """ROI-mean each stream, then cosine terms.

    intra: shared-vs-private within each domain; inter: private across
    domains. Both are minimized directly.
    """
    m_sha_s = instances.i_sha_s.mean(dim=0)
    m_sha_t = instances.i_sha_t.mean(dim=0)
    m_pri_s = instances.i_pri_s.mean(dim=0)
    m_pri_t = instances.i_pri_t.mean(dim=0)
    l_intra = cosine_sim(m_sha_s, m_pri_s) + cosine_sim(m_sha_t, m_pri_t)
    l_inter = cosine_sim(m_pri_s, m_pri_t)
    return l_intra, l_inter


def loss_det(rpn_out: RpnOut, head_out: HeadOut, gt_boxes: np.ndarray, cfg, rng) -> torch.Tensor:
    """Faster-RCNN objective, each term averaged over its sampled set."""
    fg, bg, reg_targets = sample_rpn_targets(rpn_out.anchors, gt_boxes, cfg, rng)
    idx = np.concatenate([fg, bg])
    logits = rpn_out.obj_logits[torch.from_numpy(idx)]
    labels = torch.zeros(len(idx), dtype=rpn_out.obj_logits.dtype)
    labels[: len(fg)] = 1.0
    total = F.binary_cross_entropy_with_logits(logits, labels, reduction="mean")
    if len(fg):
        pred = rpn_out.deltas[torch.from_numpy(fg)]
        tgt = torch.from_numpy(reg_targets).to(pred.dtype)
        total = total + F.smooth_l1_loss(pred, tgt, reduction="sum") / len(fg)
    cls_labels = torch.from_numpy(head_out.labels)
    total = total + F.cross_entropy(head_out.cls_logits, cls_labels, reduction="mean")
    if head_out.n_fg:
        pred = head_out.reg_deltas[: head_out.n_fg]
        tgt = torch.from_numpy(head_out.reg_targets).to(pred.dtype)
        total = total + F.smooth_l1_loss(pred, tgt, reduction="sum") / head_out.n_fg
    return total


def variant_ins_simmax(instances: InstanceFeatureSet) -> torch.Tensor:
    """Pull cross-domain shared instance means toward cosine similarity 1."""
    return 1.0 - cosine_sim(instances.i_sha_s.mean(dim=0), instances.i_sha_t.mean(dim=0))


def variant_ins_td(instances: InstanceFeatureSet, d_ins, m: float, lam: float) -> torch.Tensor:
    """Adversarial + domain CE + triplet, on instance means through d_ins."""
    v_ss = instances.i_sha_s.mean(dim=0)
    v_st = instances.i_sha_t.mean(dim=0)
    v_ps = instances.i_pri_s.mean(dim=0)
    v_pt = instances.i_pri_t.mean(dim=0)
    p_ss = d_ins(grl(v_ss, lam)).reshape(2, 1, 1)
    p_st = d_ins(grl(v_st, lam)).reshape(2, 1, 1)
    p_ps = d_ins(v_ps).reshape(2, 1, 1)
    p_pt = d_ins(v_pt).reshape(2, 1, 1)
    adv = domain_cross_entropy(p_ss, 0) + domain_cross_entropy(p_st, 1)
    spec = domain_cross_entropy(p_ps, 0) + domain_cross_entropy(p_pt, 1)
    return adv + spec + loss_tri(p_ss, p_st, p_ps, p_pt, m)


def _as_float(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach().item())
    return float(value)


def total_loss(parts: dict, flags) -> tuple[LossReport, torch.Tensor]:
    """Assemble the unweighted total and its float-side report.

    `parts` holds torch scalars for the enabled terms; terms a flag
    disables are absent (or None) and enter the report as exactly 0. The
    returned tensor is the optimization target; the report does its sums
    in python float64 so the bookkeeping identities are exact.
    """
    def part(name, disabled):
        v = parts.get(name)
        if disabled or v is None:
            return None
        return v

    enabled = {
        "l_det": part("l_det", False),
        "l_di": part("l_di", flags.no_di),
        "l_ds": part("l_ds", flags.no_gtd or flags.no_ds),
        "l_tri": part("l_tri", flags.no_gtd or flags.no_tri),
        "l_isd_intra": part("l_isd_intra", flags.no_isd or flags.no_intra or flags.variant != "none"),
        "l_isd_inter": part("l_isd_inter", flags.no_isd or flags.no_inter or flags.variant != "none"),
        "l_variant": part("l_variant", flags.variant == "none"),
    }
    tensors = [v for v in enabled.values() if v is not None]
    if not tensors:
        raise ValueError("no loss terms enabled")
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t

    f = {k: (_as_float(v) if v is not None else 0.0) for k, v in enabled.items()}
    l_gtd = f["l_ds"] + f["l_tri"]
    l_isd = f["l_isd_intra"] + f["l_isd_inter"]
    l_total = f["l_det"] + f["l_di"] + l_gtd + l_isd + f["l_variant"]
    report = LossReport(
        l_det=f["l_det"], l_di=f["l_di"], l_ds=f["l_ds"], l_tri=f["l_tri"], l_gtd=l_gtd,
        l_isd_intra=f["l_isd_intra"], l_isd_inter=f["l_isd_inter"], l_isd=l_isd,
        l_variant=f["l_variant"], l_total=l_total,
    )
    for name in LossReport.FIELDS:
        if not np.isfinite(getattr(report, name)):
            raise TrainAbortError(f"loss term {name} is not finite")
    return report, total
