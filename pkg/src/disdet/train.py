"""Training loop: paired source/target steps, SGD with momentum, two-phase
learning rate, base-encoder warmup then freeze, checkpointing, resume.

Target annotations are stripped when the dataset is loaded for training and
the step itself refuses a target sample that still carries any, so no
adaptation code path can read them.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import ModelConfig, TrainConfig, build_configs, config_hash, config_to_dict
from .errors import CheckpointError, ConfigError, LeakGuardError
from .model import (
    DetectorModel,
    FeatureBundle,
    HeadOut,
    InstanceFeatureSet,
    forward_global,
    grl,
    instance_vectors,
    rpn_propose,
    sample_head_rois,
)
from .synthdata import ImageSample, load_dataset

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("step", "lr") + L.LossReport.FIELDS + ("wall_s",)

# proposals per stream fed to the instance MLP for set-level losses
ISD_ROI_CAP = 32


@dataclass
class TrainState:
    iter: int
    rng: np.random.Generator  # drives anchor/ROI sampling
    optimizer: torch.optim.Optimizer


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iter {it} outside [0, {cfg.total_iters})")
    boundary = math.ceil(cfg.phase_split * cfg.total_iters)
    return cfg.lr_phase1 if it < boundary else cfg.lr_phase2


def grl_coefficient(it: int, cfg: TrainConfig, peak: float) -> float:
    """Reversal strength at iteration it.

    Under "ramp" the coefficient rises from 0 toward peak along the usual
    sigmoid 2/(1+exp(-10p)) - 1 of adaptation progress p, so the domain
    classifier trains on near-stationary features before the encoder
    starts fighting it. A from-scratch encoder outruns the classifier at
    full constant strength and the reversed signal degenerates to noise.
    """
    if cfg.lambda_schedule == "const":
        return peak
    span = max(1, cfg.total_iters - cfg.warmup_iters)
    p = min(1.0, max(0.0, (it - cfg.warmup_iters) / span))
    return peak * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def strip_annotations(sample: ImageSample) -> ImageSample:
    return dataclasses.replace(sample, annotations=())


def make_optimizer(model: DetectorModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    # v <- mu*v + g + wd*theta; theta <- theta - lr*v
    return torch.optim.SGD(
        model.parameters(), lr=cfg.lr_phase1, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def _gt_arrays(sample: ImageSample):
    if not sample.annotations:
        return np.empty((0, 4)), np.empty(0, dtype=np.int64)
    boxes = np.array([a.box for a in sample.annotations], dtype=np.float64)
    classes = np.array([a.class_id for a in sample.annotations], dtype=np.int64)
    return boxes, classes


def _head_forward(model, feature, proposals, gt_boxes, gt_classes, rng) -> HeadOut:
    rois, labels, reg_targets, n_fg = sample_head_rois(
        proposals, gt_boxes, gt_classes, model.cfg, model.num_classes, rng
    )
    vectors = instance_vectors(model, feature, rois)
    return HeadOut(
        cls_logits=model.cls_head(vectors), reg_deltas=model.reg_head(vectors),
        rois=rois, labels=labels, reg_targets=reg_targets, n_fg=n_fg,
    )


def _instance_set(model, bundle: FeatureBundle, prop_sha_s, size, cap) -> InstanceFeatureSet:
    cfg = model.cfg
    if cfg.share_proposals:
        prop_sha_t = rpn_propose(model, bundle.f_sha_t.detach(), size, True).proposals
        prop_pri_s, prop_pri_t = prop_sha_s, prop_sha_t
    else:
        # RPN runs per stream; detached input since only proposals are used
        prop_sha_t = rpn_propose(model, bundle.f_sha_t.detach(), size, True).proposals
        prop_pri_s = rpn_propose(model, bundle.f_pri_s.detach(), size, True).proposals
        prop_pri_t = rpn_propose(model, bundle.f_pri_t.detach(), size, True).proposals
    boxes = {
        "sha_s": prop_sha_s[:cap], "sha_t": prop_sha_t[:cap],
        "pri_s": prop_pri_s[:cap], "pri_t": prop_pri_t[:cap],
    }
    return InstanceFeatureSet(
        i_sha_s=instance_vectors(model, bundle.f_sha_s, boxes["sha_s"]),
        i_sha_t=instance_vectors(model, bundle.f_sha_t, boxes["sha_t"]),
        i_pri_s=instance_vectors(model, bundle.f_pri_s, boxes["pri_s"]),
        i_pri_t=instance_vectors(model, bundle.f_pri_t, boxes["pri_t"]),
        roi_boxes=boxes,
    )


def train_step(
    model: DetectorModel,
    state: TrainState,
    x_s: ImageSample,
    x_t: ImageSample,
    cfg: TrainConfig,
    lr: float | None = None,
    warmup: bool = False,
) -> L.LossReport:
    """One optimization step on a source/target pair."""
    if x_t is not None and len(x_t.annotations) > 0:
        raise LeakGuardError(
            f"target sample {x_t.id} still carries {len(x_t.annotations)} annotations"
        )
    if lr is None:
        lr = lr_schedule(state.iter, cfg)
    mcfg = model.cfg
    height, width = x_s.pixels.shape[:2]
    gt_boxes, gt_classes = _gt_arrays(x_s)
    parts: dict[str, torch.Tensor] = {}

    if warmup:
        base_s = model.base_features(x_s)
        f_sha_s = model.shared(base_s)
        r_sha_s = rpn_propose(model, f_sha_s, (height, width), training=True)
        head_out = _head_forward(model, f_sha_s, r_sha_s.proposals, gt_boxes, gt_classes, state.rng)
        parts["l_det"] = L.loss_det(r_sha_s, head_out, gt_boxes, mcfg, state.rng)
    else:
        bundle = forward_global(model, x_s, x_t)
        r_sha_s = rpn_propose(model, bundle.f_sha_s, (height, width), training=True)
        head_out = _head_forward(
            model, bundle.f_sha_s, r_sha_s.proposals, gt_boxes, gt_classes, state.rng
        )
        parts["l_det"] = L.loss_det(r_sha_s, head_out, gt_boxes, mcfg, state.rng)

        lam = grl_coefficient(state.iter, cfg, mcfg.grl_lambda)
        need_di = not cfg.no_di
        need_ds = not (cfg.no_gtd or cfg.no_ds)
        need_tri = not (cfg.no_gtd or cfg.no_tri)
        need_intra = not (cfg.no_isd or cfg.no_intra) and cfg.variant == "none"
        need_inter = not (cfg.no_isd or cfg.no_inter) and cfg.variant == "none"

        if need_di:
            pred_ss_adv = model.domain_logits(grl(bundle.f_sha_s, lam))
            pred_st_adv = model.domain_logits(grl(bundle.f_sha_t, lam))
            parts["l_di"] = L.loss_di(pred_ss_adv, pred_st_adv)
        if need_ds or need_tri:
            pred_ps = model.domain_logits(bundle.f_pri_s)
            pred_pt = model.domain_logits(bundle.f_pri_t)
        if need_ds:
            parts["l_ds"] = L.loss_ds(pred_ps, pred_pt)
        if need_tri:
            detach = cfg.tri_detach_disc
            if cfg.tri_through_grl:
                if detach:
                    raise ConfigError("tri_through_grl and tri_detach_disc are exclusive")
                t_ss = pred_ss_adv if need_di else model.domain_logits(grl(bundle.f_sha_s, lam))
                t_st = pred_st_adv if need_di else model.domain_logits(grl(bundle.f_sha_t, lam))
                t_ps, t_pt = pred_ps, pred_pt
            else:
                t_ss = model.domain_logits(bundle.f_sha_s, detach_params=detach)
                t_st = model.domain_logits(bundle.f_sha_t, detach_params=detach)
                if detach:
                    t_ps = model.domain_logits(bundle.f_pri_s, detach_params=True)
                    t_pt = model.domain_logits(bundle.f_pri_t, detach_params=True)
                else:
                    t_ps, t_pt = pred_ps, pred_pt
            parts["l_tri"] = L.loss_tri(t_ss, t_st, t_ps, t_pt, cfg.margin)

        if need_intra or need_inter or cfg.variant != "none":
            inst = _instance_set(model, bundle, r_sha_s.proposals, (height, width), ISD_ROI_CAP)
            if cfg.variant == "none":
                l_intra, l_inter = L.loss_isd(inst)
                if need_intra:
                    parts["l_isd_intra"] = l_intra
                if need_inter:
                    parts["l_isd_inter"] = l_inter
            elif cfg.variant == "ins_simmax":
                parts["l_variant"] = L.variant_ins_simmax(inst)
            else:
                parts["l_variant"] = L.variant_ins_td(inst, model.d_ins, cfg.margin, lam)

    report, total = L.total_loss(parts, cfg)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    if lr != 0.0:
        state.optimizer.step()
    state.iter += 1
    return report


class _Cycler:
    """Seeded shuffle that reshuffles whenever the list is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self) -> int:
        if self.pos == self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        i = int(self.perm[self.pos])
        self.pos += 1
        return i

    def state(self) -> dict:
        return {"perm": self.perm.tolist(), "pos": self.pos, "rng": self.rng.bit_generator.state}

    def restore(self, st: dict):
        self.perm = np.asarray(st["perm"], dtype=np.int64)
        self.pos = int(st["pos"])
        self.rng.bit_generator.state = st["rng"]


def _new_rng(seed_seq) -> np.random.Generator:
    return np.random.default_rng(seed_seq)


def save_checkpoint(path, model: DetectorModel, state: TrainState, cfg: TrainConfig,
                    cyclers: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash(model.cfg, extra={"num_classes": model.num_classes}),
        "iter": state.iter,
        "model_state": model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
        "e_b_frozen": model.e_b_frozen,
        "train_config": config_to_dict(cfg),
        "model_config": config_to_dict(model.cfg),
        "num_classes": model.num_classes,
        "cyclers": cyclers or {},
    }
    path = Path(path)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {payload.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload


def model_from_checkpoint(path) -> tuple[DetectorModel, dict]:
    """Rebuild the model a checkpoint was saved from."""
    payload = load_checkpoint(path)
    raw = {f"model_{k}": v for k, v in payload["model_config"].items()}
    _, model_cfg = build_configs(raw)
    model = DetectorModel(model_cfg, payload["num_classes"])
    expect = config_hash(model_cfg, extra={"num_classes": payload["num_classes"]})
    if payload["config_hash"] != expect:
        raise CheckpointError(
            f"checkpoint {path} config hash {payload['config_hash']} != expected {expect}"
        )
    model.load_state_dict(payload["model_state"])
    if payload.get("e_b_frozen"):
        model.freeze_base()
    return model, payload


def _append_metrics(writer, step, lr, report: L.LossReport, wall_s: float):
    row = [step, f"{lr:.17g}"]
    row += [f"{getattr(report, name):.17g}" for name in L.LossReport.FIELDS]
    row.append(f"{wall_s:.6f}")
    writer.writerow(row)


def run_training(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    source_dir,
    target_dir,
    out_dir,
    resume_from=None,
    log=None,
) -> dict:
    """Warmup on source detection, freeze the base, adapt; returns paths."""
    cfg.validate()
    model_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = load_dataset(source_dir)
    target_raw = load_dataset(target_dir)
    if len(source) == 0:
        raise ConfigError(f"source dataset {source_dir} has zero images")
    if len(target_raw) == 0:
        raise ConfigError(f"target dataset {target_dir} has zero images")
    # leak guard boundary: training never sees target boxes past this line
    target = [strip_annotations(s) for s in target_raw]
    num_classes = 1 + max(
        (a.class_id for s in source for a in s.annotations), default=0
    )

    ss = np.random.SeedSequence(cfg.seed)
    seq_model, seq_step, seq_src, seq_tgt = ss.spawn(4)
    torch.manual_seed(cfg.seed)
    model = DetectorModel(model_cfg, num_classes, seed=cfg.seed)
    state = TrainState(iter=0, rng=_new_rng(seq_step), optimizer=make_optimizer(model, cfg))
    cyc_s = _Cycler(len(source), _new_rng(seq_src))
    cyc_t = _Cycler(len(target), _new_rng(seq_tgt))

    metrics_path = out_dir / "metrics.csv"
    old_rows = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["train_config"] != config_to_dict(cfg):
            raise CheckpointError("resume config does not match the checkpoint's train config")
        if payload["model_config"] != config_to_dict(model_cfg):
            raise CheckpointError("resume config does not match the checkpoint's model config")
        model.load_state_dict(payload["model_state"])
        if payload.get("e_b_frozen"):
            model.freeze_base()
        state.iter = payload["iter"]
        state.rng.bit_generator.state = payload["rng_state"]
        state.optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        cyc_s.restore(payload["cyclers"]["source"])
        cyc_t.restore(payload["cyclers"]["target"])
        if metrics_path.is_file():
            with open(metrics_path) as f:
                reader = csv.reader(f)
                header = next(reader, None)
                if header == list(METRICS_COLUMNS):
                    old_rows = [r for r in reader if r and int(r[0]) < state.iter]

    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(old_rows)

        while state.iter < cfg.total_iters:
            it = state.iter
            if it == cfg.warmup_iters and not model.e_b_frozen:
                model.freeze_base()
            warmup = it < cfg.warmup_iters
            x_s = source[cyc_s.take()]
            x_t = target[cyc_t.take()]
            lr = lr_schedule(it, cfg)
            t0 = time.perf_counter()
            report = train_step(model, state, x_s, x_t, cfg, lr=lr, warmup=warmup)
            _append_metrics(writer, it, lr, report, time.perf_counter() - t0)
            if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.total_iters:
                f.flush()
                cyclers = {"source": cyc_s.state(), "target": cyc_t.state()}
                save_checkpoint(out_dir / "ckpt_latest.pt", model, state, cfg, cyclers)
            if log is not None and ((it + 1) % 100 == 0 or it + 1 == cfg.total_iters):
                log(f"iter {it + 1}/{cfg.total_iters} lr {lr:g} l_total {report.l_total:.4f}")

    cyclers = {"source": cyc_s.state(), "target": cyc_t.state()}
    final = save_checkpoint(out_dir / "ckpt_final.pt", model, state, cfg, cyclers)
    return {
        "checkpoint": final,
        "latest": out_dir / "ckpt_latest.pt",
        "metrics": metrics_path,
        "model": model,
        "num_classes": num_classes,
    }
