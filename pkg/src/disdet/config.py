"""Dataclass configs for data generation, the detector, and training."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

VARIANTS = ("none", "ins_simmax", "ins_td")


@dataclass(frozen=True)
class DomainShiftParams:
    """Appearance shift applied to target-domain renderings.

    Applied in the fixed order fog -> blur -> noise -> brightness; the
    result is clamped to [0, 1].
    """

    fog_alpha: float = 0.5
    noise_sigma: float = 0.05
    blur_radius: int = 1
    brightness_shift: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise ConfigError(f"fog_alpha must be in [0, 1], got {self.fog_alpha}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_radius < 0 or int(self.blur_radius) != self.blur_radius:
            raise ConfigError(f"blur_radius must be a non-negative integer, got {self.blur_radius}")
        if not -1.0 <= self.brightness_shift <= 1.0:
            raise ConfigError(f"brightness_shift must be in [-1, 1], got {self.brightness_shift}")

    @property
    def is_identity(self) -> bool:
        return (
            self.fog_alpha == 0.0
            and self.noise_sigma == 0.0
            and self.blur_radius == 0
            and self.brightness_shift == 0.0
        )


@dataclass(frozen=True)
class SceneConfig:
    """Scene generator settings for the two-domain shape dataset."""

    resolution: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 24
    max_size: int = 56
    bg_low: float = 0.12
    bg_high: float = 0.42
    max_overlap_iou: float = 0.3

    def validate(self) -> None:
        if self.resolution < 32 or self.resolution % 8 != 0:
            raise ConfigError(
                f"resolution must be >= 32 and divisible by 8, got {self.resolution}"
            )
        if not 1 <= self.num_classes <= 3:
            raise ConfigError(
                f"num_classes must be in [1, 3] (rectangle/ellipse/triangle), got {self.num_classes}"
            )
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"need 1 <= min_objects <= max_objects, got {self.min_objects}..{self.max_objects}"
            )
        if not 4 <= self.min_size <= self.max_size <= self.resolution // 2:
            raise ConfigError(
                f"need 4 <= min_size <= max_size <= resolution/2, got {self.min_size}..{self.max_size}"
            )
        if not 0.0 <= self.bg_low < self.bg_high <= 1.0:
            raise ConfigError(f"need 0 <= bg_low < bg_high <= 1, got {self.bg_low}, {self.bg_high}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and proposal settings for the detector."""

    width_mult: float = 0.25
    roi_size: int = 7
    mlp_hidden: int = 256
    instance_dim: int = 128
    stride: int = 8
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_nms: float = 0.7
    rpn_pre_nms_topk: int = 256
    rpn_train_topk: int = 64
    rpn_test_topk: int = 32
    rpn_min_size: float = 2.0
    rpn_batch: int = 32
    rpn_fg_fraction: float = 0.25
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    head_batch: int = 16
    head_fg_fraction: float = 0.25
    head_fg_iou: float = 0.5
    det_nms: float = 0.3
    det_score_floor: float = 0.05
    det_max_dets: int = 20
    # peak reversed-gradient scale; safe only because adaptation engages
    # after a long warmup, from scratch it wrecks proposal quality
    grl_lambda: float = 0.1
    share_proposals: bool = False

    def validate(self) -> None:
        if self.width_mult <= 0:
            raise ConfigError(f"width_mult must be > 0, got {self.width_mult}")
        if self.roi_size < 1:
            raise ConfigError(f"roi_size must be >= 1, got {self.roi_size}")
        if self.grl_lambda < 0:
            raise ConfigError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        if self.stride != 8:
            raise ConfigError(f"stride is fixed at 8 by the encoder layout, got {self.stride}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, ablation flags, and variant selection."""

    total_iters: int = 7000
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    phase_split: float = 5.0 / 7.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # detection-only phase; adversarial and similarity terms engage on a
    # mature encoder, early engagement starves the private path to zero
    warmup_iters: int = 2500
    margin: float = 0.25
    seed: int = 0
    checkpoint_every: int = 1000
    no_di: bool = False
    no_gtd: bool = False
    no_isd: bool = False
    no_ds: bool = False
    no_tri: bool = False
    no_intra: bool = False
    no_inter: bool = False
    variant: str = "none"
    tri_detach_disc: bool = False
    tri_through_grl: bool = False
    # "ramp" lets the domain classifier train ahead of the encoder by
    # scaling the reversed gradient from 0 up to grl_lambda over the
    # adaptation phase; "const" applies full strength immediately
    lambda_schedule: str = "ramp"

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if not self.lr_phase2 < self.lr_phase1:
            raise ConfigError(
                f"lr_phase2 must be < lr_phase1, got {self.lr_phase2} >= {self.lr_phase1}"
            )
        if not 0.0 < self.phase_split < 1.0:
            raise ConfigError(f"phase_split must be in (0, 1), got {self.phase_split}")
        if not 0.0 < self.margin <= 2.0:
            raise ConfigError(f"margin must be in (0, 2], got {self.margin}")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.lambda_schedule not in ("ramp", "const"):
            raise ConfigError(
                f"lambda_schedule must be 'ramp' or 'const', got {self.lambda_schedule!r}"
            )


# Presets mirror the ablation table rows plus the two model-design variants.
PRESETS: dict[str, dict] = {
    "no-da": {"no_di": True, "no_gtd": True, "no_isd": True},
    "baseline": {"no_gtd": True, "no_isd": True},
    "ddf": {},
    "wo-gtd": {"no_gtd": True},
    "wo-isd": {"no_isd": True},
    "wo-ds": {"no_ds": True},
    "wo-tri": {"no_tri": True},
    "wo-intra": {"no_intra": True},
    "wo-inter": {"no_inter": True},
    "ins-simmax": {"variant": "ins_simmax"},
    "ins-td": {"variant": "ins_td"},
}


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(cfg, **PRESETS[preset])


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(*cfgs, extra: dict | None = None) -> str:
    """Stable hash over one or more configs, used to guard checkpoint loads."""
    payload = {type(c).__name__: config_to_dict(c) for c in cfgs}
    if extra:
        payload["extra"] = extra
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(name: str, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"field {name}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ConfigError(f"field {name}: expected an integer, got {value!r}")
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return str(value)
    return value


def load_train_config(path, overrides: dict | None = None) -> tuple[TrainConfig, ModelConfig]:
    """Read a flat key-value JSON config file.

    Plain keys map to TrainConfig fields; keys prefixed ``model_`` map to
    ModelConfig fields. Unknown keys raise ConfigError naming the key.
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a flat JSON object")
    if overrides:
        raw.update(overrides)
    return build_configs(raw)


def build_configs(raw: dict) -> tuple[TrainConfig, ModelConfig]:
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    train_kwargs, model_kwargs = {}, {}
    for key, value in raw.items():
        if key in train_fields:
            ftype = TrainConfig.__dataclass_fields__[key].type
            train_kwargs[key] = _coerce(key, value, _resolve_type(ftype))
        elif key.startswith("model_") and key[len("model_"):] in model_fields:
            name = key[len("model_"):]
            ftype = ModelConfig.__dataclass_fields__[name].type
            if name in ("anchor_scales", "anchor_ratios"):
                model_kwargs[name] = tuple(float(v) for v in value)
            else:
                model_kwargs[name] = _coerce(key, value, _resolve_type(ftype))
        else:
            raise ConfigError(f"unknown config field {key!r}")
    train_cfg = TrainConfig(**train_kwargs)
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg.validate()
    model_cfg.validate()
    return train_cfg, model_cfg


def _resolve_type(annotation):
    mapping = {"int": int, "float": float, "bool": bool, "str": str}
    if isinstance(annotation, str):
        return mapping.get(annotation, None)
    return annotation
