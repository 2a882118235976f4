"""Command-line entry point.

Subcommands: gen-data, train, eval, distance, export-features, reproduce.
Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluate as E
from . import synthdata as D
from .config import (
    PRESETS,
    DomainShiftParams,
    ModelConfig,
    SceneConfig,
    TrainConfig,
    apply_preset,
    config_to_dict,
    load_train_config,
)
from .errors import ConfigError, DisdetError, StatsError
from .runmeta import RunManifest, dataset_hash, manifest_path_for
from .train import model_from_checkpoint, run_training

REPRODUCE_PRESETS = ("no-da", "baseline", "ddf")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a paired source/target dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n-source", type=int, default=500)
    g.add_argument("--n-target", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fog", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--blur", type=int, default=1)
    g.add_argument("--brightness", type=float, default=0.0)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--classes", type=int, default=3)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--source", type=Path, required=True)
    t.add_argument("--target", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--preset", choices=sorted(PRESETS), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", type=Path, default=None)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="detection mAP on a labeled dataset")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    d = sub.add_parser("distance", help="PAD and EMD between two datasets' features")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--source", type=Path, required=True)
    d.add_argument("--target", type=Path, required=True)
    d.add_argument("--level", choices=("global", "instance"), required=True)
    d.add_argument("--stream", choices=("sha", "pri"), default="sha")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", type=Path, required=True)

    x = sub.add_parser("export-features", help="channel-mean heatmap overlay PNG")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--image", type=Path, required=True)
    x.add_argument("--stream", choices=("sha", "pri"), required=True)
    x.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("reproduce", help="data + {no-da, baseline, ddf} + eval + distance")
    r.add_argument("--seed", type=int, default=3)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--n-source", type=int, default=500)
    r.add_argument("--n-target", type=int, default=500)
    r.add_argument("--n-test", type=int, default=100)
    r.add_argument("--total-iters", type=int, default=None)
    r.add_argument("--warmup-iters", type=int, default=None)
    r.add_argument("--presets", nargs="+", choices=sorted(PRESETS), default=list(REPRODUCE_PRESETS))
    r.add_argument("--quiet", action="store_true")
    return p


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def cmd_gen_data(args, argv) -> int:
    shift = DomainShiftParams(
        fog_alpha=args.fog, noise_sigma=args.noise,
        blur_radius=args.blur, brightness_shift=args.brightness,
    )
    shift.validate()
    # object sizes scale with the canvas so any resolution works out of the box
    base = SceneConfig()
    ratio = args.resolution / base.resolution
    scene = SceneConfig(
        resolution=args.resolution, num_classes=args.classes,
        min_size=max(4, round(base.min_size * ratio)),
        max_size=max(4, round(base.max_size * ratio)),
    )
    scene.validate()
    manifest = RunManifest(
        command="gen-data", argv=argv, seed=args.seed,
        config={"shift": dataclasses.asdict(shift), "scene": dataclasses.asdict(scene),
                "n_source": args.n_source, "n_target": args.n_target},
    )
    src, tgt = D.generate_pair(args.out, args.n_source, args.n_target, args.seed, shift, scene)
    manifest.dataset_hashes = {"source": dataset_hash(src), "target": dataset_hash(tgt)}
    manifest.finish()
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.n_source} source + {args.n_target} target images under {args.out}")
    return 0


def _resolve_train_config(args) -> tuple[TrainConfig, ModelConfig]:
    if args.config is not None:
        cfg, model_cfg = load_train_config(args.config)
    else:
        cfg, model_cfg = TrainConfig(), ModelConfig()
    if args.preset is not None:
        preset_variant = PRESETS[args.preset].get("variant", "none")
        if cfg.variant != "none" and preset_variant != "none" and cfg.variant != preset_variant:
            raise ConfigError(
                f"config selects variant {cfg.variant!r} but preset {args.preset!r} "
                f"selects {preset_variant!r}; pick one"
            )
        cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg, model_cfg


def cmd_train(args, argv) -> int:
    cfg, model_cfg = _resolve_train_config(args)
    manifest = RunManifest(
        command="train", argv=argv, seed=cfg.seed,
        config={"train": config_to_dict(cfg), "model": config_to_dict(model_cfg),
                "preset": args.preset},
        dataset_hashes={"source": dataset_hash(args.source), "target": dataset_hash(args.target)},
    )
    log = None if args.quiet else print
    result = run_training(
        cfg, model_cfg, args.source, args.target, args.out, resume_from=args.resume, log=log
    )
    manifest.finish()
    manifest.write(manifest_path_for(args.out))
    print(f"final checkpoint: {result['checkpoint']}")
    print(f"metrics: {result['metrics']}")
    return 0


def cmd_eval(args, argv) -> int:
    model, payload = model_from_checkpoint(args.checkpoint)
    samples = D.load_dataset(args.dataset)
    report = E.evaluate_detection(model, samples)
    out = report.to_dict()
    out["checkpoint"] = str(args.checkpoint)
    out["dataset"] = str(args.dataset)
    _write_json(args.out, out)
    manifest = RunManifest(
        command="eval", argv=argv, seed=None,
        config={"checkpoint_iter": payload["iter"]},
        dataset_hashes={"dataset": dataset_hash(args.dataset)},
    )
    manifest.finish()
    manifest.write(manifest_path_for(args.out))
    print(f"mAP@0.5 = {report.map:.4f} over {report.n_images} images")
    return 0


def cmd_distance(args, argv) -> int:
    model, payload = model_from_checkpoint(args.checkpoint)
    src = D.load_dataset(args.source)
    tgt = D.load_dataset(args.target)
    feats_s, warn_s = E.collect_features(model, src, args.level, seed=args.seed, stream=args.stream)
    feats_t, warn_t = E.collect_features(model, tgt, args.level, seed=args.seed, stream=args.stream)
    pad = E.proxy_a_distance(feats_s, feats_t, seed=args.seed)
    n = min(len(feats_s), len(feats_t))
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    sub_s = feats_s[rng.choice(len(feats_s), size=n, replace=False)]
    sub_t = feats_t[rng.choice(len(feats_t), size=n, replace=False)]
    emd_value = E.emd(sub_s, sub_t, seed=args.seed)
    out = {
        "level": args.level,
        "stream": args.stream,
        f"pad_{args.level}": pad,
        f"emd_{args.level}": emd_value,
        "n_source_features": len(feats_s),
        "n_target_features": len(feats_t),
        "warnings": [f"source: {w}" for w in warn_s] + [f"target: {w}" for w in warn_t],
        "checkpoint": str(args.checkpoint),
    }
    _write_json(args.out, out)
    manifest = RunManifest(
        command="distance", argv=argv, seed=args.seed,
        config={"level": args.level, "stream": args.stream, "checkpoint_iter": payload["iter"]},
        dataset_hashes={"source": dataset_hash(args.source), "target": dataset_hash(args.target)},
    )
    manifest.finish()
    manifest.write(manifest_path_for(args.out))
    print(f"{args.level} PAD = {pad:.4f}, EMD = {emd_value:.4f}")
    return 0


def cmd_export_features(args, argv) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    feat_fn = E.shared_feature if args.stream == "sha" else E.private_feature
    overlay = E.export_feature_heatmap(feat_fn(model, pixels), pixels)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay, mode="RGB").save(args.out)
    manifest = RunManifest(
        command="export-features", argv=argv, seed=None,
        config={"stream": args.stream, "image": str(args.image)},
    )
    manifest.finish()
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.out}")
    return 0


def cmd_reproduce(args, argv) -> int:
    out = Path(args.out)
    log = (lambda *a: None) if args.quiet else print
    shift = DomainShiftParams()
    scene = SceneConfig()
    log(f"generating {args.n_source}+{args.n_target} train and {args.n_test} test images")
    src_dir, tgt_dir = D.generate_pair(
        out / "data", args.n_source, args.n_target, args.seed, shift, scene
    )
    test_base = args.seed + args.n_source + args.n_target
    test = [
        D.generate_scene(test_base + j, D.TARGET, shift, scene) for j in range(args.n_test)
    ]
    test_dir = out / "data" / "test_target"
    D.write_dataset(
        test, test_dir,
        meta={"seed": args.seed, "resolution": scene.resolution,
              "num_classes": scene.num_classes, "domain": "target",
              "shift": dataclasses.asdict(shift), "role": "test"},
    )

    summary = {}
    for preset in args.presets:
        cfg = apply_preset(TrainConfig(seed=args.seed), preset)
        if args.total_iters is not None:
            # keep the warmup fraction when only the run length changes
            scaled = max(1, round(cfg.warmup_iters * args.total_iters / cfg.total_iters))
            cfg = dataclasses.replace(cfg, total_iters=args.total_iters, warmup_iters=scaled)
        if args.warmup_iters is not None:
            cfg = dataclasses.replace(cfg, warmup_iters=args.warmup_iters)
        model_cfg = ModelConfig()
        run_dir = out / "runs" / preset
        log(f"[{preset}] training {cfg.total_iters} iters")
        result = run_training(cfg, model_cfg, src_dir, tgt_dir, run_dir, log=log)
        model = result["model"]
        report = E.evaluate_detection(model, D.load_dataset(test_dir))
        row = {"map": report.map,
               "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()}}
        src_samples = D.load_dataset(src_dir)
        tgt_samples = D.load_dataset(tgt_dir)
        for level in ("global", "instance"):
            # a weak model can yield too few matched instances for the
            # probes; record null rather than aborting the sweep
            try:
                fs, _ = E.collect_features(model, src_samples, level, seed=args.seed)
                ft, _ = E.collect_features(model, tgt_samples, level, seed=args.seed)
                row[f"pad_{level}"] = E.proxy_a_distance(fs, ft, seed=args.seed)
                n = min(len(fs), len(ft))
                rng = np.random.default_rng(np.random.SeedSequence(args.seed))
                sub_s = fs[rng.choice(len(fs), size=n, replace=False)]
                sub_t = ft[rng.choice(len(ft), size=n, replace=False)]
                row[f"emd_{level}"] = E.emd(sub_s, sub_t, seed=args.seed)
            except StatsError as e:
                log(f"[{preset}] {level} feature probes skipped: {e}")
                row[f"pad_{level}"] = None
                row[f"emd_{level}"] = None
        summary[preset] = row
        log(f"[{preset}] mAP {row['map']:.4f} " + " ".join(
            f"{k} {row[k]:.4f}" for k in ("pad_global", "pad_instance", "emd_global")
            if row[k] is not None))

    _write_json(out / "summary.json", {"seed": args.seed, "presets": summary})
    manifest = RunManifest(
        command="reproduce", argv=argv, seed=args.seed,
        config={"n_source": args.n_source, "n_target": args.n_target, "n_test": args.n_test,
                "presets": list(args.presets), "total_iters": args.total_iters},
        dataset_hashes={"source": dataset_hash(src_dir), "target": dataset_hash(tgt_dir),
                        "test": dataset_hash(test_dir)},
    )
    manifest.finish()
    manifest.write(manifest_path_for(out))

    def fmt(value, width, decimals):
        return f"{'n/a':>{width}}" if value is None else f"{value:>{width}.{decimals}f}"

    header = f"{'preset':<12} {'mAP':>7} {'PAD_g':>7} {'PAD_i':>7} {'EMD_g':>8} {'EMD_i':>8}"
    print(header)
    print("-" * len(header))
    for preset, row in summary.items():
        print(f"{preset:<12} {row['map']:>7.4f} {fmt(row['pad_global'], 7, 3)} "
              f"{fmt(row['pad_instance'], 7, 3)} {fmt(row['emd_global'], 8, 4)} "
              f"{fmt(row['emd_instance'], 8, 4)}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "distance": cmd_distance,
    "export-features": cmd_export_features,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; normalize --help to 0, errors to 2
        return 0 if e.code == 0 else 2
    try:
        return _COMMANDS[args.command](args, argv)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DisdetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
