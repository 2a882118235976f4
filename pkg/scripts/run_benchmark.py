#!/usr/bin/env python3
"""Multi-seed benchmark: data + presets + eval + distances per seed, then
the directional adaptation-gain checks across seeds.

Each seed runs the `reproduce` pipeline into its own directory; this script
aggregates the per-seed summaries and evaluates:
  (a) ddf target mAP > no-da target mAP in >= 2 of 3 seeds
  (b) mean ddf target mAP >= mean baseline target mAP
  (c) shared-feature global PAD ordered ddf < baseline < no-da in >= 2 of 3 seeds
"""
import argparse
import json
import sys
import time
from pathlib import Path

import torch

from disdet.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--presets", nargs="+", default=["no-da", "baseline", "ddf"])
    ap.add_argument("--n-source", type=int, default=500)
    ap.add_argument("--n-target", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--total-iters", type=int, default=None)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)

    args.out.mkdir(parents=True, exist_ok=True)
    per_seed = {}
    timing_min = {}
    for seed in args.seeds:
        seed_dir = args.out / f"seed{seed}"
        t0 = time.perf_counter()
        cmd = [
            "reproduce", "--seed", str(seed), "--out", str(seed_dir),
            "--n-source", str(args.n_source), "--n-target", str(args.n_target),
            "--n-test", str(args.n_test), "--presets", *args.presets,
        ]
        if args.total_iters is not None:
            cmd += ["--total-iters", str(args.total_iters)]
        rc = cli_main(cmd)
        if rc != 0:
            print(f"seed {seed}: reproduce failed with exit code {rc}", file=sys.stderr)
            return rc
        with open(seed_dir / "summary.json") as f:
            per_seed[str(seed)] = json.load(f)["presets"]
        timing_min[str(seed)] = (time.perf_counter() - t0) / 60
        print(f"seed {seed} done in {timing_min[str(seed)]:.1f} min", flush=True)

    checks = {}
    seeds = [str(s) for s in args.seeds]
    have = set(args.presets)
    if {"ddf", "no-da"} <= have:
        wins = [s for s in seeds if per_seed[s]["ddf"]["map"] > per_seed[s]["no-da"]["map"]]
        checks["a_ddf_beats_noda"] = {
            "wins": len(wins), "of": len(seeds), "pass": len(wins) >= 2,
            "detail": {s: {p: per_seed[s][p]["map"] for p in ("ddf", "no-da")} for s in seeds},
        }
    if {"ddf", "baseline"} <= have:
        mean_ddf = sum(per_seed[s]["ddf"]["map"] for s in seeds) / len(seeds)
        mean_base = sum(per_seed[s]["baseline"]["map"] for s in seeds) / len(seeds)
        checks["b_ddf_geq_baseline_mean"] = {
            "mean_ddf": mean_ddf, "mean_baseline": mean_base, "pass": mean_ddf >= mean_base,
        }
    if {"ddf", "baseline", "no-da"} <= have:
        def pads(s):
            vals = [per_seed[s][p]["pad_global"] for p in ("ddf", "baseline", "no-da")]
            return None if any(v is None for v in vals) else vals

        ordered = [
            s for s in seeds if pads(s) is not None and pads(s) == sorted(pads(s))
            and len(set(pads(s))) == 3
        ]
        checks["c_pad_ordering"] = {
            "ordered": len(ordered), "of": len(seeds), "pass": len(ordered) >= 2,
            "detail": {s: {p: per_seed[s][p]["pad_global"] for p in ("ddf", "baseline", "no-da")}
                       for s in seeds},
        }

    report = {
        "protocol": {
            "seeds": args.seeds, "presets": args.presets,
            "n_source": args.n_source, "n_target": args.n_target, "n_test": args.n_test,
            "total_iters": args.total_iters,
        },
        "per_seed": per_seed,
        "timing_min": timing_min,
        "checks": checks,
    }
    with open(args.out / "benchmark.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)

    def fmt(value, width, decimals):
        return f"{'n/a':>{width}}" if value is None else f"{value:>{width}.{decimals}f}"

    print(f"\n{'seed':<6} {'preset':<10} {'mAP':>7} {'PAD_g':>7} {'PAD_i':>7} {'EMD_g':>8}")
    for s in seeds:
        for p in args.presets:
            row = per_seed[s][p]
            print(f"{s:<6} {p:<10} {row['map']:>7.4f} {fmt(row['pad_global'], 7, 3)} "
                  f"{fmt(row['pad_instance'], 7, 3)} {fmt(row['emd_global'], 8, 4)}")
    ok = True
    for name, c in checks.items():
        ok &= c["pass"]
        print(f"check {name}: {'PASS' if c['pass'] else 'FAIL'}")
    print(f"benchmark: {'PASS' if ok else 'FAIL'} -> {args.out / 'benchmark.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
