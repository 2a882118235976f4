#!/usr/bin/env python3
"""Five-minute end-to-end check on a throwaway directory.

Generates a tiny dataset, trains no-da and ddf long enough to cross the
adaptation boundary, evaluates both on held-out target images, and exports
shared/private heatmap overlays for one target image. Exits nonzero on the
first failing step; artifacts land under --out for inspection.
"""
import argparse
import json
import sys
from pathlib import Path

import torch

from disdet.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    out = args.out

    rc = cli_main([
        "reproduce", "--seed", str(args.seed), "--out", str(out),
        "--n-source", "40", "--n-target", "40", "--n-test", "12",
        "--total-iters", "400", "--warmup-iters", "150",
        "--presets", "no-da", "ddf",
    ])
    if rc != 0:
        print(f"reproduce failed with exit code {rc}", file=sys.stderr)
        return rc

    with open(out / "summary.json") as f:
        summary = json.load(f)
    for preset, row in summary["presets"].items():
        print(f"{preset}: map {row['map']:.4f} pad_global {row['pad_global']}")

    tgt_images = sorted((out / "data" / "target" / "images").glob("*.png"))
    for stream in ("sha", "pri"):
        rc = cli_main([
            "export-features",
            "--checkpoint", str(out / "runs" / "ddf" / "ckpt_final.pt"),
            "--image", str(tgt_images[0]),
            "--stream", stream,
            "--out", str(out / f"heatmap_{stream}.png"),
        ])
        if rc != 0:
            print(f"export-features {stream} failed with exit code {rc}", file=sys.stderr)
            return rc
        print(f"wrote {out / f'heatmap_{stream}.png'}")
    print("smoke run complete")
    return 0


if __name__ == "__main__":
    sys.exit(run())
