#!/usr/bin/env python3
"""Drive the full phantom pipeline through the CLI, stage by stage.

Generates a phantom dataset, trains both boundary classifiers, builds the
salient-region corpus, trains the U-Nets, runs the cascade audit, and emits
the cross-validated report. Defaults are sized for a laptop CPU; pass
--volumes/--epochs to scale up.

    python3 scripts/run_phantom_pipeline.py --out runs/demo --volumes 60
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from coverqc.cli import main as coverqc_main


def build_config(args) -> dict:
    return {
        "task": "both",
        "seed": args.seed,
        "folds": args.folds,
        "phantom_count": args.volumes,
        "arch": {
            "input_size": 128,
            "depth": 3,
            "conv_channels": [4, 8, 16],
            "kernel": [3, 3, 3],
            "fc_sizes": [64, 16, 1],
        },
        "train": {
            "learning_rate": 0.002,
            "epochs": args.epochs,
            "batch_size": 8,
            "momentum": 0.9,
            "val_fraction": 0.1,
            "seed": args.seed,
        },
        "augmentation": None,
        "unet_spec": {"family": "unet", "input_size": 128, "depth": 3, "encoder": [4, 8, 16]},
        "unet_train": {
            "learning_rate": 0.001,
            "epochs": args.unet_epochs,
            "batch_size": 4,
            "val_fraction": 0.2,
            "seed": 0,
        },
        "corpus_cap": args.corpus_cap,
        "threshold": 0.5,
        "mode": args.mode,
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="run directory")
    ap.add_argument("--volumes", type=int, default=60)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--unet-epochs", type=int, default=8)
    ap.add_argument("--corpus-cap", type=int, default=30)
    ap.add_argument("--mode", choices=("baseline", "cascade", "cascade-labeled"), default="baseline")
    ap.add_argument("--skip-evaluate", action="store_true", help="stop after the cascade stage")
    args = ap.parse_args()

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(build_config(args), fh)
        cfg_path = fh.name

    stages = ["prepare", "train-baseline", "explain", "train-unet", "cascade"]
    if not args.skip_evaluate:
        stages.append("evaluate")
    for stage in stages:
        argv = [stage, "--out", args.out, "--config", cfg_path]
        print(f"== coverqc {stage}", flush=True)
        t0 = time.time()
        code = coverqc_main(argv)
        print(f"   ({time.time() - t0:.1f}s)", flush=True)
        if code != 0:
            print(f"stage {stage} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"pipeline complete; artifacts under {Path(args.out).resolve()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
