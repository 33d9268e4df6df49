"""Sweep per-fold baseline training at candidate epoch counts.

Diagnoses convergence of each fold-local model at the release-gate phantom
scale (200 volumes, 5 folds, 128 px). Prints per-fold test accuracy for each
candidate config so the gate can freeze one where every fold converges.
"""

from __future__ import annotations

import dataclasses
import sys
import time

from coverqc.baseline import BaselineArchitectureSpec, TrainConfig, build_model, classify, predict_batch, train_on_samples
from coverqc.dataprep.phantom import generate_phantom
from coverqc.dataprep.triplets import extract_triplets, make_folds

TASKS = ("apex", "basal")
N_VOLUMES, SEED, FOLDS, SIZE = 200, 7, 5, 128
ARCH = BaselineArchitectureSpec(input_size=SIZE, conv_channels=(4, 8, 16), fc_sizes=(64, 16, 1))


def main() -> None:
    t0 = time.time()
    by_task = {t: [] for t in TASKS}
    for i in range(N_VOLUMES):
        v = generate_phantom(SEED * 1_000_000 + i, (8, 9, 10)[i % 3], size=SIZE)
        for s in extract_triplets(v, target_size=SIZE):
            by_task[s.task].append(s)
    datasets = {t: make_folds(by_task[t], FOLDS, SEED) for t in TASKS}
    print(f"[setup {time.time() - t0:.0f}s]", flush=True)

    candidates = [
        TrainConfig(learning_rate=lr, epochs=ep, batch_size=8, momentum=0.9,
                    val_fraction=0.1, seed=7)
        for lr, ep in [(0.002, 20)]
    ]
    folds = [int(a) for a in sys.argv[1:]] or list(range(FOLDS))

    for cfg in candidates:
        print(f"-- lr={cfg.learning_rate} epochs={cfg.epochs}", flush=True)
        for t in TASKS:
            ds = datasets[t]
            accs = []
            for fold in folds:
                fc = dataclasses.replace(cfg, seed=cfg.seed + fold)
                model = build_model(ARCH, fc.seed)
                ckpt = train_on_samples(model, t, ds.train_samples(fold), fc, None)
                test = ds.test_samples(fold)
                probs = predict_batch(ckpt, [s.stack for s in test])
                acc = sum(classify(float(p), 0.5) == s.label for p, s in zip(probs, test)) / len(test)
                accs.append(round(acc, 4))
            print(f"   {t}: {accs}", flush=True)


if __name__ == "__main__":
    main()
