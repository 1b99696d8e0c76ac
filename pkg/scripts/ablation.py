#!/usr/bin/env python3
"""Cascade-vs-baseline ablation over several seeds.

Trains the gated cascade (two-step) and the ungated baseline on the same
stratified split of one synthetic sequence, with the same per-class loss
weights and the same defect-phase epoch budget, then compares validation
defect mIoU. Prints one row per seed and the averages.

Usage:
    python scripts/ablation.py --seeds 0 1 2 --epochs 100
"""

import argparse
import csv
import time
import warnings
from pathlib import Path

import torch

from roadaudit.dataset import (SceneConfig, SplitSpec,
                               generate_synthetic_sequence, stratified_split)
from roadaudit.models import TOY_SPEC, BaselineNet, CascadeModel
from roadaudit.training import (inverse_frequency_weights, toy_train_config,
                                train_baseline, train_two_step)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=100)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seq = generate_synthetic_sequence(
        SceneConfig(sequence_id="abl", n_frames=args.frames,
                    width=128, height=64),
        seed=21,
    )
    train_frames, val_frames, _ = stratified_split([seq], SplitSpec(), seed=0)
    weights = tuple(inverse_frequency_weights([f.mask for f in train_frames]))

    rows = []
    print(f"{'seed':<6}{'cascade':>9}{'baseline':>10}{'seconds':>9}")
    for seed in args.seeds:
        config = toy_train_config(max_epochs=args.epochs, seed=seed,
                                  class_weights=weights)
        start = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            torch.manual_seed(seed)
            cascade_hist = train_two_step(CascadeModel(TOY_SPEC), train_frames,
                                          val_frames, config)
            torch.manual_seed(seed)
            baseline_hist = train_baseline(BaselineNet(TOY_SPEC), train_frames,
                                           val_frames, config)
        c = cascade_hist.final("val_defect_miou")
        b = baseline_hist.final("val_defect_miou")
        rows.append((seed, c, b))
        print(f"{seed:<6}{c:>9.4f}{b:>10.4f}{time.perf_counter() - start:>9.0f}")

    avg_c = sum(c for _, c, _ in rows) / len(rows)
    avg_b = sum(b for _, _, b in rows) / len(rows)
    print(f"{'avg':<6}{avg_c:>9.4f}{avg_b:>10.4f}")

    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "cascade_val_miou", "baseline_val_miou"])
        writer.writerows(rows)
    print(f"table in {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
