#!/usr/bin/env python3
"""Compare the two-step schedule against plain joint training.

Both schedules train the same cascade on the same small synthetic set until
the train defect mIoU reaches --target (or --max-epochs runs out), from the
same initialization. The interesting number is how many epochs each needs:
pretraining the road subnet first should not cost much, and often pays for
itself because step 2 starts from a working gate.

Usage:
    python scripts/compare_schedules.py --out runs/schedules
"""

import argparse
import time
import warnings
from pathlib import Path

import torch

from roadaudit.dataset import SceneConfig, generate_synthetic_sequence
from roadaudit.models import TOY_SPEC, CascadeModel
from roadaudit.training import (inverse_frequency_weights, toy_train_config,
                                train_joint, train_two_step)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/schedules")
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", type=float, default=0.90,
                    help="train defect mIoU that ends a run")
    ap.add_argument("--max-epochs", type=int, default=300)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seq = generate_synthetic_sequence(
        SceneConfig(sequence_id="sched", n_frames=args.frames,
                    width=128, height=64),
        seed=11,
    )
    frames = list(seq.frames)
    weights = tuple(inverse_frequency_weights([f.mask for f in frames]))
    config = toy_train_config(max_epochs=args.max_epochs, seed=args.seed,
                              train_miou_target=args.target,
                              class_weights=weights)

    results = {}
    for name, train in (("two-step", train_two_step), ("joint", train_joint)):
        start = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            torch.manual_seed(args.seed)
            history = train(CascadeModel(TOY_SPEC), frames, frames, config)
        history.write_csv(out / f"history_{name}.csv")
        results[name] = (history, time.perf_counter() - start)

    print(f"{'schedule':<10}{'epochs':>8}{'final train mIoU':>18}{'seconds':>9}")
    for name, (history, seconds) in results.items():
        final = history.final("train_defect_miou")
        print(f"{name:<10}{history.total_epochs:>8}{final:>18.4f}{seconds:>9.0f}")
    two, joint = (results[k][0].total_epochs for k in ("two-step", "joint"))
    print(f"\ntwo-step used {two / joint:.2f}x the epochs of the joint run")
    print(f"histories in {out}")


if __name__ == "__main__":
    main()
